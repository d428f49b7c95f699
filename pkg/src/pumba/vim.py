"""Bidirectional Vision Mamba encoder over multi-channel images.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names, so an
encoder is just a prefix inside the model's parameter dict.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as ops
from .ssm import SsmLayerParams, bidirectional_fuse, init_ssm_params, selective_scan
from .tensor import Tensor, as_tensor

LN_EPS = 1e-5


class ConfigError(ValueError):
    """Inconsistent geometry or configuration."""


@dataclass(frozen=True)
class PatchGrid:
    image_size: int
    patch_size: int
    channels: int

    def __post_init__(self):
        if self.patch_size < 1 or self.image_size < 1:
            raise ConfigError(f"image size {self.image_size} and patch size {self.patch_size} must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image size a={self.image_size} is not divisible by patch size l={self.patch_size}")

    @property
    def side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.side ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    width: int = 64          # M
    depth: int = 4           # L
    expand: int = 2          # E
    conv_width: int = 4
    state_size: int = 16     # S
    exact_zoh: bool = False
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    conv_padding: str = "directional"   # or "same"

    def __post_init__(self):
        for name in ("image_size", "patch_size", "width", "depth", "expand", "conv_width", "state_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.conv_padding not in ("directional", "same"):
            raise ConfigError(f"conv_padding must be 'directional' or 'same', got {self.conv_padding!r}")
        if not 0 < self.dt_min <= self.dt_max:
            raise ConfigError(f"need 0 < dt_min <= dt_max, got {self.dt_min}, {self.dt_max}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image size a={self.image_size} is not divisible by patch size l={self.patch_size}")

    @property
    def inner(self) -> int:
        return self.expand * self.width

    def grid(self, channels: int) -> PatchGrid:
        return PatchGrid(self.image_size, self.patch_size, channels)


@dataclass
class TokenSequence:
    embeddings: Tensor      # (..., P+1, M)
    class_index: int


def class_index(num_patches: int) -> int:
    return num_patches // 2


# ---------------------------------------------------------------- initialization

def _linear(rng, fan_in, fan_out):
    bound = fan_in ** -0.5
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_block(rng: np.random.Generator, cfg: EncoderConfig) -> dict[str, np.ndarray]:
    M, D, K = cfg.width, cfg.inner, cfg.conv_width
    p = {
        "norm.gain": np.ones(M),
        "norm.bias": np.zeros(M),
        "in_proj.weight": _linear(rng, M, 2 * D),
        "out_proj.weight": _linear(rng, D, M),
    }
    for direction in ("fwd", "bwd"):
        p[f"{direction}.conv.weight"] = rng.uniform(-K ** -0.5, K ** -0.5, size=(D, K))
        p[f"{direction}.conv.bias"] = np.zeros(D)
        for k, v in init_ssm_params(rng, D, cfg.state_size, cfg.dt_min, cfg.dt_max).items():
            p[f"{direction}.ssm.{k}"] = v
    return p


def init_encoder(rng: np.random.Generator, cfg: EncoderConfig, in_dim: int | None,
                 num_tokens: int) -> dict[str, np.ndarray]:
    """Encoder parameters; ``in_dim=None`` skips the patch embedding (token input)."""
    M = cfg.width
    p: dict[str, np.ndarray] = {}
    if in_dim is not None:
        p["embed.weight"] = _linear(rng, in_dim, M)
        p["embed.bias"] = np.zeros(M)
    p["cls"] = rng.normal(0.0, 0.5, size=M)
    p["pos"] = rng.normal(0.0, 0.02, size=(num_tokens + 1, M))
    for i in range(cfg.depth):
        for k, v in init_block(rng, cfg).items():
            p[f"blocks.{i}.{k}"] = v
    p["norm.gain"] = np.ones(M)
    p["norm.bias"] = np.zeros(M)
    return p


def sub_params(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------- forward ops

def patchify(image, patch_size: int) -> Tensor:
    """(..., N, a, a) -> (..., P, N*l*l), patches in row-major order."""
    image = as_tensor(image)
    *lead, N, a, a2 = image.shape
    if a != a2:
        raise ConfigError(f"image must be square, got {a}x{a2}")
    grid = PatchGrid(a, patch_size, N)
    g, l = grid.side, patch_size
    nb = len(lead)
    x = ops.reshape(image, (*lead, N, g, l, g, l))
    axes = tuple(range(nb)) + tuple(nb + i for i in (1, 3, 0, 2, 4))
    x = ops.transpose(x, axes)                       # (..., gr, gc, N, l, l)
    return ops.reshape(x, (*lead, grid.tokens, grid.patch_dim))


def unpatchify(patches, channels: int, patch_size: int) -> np.ndarray:
    p = np.asarray(patches.data if isinstance(patches, Tensor) else patches)
    *lead, P, _ = p.shape
    g = int(round(P ** 0.5))
    l = patch_size
    nb = len(lead)
    x = p.reshape(*lead, g, g, channels, l, l)
    axes = tuple(range(nb)) + tuple(nb + i for i in (2, 0, 3, 1, 4))
    return np.transpose(x, axes).reshape(*lead, channels, g * l, g * l)


def insert_cls(tokens: Tensor, cls: Tensor, pos: Tensor) -> TokenSequence:
    """Put the class token at floor(P/2), then add position embeddings."""
    tokens = as_tensor(tokens)
    *lead, P, M = tokens.shape
    c = class_index(P)
    cls_tok = ops.broadcast_to(ops.reshape(cls, (1,) * len(lead) + (1, M)), (*lead, 1, M))
    seq = ops.concat([tokens[..., :c, :], cls_tok, tokens[..., c:, :]], axis=-2)
    return TokenSequence(seq + pos, c)


def embed_and_insert_cls(patches, w_embed, cls, pos, b_embed=None) -> TokenSequence:
    x = as_tensor(patches) @ w_embed
    if b_embed is not None:
        x = x + b_embed
    return insert_cls(x, cls, pos)


def block_ssm(bp: dict, direction: str) -> SsmLayerParams:
    return SsmLayerParams.from_dict(bp, f"{direction}.ssm.")


def vim_block(tokens, bp: dict, cfg: EncoderConfig, trace: list | None = None) -> Tensor:
    """Pre-norm bidirectional Mamba block with a residual connection.

    When ``trace`` is a list, the post-convolution scan inputs of both
    directions are appended to it (for hidden-attention extraction).
    """
    tokens = as_tensor(tokens)
    D = cfg.inner
    h = ops.layer_norm(tokens, bp["norm.gain"], bp["norm.bias"], LN_EPS)
    xz = h @ bp["in_proj.weight"]
    x, z = xz[..., :D], xz[..., D:]
    outs = {}
    for direction in ("fwd", "bwd"):
        pad = cfg.conv_padding
        if pad == "directional":
            pad = "causal" if direction == "fwd" else "anticausal"
        u = ops.silu(ops.conv1d_depthwise(x, bp[f"{direction}.conv.weight"], bp[f"{direction}.conv.bias"], pad))
        params = block_ssm(bp, direction)
        if trace is not None:
            trace.append((direction, u.data.copy(), params))
        outs[direction] = selective_scan(u, params, reverse=(direction == "bwd"), exact_zoh=cfg.exact_zoh)
    y = bidirectional_fuse(outs["fwd"], outs["bwd"], z)
    return tokens + y @ bp["out_proj.weight"]


def encode_tokens(seq: TokenSequence, params: dict, cfg: EncoderConfig,
                  trace: list | None = None) -> Tensor:
    """Run the block stack and the final norm; return the class-token row."""
    x = seq.embeddings
    for i in range(cfg.depth):
        x = vim_block(x, sub_params(params, f"blocks.{i}."), cfg, trace)
    x = ops.layer_norm(x, params["norm.gain"], params["norm.bias"], LN_EPS)
    return x[..., seq.class_index, :]


def encode(image, params: dict, cfg: EncoderConfig, trace: list | None = None) -> Tensor:
    """Image (..., N, a, a) -> class embedding (..., M)."""
    image = as_tensor(image)
    if not np.all(np.isfinite(image.data)):
        raise ValueError("encode: image contains non-finite values")
    if image.shape[-1] != cfg.image_size:
        raise ConfigError(f"image size {image.shape[-1]} does not match configured {cfg.image_size}")
    patches = patchify(image, cfg.patch_size)
    seq = embed_and_insert_cls(patches, params["embed.weight"], params["cls"], params["pos"],
                               params.get("embed.bias"))
    return encode_tokens(seq, params, cfg, trace)
