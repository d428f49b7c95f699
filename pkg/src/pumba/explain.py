"""Hidden-attention saliency: pixel maps per feature group and branch importance.

A forward pass with tracing records, for every block and direction, the
post-convolution input of the scan together with its parameters. From those
the implicit mixing matrices are rebuilt, the class-token row is read out,
and the magnitudes are averaged over layers, directions and channels.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .model import GROUP_NAMES, ModelConfig, score
from .ssm import ContractError, materialize_hidden_attention

Z_CUTOFF = 1.96
MARK_RGB = (255, 0, 0)


@dataclass
class HiddenAttentionStack:
    matrices: np.ndarray    # (L, 2, D, T, T); direction 0 forward, 1 backward

    @property
    def token_count(self) -> int:
        return self.matrices.shape[-1]

    @classmethod
    def from_trace(cls, trace: list, exact_zoh: bool = False, sample: int | None = None) -> "HiddenAttentionStack":
        """Rebuild the stack from ``(direction, u, params)`` entries recorded by a traced forward.

        Entries come in (fwd, bwd) pairs per block. ``u`` may carry a batch
        axis; ``sample`` picks one row of it.
        """
        if not trace or len(trace) % 2:
            raise ContractError(f"trace must hold forward/backward pairs, got {len(trace)} entries")
        layers = []
        for k in range(0, len(trace), 2):
            pair = []
            for direction, u, params in trace[k:k + 2]:
                if sample is not None:
                    u = u[sample]
                pair.append(materialize_hidden_attention(u, params, reverse=(direction == "bwd"),
                                                         exact_zoh=exact_zoh))
            layers.append(np.stack(pair))
        return cls(np.stack(layers).astype(np.float64))

    def __add__(self, other: "HiddenAttentionStack") -> "HiddenAttentionStack":
        return HiddenAttentionStack(self.matrices + other.matrices)


def token_relevance(stack: HiddenAttentionStack, class_index: int) -> np.ndarray:
    """Mean |alpha| of the class-token row over layers, directions and channels, class column removed."""
    T = stack.token_count
    if not 0 <= class_index < T:
        raise ContractError(f"class_index {class_index} out of range for {T} tokens")
    row = np.abs(stack.matrices[..., class_index, :]).mean(axis=tuple(range(stack.matrices.ndim - 2)))
    return np.delete(row, class_index)


def zscore_threshold(values, cutoff: float = Z_CUTOFF) -> tuple[np.ndarray, np.ndarray]:
    """Standardize (population std) and mark |z| >= cutoff. Zero variance gives zeros and no marks."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ContractError("zscore_threshold needs at least two values")
    sd = v.std()
    if sd == 0 or not np.isfinite(sd):
        return np.zeros_like(v), np.zeros(v.shape, dtype=bool)
    z = (v - v.mean()) / sd
    return z, np.abs(z) >= cutoff


@dataclass
class PixelAttentionMap:
    group: str
    relevance: np.ndarray       # (g, g) raw token relevances
    token_z: np.ndarray         # (g, g)
    token_mask: np.ndarray      # (g, g) bool
    grid: np.ndarray            # (a, a), z replicated over each patch
    significant_mask: np.ndarray  # (a, a) bool


def pixel_attention_map(group: str, relevance, patch_size: int,
                        cutoff: float = Z_CUTOFF) -> PixelAttentionMap:
    rel = np.asarray(relevance, dtype=np.float64)
    g = int(round(rel.size ** 0.5))
    if g * g != rel.size:
        raise ContractError(f"{rel.size} relevances do not form a square grid")
    z, mask = zscore_threshold(rel, cutoff)
    z, rel, mask = z.reshape(g, g), rel.reshape(g, g), mask.reshape(g, g)
    up = np.ones((patch_size, patch_size))
    return PixelAttentionMap(group, rel, z, mask, np.kron(z, up), np.kron(mask, up).astype(bool))


@dataclass
class FeatureImportance:
    groups: tuple[str, ...]
    raw: np.ndarray
    z: np.ndarray

    def top(self) -> str:
        return self.groups[int(np.argmax(self.z))]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.groups, self.z.tolist()))


def feature_importance(final_stack: HiddenAttentionStack | np.ndarray) -> FeatureImportance:
    """Class-row relevance over the five branch tokens, z-scored across groups.

    Also accepts precomputed raw relevances (e.g. averaged over samples).
    """
    if isinstance(final_stack, HiddenAttentionStack):
        raw = token_relevance(final_stack, final_stack.token_count // 2)
    else:
        raw = np.asarray(final_stack, dtype=np.float64)
    if raw.shape != (len(GROUP_NAMES),):
        raise ContractError(f"expected {len(GROUP_NAMES)} branch relevances, got shape {raw.shape}")
    z, _ = zscore_threshold(raw)
    return FeatureImportance(GROUP_NAMES, raw, z)


@dataclass
class Explanation:
    maps: dict[str, PixelAttentionMap]
    importance: FeatureImportance
    score: float


def explain_sample(image, energies, params: dict, cfg: ModelConfig,
                   cutoff: float = Z_CUTOFF) -> Explanation:
    """Traced forward of one sample (N, a, a) / (9,) and all derived maps."""
    traces: dict = {}
    out = score(np.asarray(image)[None], np.asarray(energies)[None], params, cfg, traces)
    enc = cfg.encoder
    maps = {}
    for g in GROUP_NAMES:
        stack = HiddenAttentionStack.from_trace(traces[g], enc.exact_zoh, sample=0)
        rel = token_relevance(stack, stack.token_count // 2)
        maps[g] = pixel_attention_map(g, rel, enc.patch_size, cutoff)
    final = HiddenAttentionStack.from_trace(traces["final"], enc.exact_zoh, sample=0)
    return Explanation(maps, feature_importance(final), float(out.score.data[0]))


def branch_relevance_batch(images, energies, params: dict, cfg: ModelConfig) -> np.ndarray:
    """Raw final-encoder relevances (B, 5) for a batch."""
    traces: dict = {"final": []}
    score(images, energies, params, cfg, traces)
    out = []
    for b in range(len(images)):
        stack = HiddenAttentionStack.from_trace(traces["final"], cfg.encoder.exact_zoh, sample=b)
        out.append(token_relevance(stack, stack.token_count // 2))
    return np.stack(out)


# ---------------------------------------------------------------- export

def _to_gray(channel) -> np.ndarray:
    c = np.asarray(channel, dtype=np.float64)
    lo, hi = c.min(), c.max()
    if hi <= lo:
        return np.zeros(c.shape, dtype=np.uint8)
    return np.round((c - lo) / (hi - lo) * 255.0).astype(np.uint8)


def overlay_bytes(pmap: PixelAttentionMap, channel, fmt: str = "P6") -> bytes:
    """Binary PNM: grayscale channel, significant pixels marked (red in P6, white in P5)."""
    gray = _to_gray(channel)
    if gray.shape != pmap.significant_mask.shape:
        raise ContractError(f"channel shape {gray.shape} does not match map {pmap.significant_mask.shape}")
    h, w = gray.shape
    if fmt == "P5":
        body = np.where(pmap.significant_mask, 255, gray).astype(np.uint8)
    elif fmt == "P6":
        body = np.repeat(gray[..., None], 3, axis=-1)
        body[pmap.significant_mask] = MARK_RGB
    else:
        raise ValueError(f"unknown overlay format {fmt!r} (use P5 or P6)")
    return f"{fmt}\n{w} {h}\n255\n".encode("ascii") + body.tobytes()


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def export_overlay(pmap: PixelAttentionMap, channel, path, fmt: str = "P6") -> None:
    _atomic_write(path, overlay_bytes(pmap, channel, fmt))


def write_relevance_csv(path, maps: dict[str, PixelAttentionMap]) -> None:
    """One row per (group, token): group, token, row, col, relevance, z, significant."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "token", "row", "col", "relevance", "z", "significant"])
            for g, m in maps.items():
                side = m.relevance.shape[0]
                for t in range(side * side):
                    r, c = divmod(t, side)
                    w.writerow([g, t, r, c, f"{m.relevance[r, c]:.9g}", f"{m.token_z[r, c]:.9g}",
                                int(m.token_mask[r, c])])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
