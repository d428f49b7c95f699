"""Five-branch hybrid scoring network.

Each functional group gets its own image encoder plus a small MLP that mixes
in the group's energy terms. The five branch embeddings then form a token
sequence for a final bidirectional encoder, whose class token feeds a
logistic head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as ops
from .tensor import Tensor, as_tensor
from .vim import ConfigError, EncoderConfig, encode, encode_tokens, init_encoder, insert_cls, sub_params

CHANNELS = (
    "shape_index_1", "shape_index_2",
    "curvature_1", "curvature_2",
    "hbond_1", "hbond_2",
    "charge_1", "charge_2",
    "hydropathy_1", "hydropathy_2",
    "rasa_1", "rasa_2",
    "patch_dist",
)

ENERGY_TERMS = (
    "van_der_waals", "desolvation", "insideness", "hydrogen_bonds", "disulfide_bonds",
    "electrostatics", "pi_stacking", "cation_pi", "aliphatic",
)

GROUP_NAMES = ("shape", "rasa", "charge", "hbond", "hydropathy")


@dataclass
class InterfacePairSample:
    image: np.ndarray          # (N, a, a)
    energies: np.ndarray       # (9,)
    label: int
    complex_id: str
    model_id: str
    capri_category: str = "incorrect"


@dataclass(frozen=True)
class BranchGroupSpec:
    """Channel and energy indices owned by each of the five groups."""

    channels: dict[str, tuple[int, ...]]
    energies: dict[str, tuple[int, ...]]
    num_channels: int = len(CHANNELS)
    num_energies: int = len(ENERGY_TERMS)

    def __post_init__(self):
        for kind, mapping, total in (("channel", self.channels, self.num_channels),
                                     ("energy", self.energies, self.num_energies)):
            if set(mapping) != set(GROUP_NAMES):
                raise ConfigError(f"{kind} groups must be exactly {GROUP_NAMES}, got {sorted(mapping)}")
            seen: dict[int, int] = {}
            for idx in (i for g in GROUP_NAMES for i in mapping[g]):
                seen[idx] = seen.get(idx, 0) + 1
            missing = sorted(set(range(total)) - set(seen))
            doubled = sorted(i for i, n in seen.items() if n > 1)
            stray = sorted(i for i in seen if not 0 <= i < total)
            if missing or doubled or stray:
                raise ConfigError(
                    f"{kind} assignment is not a partition: uncovered={missing} "
                    f"assigned twice={doubled} out of range={stray}")

    @classmethod
    def default(cls) -> "BranchGroupSpec":
        ch = {name: i for i, name in enumerate(CHANNELS)}
        en = {name: i for i, name in enumerate(ENERGY_TERMS)}
        pick = lambda names, table: tuple(table[n] for n in names)  # noqa: E731
        return cls(
            channels={
                "shape": pick(("shape_index_1", "shape_index_2", "curvature_1", "curvature_2",
                               "patch_dist"), ch),
                "rasa": pick(("rasa_1", "rasa_2"), ch),
                "charge": pick(("charge_1", "charge_2"), ch),
                "hbond": pick(("hbond_1", "hbond_2"), ch),
                "hydropathy": pick(("hydropathy_1", "hydropathy_2"), ch),
            },
            energies={
                "shape": pick(("van_der_waals", "insideness", "aliphatic"), en),
                "rasa": pick(("disulfide_bonds",), en),
                "charge": pick(("electrostatics", "cation_pi", "pi_stacking"), en),
                "hbond": pick(("hydrogen_bonds",), en),
                "hydropathy": pick(("desolvation",), en),
            },
        )

    def to_dict(self) -> dict:
        return {"channels": {g: list(v) for g, v in self.channels.items()},
                "energies": {g: list(v) for g, v in self.energies.items()}}

    @classmethod
    def from_dict(cls, d: dict, num_channels: int = len(CHANNELS),
                  num_energies: int = len(ENERGY_TERMS)) -> "BranchGroupSpec":
        return cls({g: tuple(v) for g, v in d["channels"].items()},
                   {g: tuple(v) for g, v in d["energies"].items()},
                   num_channels, num_energies)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    final_depth: int = 2
    final_conv_width: int | None = None     # None: same as the branch encoders
    groups: BranchGroupSpec = field(default_factory=BranchGroupSpec.default)

    @property
    def final_encoder(self) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(image_size=e.image_size, patch_size=e.patch_size, width=e.width,
                             depth=self.final_depth, expand=e.expand,
                             conv_width=self.final_conv_width or e.conv_width,
                             state_size=e.state_size, exact_zoh=e.exact_zoh,
                             dt_min=e.dt_min, dt_max=e.dt_max, conv_padding=e.conv_padding)


@dataclass
class BindingScore:
    score: Tensor               # (B,) in [0, 1]
    branch_embeddings: Tensor   # (B, 5, M)
    embedding: Tensor           # (B, M), final class token before the head
    logit: Tensor               # (B,)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh trainable parameters for every branch, the final encoder and the head."""
    rng = np.random.default_rng(seed)
    enc = cfg.encoder
    M = enc.width
    raw: dict[str, np.ndarray] = {}
    for g in GROUP_NAMES:
        n_ch = len(cfg.groups.channels[g])
        n_en = len(cfg.groups.energies[g])
        grid = enc.grid(n_ch)
        for k, v in init_encoder(rng, enc, grid.patch_dim, grid.tokens).items():
            raw[f"branch.{g}.enc.{k}"] = v
        b1 = (M + n_en) ** -0.5
        raw[f"branch.{g}.fc1.weight"] = rng.uniform(-b1, b1, size=(M + n_en, M))
        raw[f"branch.{g}.fc1.bias"] = np.zeros(M)
        b2 = M ** -0.5
        raw[f"branch.{g}.fc2.weight"] = rng.uniform(-b2, b2, size=(M, M))
        raw[f"branch.{g}.fc2.bias"] = np.zeros(M)
    for k, v in init_encoder(rng, cfg.final_encoder, None, len(GROUP_NAMES)).items():
        raw[f"final.{k}"] = v
    raw["head.weight"] = rng.uniform(-M ** -0.5, M ** -0.5, size=(M, 1))
    raw["head.bias"] = np.zeros(1)
    return {k: Tensor(v, requires_grad=True) for k, v in raw.items()}


def split_groups(image, energies, spec: BranchGroupSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Slice (…, N, a, a) images and (…, 9) energies into the five groups, in fixed order."""
    image = np.asarray(image.data if isinstance(image, Tensor) else image)
    energies = np.asarray(energies.data if isinstance(energies, Tensor) else energies)
    if image.shape[-3] != spec.num_channels:
        raise ConfigError(f"image has {image.shape[-3]} channels, spec expects {spec.num_channels}")
    if energies.shape[-1] != spec.num_energies:
        raise ConfigError(f"energy vector has {energies.shape[-1]} terms, spec expects {spec.num_energies}")
    return [(image[..., list(spec.channels[g]), :, :], energies[..., list(spec.energies[g])])
            for g in GROUP_NAMES]


def hybrid_branch(sub_image, sub_energy, bp: dict, cfg: EncoderConfig,
                  trace: list | None = None) -> Tensor:
    """Encode the group image, append its energies, integrate with a 2-layer MLP."""
    emb = encode(sub_image, sub_params(bp, "enc."), cfg, trace)
    h = ops.concat([emb, as_tensor(sub_energy)], axis=-1)
    h = ops.silu(h @ bp["fc1.weight"] + bp["fc1.bias"])
    return h @ bp["fc2.weight"] + bp["fc2.bias"]


def branch_embeddings(image, energies, params: dict, cfg: ModelConfig,
                      traces: dict | None = None) -> Tensor:
    parts = split_groups(image, energies, cfg.groups)
    embs = []
    for g, (sub_img, sub_en) in zip(GROUP_NAMES, parts):
        trace = None
        if traces is not None:
            trace = traces.setdefault(g, [])
        embs.append(hybrid_branch(sub_img, sub_en, sub_params(params, f"branch.{g}."),
                                  cfg.encoder, trace))
    return ops.stack(embs, axis=-2)


def score_from_branches(branches, params: dict, cfg: ModelConfig,
                        trace: list | None = None) -> BindingScore:
    """Final encoder over the five branch tokens plus the head."""
    branches = as_tensor(branches)
    fp = sub_params(params, "final.")
    seq = insert_cls(branches, fp["cls"], fp["pos"])
    emb = encode_tokens(seq, fp, cfg.final_encoder, trace)
    logit = ops.reshape(emb @ params["head.weight"] + params["head.bias"], emb.shape[:-1])
    return BindingScore(ops.sigmoid(logit), branches, emb, logit)


def score(image, energies, params: dict, cfg: ModelConfig,
          traces: dict | None = None) -> BindingScore:
    """Binding score for a batch (B, N, a, a) / (B, 9) or a single sample."""
    branches = branch_embeddings(image, energies, params, cfg, traces)
    final_trace = None
    if traces is not None:
        final_trace = traces.setdefault("final", [])
    return score_from_branches(branches, params, cfg, final_trace)


def score_sample(sample: InterfacePairSample, params: dict, cfg: ModelConfig) -> BindingScore:
    return score(sample.image[None], sample.energies[None], params, cfg)


def config_to_dict(cfg: ModelConfig) -> dict:
    from dataclasses import asdict
    return {"encoder": asdict(cfg.encoder), "final_depth": cfg.final_depth,
            "final_conv_width": cfg.final_conv_width, "groups": cfg.groups.to_dict()}


def config_from_dict(d: dict) -> ModelConfig:
    """Inverse of :func:`config_to_dict`; missing keys take their defaults."""
    known = set(EncoderConfig.__dataclass_fields__)
    enc = d.get("encoder", {})
    unknown = sorted(set(enc) - known)
    if unknown:
        raise ConfigError(f"unknown encoder settings: {unknown}")
    extra = sorted(set(d) - {"encoder", "final_depth", "final_conv_width", "groups"})
    if extra:
        raise ConfigError(f"unknown model settings: {extra}")
    groups = BranchGroupSpec.from_dict(d["groups"]) if d.get("groups") else BranchGroupSpec.default()
    return ModelConfig(EncoderConfig(**enc), d.get("final_depth", 2), d.get("final_conv_width"), groups)
