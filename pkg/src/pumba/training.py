"""Combined classification / contrastive / ranking objective and AdamW."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as ops
from .model import ModelConfig, score
from .tensor import GradTape, Tensor, as_tensor

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_bce: float = 1.0
    w_supcon: float = 0.5
    w_rank: float = 0.5
    temperature: float = 0.1
    margin: float = 0.2

    def __post_init__(self):
        if min(self.w_bce, self.w_supcon, self.w_rank) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0 or self.margin <= 0:
            raise ValueError("temperature and margin must be positive")


@dataclass
class Batch:
    images: np.ndarray          # (B, N, a, a)
    energies: np.ndarray        # (B, 9)
    labels: np.ndarray          # (B,)
    complex_ids: list[str]
    model_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------- losses

def bce_loss(scores, labels) -> Tensor:
    """Mean binary cross-entropy with scores clamped 1e-7 away from 0 and 1."""
    s = ops.clip(as_tensor(scores), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(labels, dtype=s.data.dtype)
    per = -(ops.log(s) * y + ops.log(1.0 - s) * (1.0 - y))
    return ops.mean(per)


def supcon_loss(embeddings, labels, temperature: float = 0.1) -> Tensor:
    """Supervised contrastive loss over L2-normalized rows.

    For anchor i with positives P(i) (same label, not i):
    -1/|P(i)| sum_p log( exp(z_i.z_p/t) / sum_{a != i} exp(z_i.z_a/t) ).
    Anchors without positives are skipped; if none contribute the loss is 0.
    """
    z = as_tensor(embeddings)
    labels = np.asarray(labels)
    B = z.shape[0]
    if B < 2:
        raise ValueError("supcon_loss needs at least two embeddings")
    norm = ops.sqrt(ops.sum(z * z, axis=-1, keepdims=True) + 1e-12)
    zn = z / norm
    sim = (zn @ ops.transpose(zn)) * (1.0 / temperature)
    others = ~np.eye(B, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & others
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        return ops.sum(sim * 0.0)
    row_max = np.where(others, sim.data, -np.inf).max(axis=1, keepdims=True)
    shifted = sim - row_max
    denom = ops.sum(ops.exp(shifted) * others, axis=1, keepdims=True)
    log_prob = shifted - ops.log(denom)
    weight = np.where(anchors[:, None], pos / np.maximum(n_pos, 1)[:, None], 0.0)
    return -ops.sum(log_prob * weight) * (1.0 / anchors.sum())


def margin_rank_loss(scores_pos, scores_neg, margin: float = 0.2) -> Tensor:
    """mean(max(0, margin - (s_pos - s_neg))); zero when there are no pairs."""
    sp, sn = as_tensor(scores_pos), as_tensor(scores_neg)
    if sp.size == 0:
        return as_tensor(0.0)
    return ops.mean(ops.relu(margin - (sp - sn)))


def ranking_pairs(labels, complex_ids) -> tuple[np.ndarray, np.ndarray]:
    """(native, decoy) index pairs drawn within each complex."""
    labels = np.asarray(labels)
    pos_idx, neg_idx = [], []
    cids = np.asarray(complex_ids)
    for c in dict.fromkeys(complex_ids):
        members = np.flatnonzero(cids == c)
        natives = members[labels[members] == 1]
        decoys = members[labels[members] == 0]
        for i in natives:
            for j in decoys:
                pos_idx.append(i)
                neg_idx.append(j)
    return np.asarray(pos_idx, dtype=int), np.asarray(neg_idx, dtype=int)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamW:
    """Decoupled weight decay: p <- p(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)."""

    lr: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            decayed = p.data * (1.0 - self.lr * self.weight_decay)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (decayed - update).astype(p.data.dtype)


# ---------------------------------------------------------------- training step

@dataclass
class LossBreakdown:
    total: float
    bce: float
    supcon: float
    rank: float

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total, "bce": self.bce, "supcon": self.supcon, "rank": self.rank}


def compute_loss(batch: Batch, params: dict[str, Tensor], cfg: ModelConfig,
                 weights: LossWeights) -> tuple[Tensor, dict[str, Tensor]]:
    out = score(batch.images, batch.energies, params, cfg)
    labels = np.asarray(batch.labels)
    terms: dict[str, Tensor] = {}
    zero = as_tensor(0.0)
    terms["bce"] = bce_loss(out.score, labels) if weights.w_bce > 0 else zero
    if weights.w_supcon > 0 and len(labels) >= 2:
        terms["supcon"] = supcon_loss(out.embedding, labels, weights.temperature)
    else:
        terms["supcon"] = zero
    pi, ni = ranking_pairs(labels, batch.complex_ids)
    if weights.w_rank > 0 and len(pi):
        terms["rank"] = margin_rank_loss(out.score[pi], out.score[ni], weights.margin)
    else:
        terms["rank"] = zero
    total = (terms["bce"] * weights.w_bce + terms["supcon"] * weights.w_supcon
             + terms["rank"] * weights.w_rank)
    return total, terms


def train_step(batch: Batch, params: dict[str, Tensor], opt: AdamW, weights: LossWeights,
               cfg: ModelConfig) -> tuple[dict[str, Tensor], LossBreakdown]:
    """One forward/backward pass and one AdamW update (parameters updated in place)."""
    with GradTape() as tape:
        total, terms = compute_loss(batch, params, cfg, weights)
    values = {k: float(v.item()) for k, v in terms.items()}
    for name, val in values.items():
        if not np.isfinite(val):
            raise NonFiniteLossError(f"loss term '{name}' is non-finite ({val}) at step {opt.step_count + 1}")
    if not np.isfinite(total.item()):
        raise NonFiniteLossError(f"total loss is non-finite ({total.item()})")
    by_tensor = tape.backward(total, wrt=params.values())
    grads = {name: by_tensor[p] for name, p in params.items()}
    opt.step(params, grads)
    return params, LossBreakdown(float(total.item()), values["bce"], values["supcon"], values["rank"])


# ---------------------------------------------------------------- batching

class ComplexBatchSampler:
    """Batches built complex by complex: each complex contributes its natives
    plus a random subset of its decoys, so ranking and contrastive terms
    stay active whenever a native exists."""

    def __init__(self, labels, complex_ids, complexes_per_batch: int = 2,
                 decoys_per_complex: int = 7, seed: int = 0):
        self.labels = np.asarray(labels)
        self.complex_ids = np.asarray(complex_ids)
        self.complexes = list(dict.fromkeys(complex_ids))
        self.complexes_per_batch = complexes_per_batch
        self.decoys_per_complex = decoys_per_complex
        self.rng = np.random.default_rng(seed)
        self._members = {c: np.flatnonzero(self.complex_ids == c) for c in self.complexes}

    def next_indices(self) -> np.ndarray:
        k = min(self.complexes_per_batch, len(self.complexes))
        chosen = self.rng.choice(len(self.complexes), size=k, replace=False)
        idx = []
        for ci in sorted(chosen):
            members = self._members[self.complexes[ci]]
            natives = members[self.labels[members] == 1]
            decoys = members[self.labels[members] == 0]
            n = min(self.decoys_per_complex, len(decoys))
            picked = self.rng.choice(decoys, size=n, replace=False) if n else decoys[:0]
            idx.extend(natives.tolist())
            idx.extend(sorted(picked.tolist()))
        return np.asarray(idx, dtype=int)

    def state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def augment_d4(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random rotation by a multiple of 90 degrees and optional transpose per sample.

    The same transform is applied to every channel of a sample, so paired
    channels stay aligned.
    """
    out = np.empty_like(images)
    ks = rng.integers(0, 4, size=len(images))
    flips = rng.integers(0, 2, size=len(images))
    for i, (k, f) in enumerate(zip(ks, flips)):
        img = np.rot90(images[i], k=int(k), axes=(-2, -1))
        out[i] = np.swapaxes(img, -1, -2) if f else img
    return out


def make_batch(images, energies, labels, complex_ids, model_ids, idx,
               rng: np.random.Generator | None = None) -> Batch:
    imgs = images[idx]
    if rng is not None:
        imgs = augment_d4(imgs, rng)
    return Batch(imgs, energies[idx], np.asarray(labels)[idx],
                 [complex_ids[i] for i in idx], [model_ids[i] for i in idx])


def fit(data, params: dict[str, Tensor], cfg: ModelConfig, steps: int,
        weights: LossWeights | None = None, opt: AdamW | None = None,
        sampler: ComplexBatchSampler | None = None, seed: int = 0,
        log_every: int = 0, callback=None, augment: bool = True) -> tuple[AdamW, list[LossBreakdown]]:
    """Run ``steps`` AdamW steps over ``data`` (a :class:`pumba.data.SampleArrays`)."""
    weights = weights or LossWeights()
    opt = opt or AdamW()
    sampler = sampler or ComplexBatchSampler(data.labels, data.complex_ids, seed=seed)
    history = []
    for i in range(steps):
        idx = sampler.next_indices()
        batch = make_batch(data.images, data.energies, data.labels, data.complex_ids, data.model_ids, idx,
                           sampler.rng if augment else None)
        _, br = train_step(batch, params, opt, weights, cfg)
        history.append(br)
        if log_every and (i + 1) % log_every == 0:
            log.info("step %d total=%.4f bce=%.4f supcon=%.4f rank=%.4f",
                     opt.step_count, br.total, br.bce, br.supcon, br.rank)
        if callback is not None:
            callback(opt.step_count, br)
    return opt, history
