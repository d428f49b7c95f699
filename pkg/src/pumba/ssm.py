"""Selective state-space scan with input-dependent discretization.

Shapes follow the token-major convention used throughout the package: a
sequence is (T, D) with an optional leading batch axis, the per-channel state
has S entries, and the state matrix is diagonal, stored as ``a_log`` with
``A = -exp(a_log)`` so the recurrence always decays.

The scan itself is a single fused tape op (forward recurrence plus a
hand-written adjoint recurrence); the input projections around it are
ordinary tape ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as ops
from .tensor import Tensor, ShapeError, as_tensor

UNDERFLOW = 1e-30


class ContractError(ValueError):
    """An operation was called outside its precondition."""


@dataclass
class SsmLayerParams:
    """Parameters of one selective SSM over ``D`` channels with state size ``S``."""

    a_log: Tensor     # (D, S)
    w_b: Tensor       # (D, S)
    w_c: Tensor       # (D, S)
    w_delta: Tensor   # (D, D)
    b_delta: Tensor   # (D,)
    d_skip: Tensor    # (D,)

    @property
    def channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.a_log.shape[1]

    def state_matrix(self) -> np.ndarray:
        return -np.exp(self.a_log.data)

    def tensors(self) -> dict[str, Tensor]:
        return {"a_log": self.a_log, "w_b": self.w_b, "w_c": self.w_c,
                "w_delta": self.w_delta, "b_delta": self.b_delta, "d_skip": self.d_skip}

    @classmethod
    def from_dict(cls, params: dict, prefix: str = "") -> "SsmLayerParams":
        return cls(**{k: params[prefix + k] for k in
                      ("a_log", "w_b", "w_c", "w_delta", "b_delta", "d_skip")})


def init_ssm_params(rng: np.random.Generator, channels: int, state_size: int,
                    dt_min: float = 1e-3, dt_max: float = 1e-1) -> dict[str, np.ndarray]:
    """S4D-real style initialization.

    ``a_log = log(1..S)`` per channel; the step-size bias is the inverse
    softplus of a log-uniform draw in [dt_min, dt_max].
    """
    D, S = channels, state_size
    a_log = np.log(np.tile(np.arange(1, S + 1, dtype=np.float64), (D, 1)))
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=D))
    b_delta = dt + np.log(-np.expm1(-dt))  # inverse softplus
    bound = D ** -0.5
    return {
        "a_log": a_log,
        "w_b": rng.uniform(-bound, bound, size=(D, S)),
        "w_c": rng.uniform(-bound, bound, size=(D, S)),
        "w_delta": rng.normal(0.0, 0.1 * bound, size=(D, D)),
        "b_delta": b_delta,
        "d_skip": np.ones(D),
    }


def discretize(a_diag, b_t, delta_t, exact_zoh: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold transition for one step.

    Returns ``A_bar = exp(delta ⊗ A)`` of shape (D, S) and ``B_bar``: the
    Euler rule ``delta ⊗ B`` by default, or the exact ZOH integral
    ``(A_bar - 1) / A * B`` when ``exact_zoh`` is set.
    """
    a = np.asarray(a_diag)
    b = np.asarray(b_t)
    d = np.asarray(delta_t)
    if np.any(d <= 0):
        raise ContractError("discretize: step sizes must be strictly positive")
    if np.any(a >= 0):
        raise ContractError("discretize: state matrix must be strictly negative")
    da = d[:, None] * a
    a_bar = np.exp(da)
    if exact_zoh:
        b_bar = np.expm1(da) / a * b[None, :]
    else:
        b_bar = d[:, None] * b[None, :]
    return a_bar, b_bar


# ----------------------------------------------------------------- fused kernel

def _time_order(T: int, reverse: bool) -> range:
    return range(T - 1, -1, -1) if reverse else range(T)


def _input_coeff(delta, A, exact_zoh):
    """Per-step B multiplier: delta (Euler) or expm1(delta*A)/A (exact)."""
    if exact_zoh:
        return np.expm1(delta[..., None] * A) / A
    return delta[..., None]


def scan_forward(u, delta, A, B, C, reverse=False, exact_zoh=False):
    """Run the recurrence over numpy arrays.

    u, delta: (..., T, D); A: (D, S); B, C: (..., T, S).
    Returns (y, states, a_bar) with y (..., T, D) excluding the skip term.
    """
    T = u.shape[-2]
    a_bar = np.exp(delta[..., None] * A)                    # (..., T, D, S)
    bu = _input_coeff(delta, A, exact_zoh) * (u[..., None] * B[..., None, :])
    h = np.zeros(u.shape[:-2] + A.shape, dtype=u.dtype)
    states = np.empty_like(a_bar)
    for t in _time_order(T, reverse):
        h = a_bar[..., t, :, :] * h + bu[..., t, :, :]
        states[..., t, :, :] = h
    y = np.einsum("...tds,...ts->...td", states, C)
    return y, states, a_bar


def scan_backward(g, u, delta, A, B, C, states, a_bar, reverse=False, exact_zoh=False):
    """Adjoint of :func:`scan_forward` for upstream gradient ``g`` (..., T, D)."""
    T = u.shape[-2]
    gC = np.einsum("...td,...tds->...ts", g, states)
    gh_out = g[..., None] * C[..., None, :]
    lam = np.zeros(u.shape[:-2] + A.shape, dtype=u.dtype)
    g_bu = np.empty_like(states)
    g_abar = np.empty_like(states)
    order = list(_time_order(T, reverse))
    for pos in range(T - 1, -1, -1):
        t = order[pos]
        lam = gh_out[..., t, :, :] + lam
        g_bu[..., t, :, :] = lam
        if pos > 0:
            g_abar[..., t, :, :] = lam * states[..., order[pos - 1], :, :]
        else:
            g_abar[..., t, :, :] = 0.0
        lam = lam * a_bar[..., t, :, :]
    lead = tuple(range(u.ndim - 2))
    d_exp = g_abar * a_bar                                  # d/d(delta*A)
    uB = u[..., None] * B[..., None, :]
    if exact_zoh:
        coeff = np.expm1(delta[..., None] * A) / A
        g_delta = (d_exp * A).sum(-1) + (g_bu * uB * a_bar).sum(-1)
        dcoeff_dA = (delta[..., None] * a_bar * A - np.expm1(delta[..., None] * A)) / (A * A)
        gA = (d_exp * delta[..., None]).sum(axis=lead + (-3,)) + (g_bu * uB * dcoeff_dA).sum(axis=lead + (-3,))
    else:
        coeff = delta[..., None]
        g_delta = (d_exp * A).sum(-1) + (g_bu * uB).sum(-1)
        gA = (d_exp * delta[..., None]).sum(axis=lead + (-3,))
    gu = (g_bu * coeff * B[..., None, :]).sum(-1)
    gB = (g_bu * coeff * u[..., None]).sum(-2)
    return gu, g_delta, gA, gB, gC


def scan(u, delta, A, B, C, reverse: bool = False, exact_zoh: bool = False) -> Tensor:
    """Differentiable selective recurrence (no skip term).

    ``A`` is the (negative) diagonal state matrix as a tensor so gradients
    reach ``a_log`` through the caller's ``-exp``.
    """
    u, delta, A, B, C = (as_tensor(t) for t in (u, delta, A, B, C))
    y, states, a_bar = scan_forward(u.data, delta.data, A.data, B.data, C.data, reverse, exact_zoh)

    def backward(g):
        return scan_backward(g, u.data, delta.data, A.data, B.data, C.data,
                             states, a_bar, reverse, exact_zoh)

    return ops._finish(y, (u, delta, A, B, C), backward)


# ----------------------------------------------------------------- public ops

def project(x, params: SsmLayerParams) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Input-dependent (delta, A, B, C) for every step of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != params.channels:
        raise ShapeError(f"selective_scan: input {x.shape} vs {params.channels} channels")
    delta = ops.softplus(x @ params.w_delta + params.b_delta)
    A = ops.neg(ops.exp(params.a_log))
    B = x @ params.w_b
    C = x @ params.w_c
    return delta, A, B, C


def selective_scan(x, params: SsmLayerParams, reverse: bool = False,
                   exact_zoh: bool = False) -> Tensor:
    """y_t = <C_t, h_t> + D_skip * x_t with h_t = A_bar_t h_{t-1} + B_bar_t x_t.

    ``x`` is (T, D) or (batch, T, D). With ``reverse`` the recurrence runs
    from the last token to the first (h_{T} = 0) and the output stays in the
    original token order.
    """
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ContractError(f"selective_scan needs at least one token, got shape {x.shape}")
    delta, A, B, C = project(x, params)
    y = scan(x, delta, A, B, C, reverse=reverse, exact_zoh=exact_zoh)
    return y + x * params.d_skip


def selective_scan_blocked(x, params: SsmLayerParams, block: int, reverse: bool = False,
                           exact_zoh: bool = False) -> Tensor:
    """Chunked evaluation of :func:`selective_scan`, inference only.

    Inside a chunk the state is expanded in closed form from cumulative
    log-decays; only the state at the chunk boundary is carried forward.
    Nothing is recorded on the gradient tape.
    """
    if block < 1:
        raise ContractError(f"block size must be >= 1, got {block}")
    x = as_tensor(x)
    T = x.shape[-2]
    if block >= T:
        return selective_scan(x, params, reverse=reverse, exact_zoh=exact_zoh).detach()
    delta, A, B, C = (t.data for t in project(x, params))
    u = x.data
    if reverse:
        u, delta, B, C = (np.flip(a, -2) for a in (u, delta, B, C))
    A = A.data if isinstance(A, Tensor) else A
    log_a = delta[..., None] * A                                # (..., T, D, S)
    bu = _input_coeff(delta, A, exact_zoh) * (u[..., None] * B[..., None, :])
    h = np.zeros(u.shape[:-2] + A.shape, dtype=u.dtype)
    y = np.empty_like(u)
    for start in range(0, T, block):
        stop = min(start + block, T)
        cum = np.cumsum(log_a[..., start:stop, :, :], axis=-3)   # (..., b, D, S)
        # decay from step j (exclusive) to step i (inclusive), j <= i
        diff = cum[..., :, None, :, :] - cum[..., None, :, :, :]  # (..., i, j, D, S)
        b = stop - start
        causal = np.tril(np.ones((b, b), dtype=bool))[..., None, None]
        w = np.where(causal, np.exp(np.where(causal, diff, 0.0)), 0.0)
        hs = np.einsum("...ijds,...jds->...ids", w, bu[..., start:stop, :, :])
        hs += np.exp(cum) * h[..., None, :, :]
        y[..., start:stop, :] = np.einsum("...tds,...ts->...td", hs, C[..., start:stop, :])
        h = hs[..., -1, :, :]
    if reverse:
        y = np.flip(y, -2)
    return Tensor._wrap(y + x.data * params.d_skip.data)


def materialize_hidden_attention(x, params: SsmLayerParams, reverse: bool = False,
                                 exact_zoh: bool = False) -> np.ndarray:
    """Implicit token-to-token mixing matrices of one SSM, shape (..., D, T, T).

    Forward: alpha[d, i, j] = sum_s C_i[s] prod_{k=j+1..i} A_bar_k[d, s] B_bar_j[d, s]
    for j <= i, zero above the diagonal. The skip term is not included.
    The reverse direction is obtained by running the forward construction on
    the flipped sequence and flipping both token axes back, which makes it
    upper triangular.
    """
    x = as_tensor(x)
    if reverse:
        flipped = Tensor._wrap(np.flip(x.data, -2))
        alpha = materialize_hidden_attention(flipped, params, exact_zoh=exact_zoh)
        return np.flip(alpha, (-2, -1)).copy()
    delta, A, B, C = (t.data for t in project(x, params))
    log_a = delta[..., None] * A                     # (..., T, D, S)
    cum = np.cumsum(log_a, axis=-3)
    T = x.shape[-2]
    diff = cum[..., :, None, :, :] - cum[..., None, :, :, :]  # (..., i, j, D, S)
    causal = np.tril(np.ones((T, T), dtype=bool))[..., None, None]
    decay = np.where(causal, np.exp(np.where(causal, diff, 0.0)), 0.0)
    decay[decay < UNDERFLOW] = 0.0
    b_bar = _input_coeff(delta, A, exact_zoh) * B[..., None, :]       # (..., T, D, S)
    alpha = np.einsum("...is,...ijds,...jds->...dij", C, decay, b_bar)
    return alpha


def bidirectional_fuse(y_fwd, y_bwd, z_gate) -> Tensor:
    """Gate both directions with SiLU(z) and add them."""
    y_fwd, y_bwd, z_gate = as_tensor(y_fwd), as_tensor(y_bwd), as_tensor(z_gate)
    if not (y_fwd.shape == y_bwd.shape == z_gate.shape):
        raise ShapeError(f"bidirectional_fuse: shapes {y_fwd.shape}, {y_bwd.shape}, {z_gate.shape}")
    gate = ops.silu(z_gate)
    return y_fwd * gate + y_bwd * gate
