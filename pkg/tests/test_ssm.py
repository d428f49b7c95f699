import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pumba import tensor as ops
from pumba.ssm import (ContractError, SsmLayerParams, bidirectional_fuse, discretize, init_ssm_params,
                       materialize_hidden_attention, selective_scan, selective_scan_blocked)
from pumba.tensor import GradTape, ShapeError, Tensor, shadow64

from oracles import central_fd, max_rel_err, naive_hidden_attention, naive_scan


def make_params(seed, D, S, dt=(1e-3, 1e-1)):
    rng = np.random.default_rng(seed)
    raw = init_ssm_params(rng, D, S, *dt)
    raw["d_skip"] = rng.normal(size=D)
    return raw, SsmLayerParams(**{k: Tensor(v) for k, v in raw.items()})


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


# ------------------------------------------------------------------ discretize

def test_discretize_small_step_limit():
    a_bar, b_bar = discretize(-np.ones((2, 3)), np.ones(3), np.full(2, 1e-12))
    assert np.allclose(a_bar, 1.0) and np.allclose(b_bar, 0.0)


def test_discretize_half_life():
    a_bar, _ = discretize(-np.ones((1, 1)), np.ones(1), np.array([np.log(2)]))
    assert a_bar[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_discretize_vs_float64_exponential():
    rng = np.random.default_rng(0)
    A = -rng.uniform(0.1, 5, size=(4, 6))
    B = rng.normal(size=6)
    d = rng.uniform(1e-3, 1, size=4)
    a_bar, b_bar = discretize(A.astype(np.float32), B.astype(np.float32), d.astype(np.float32))
    ref = np.exp(np.outer(d, np.ones(6)) * A)
    assert np.max(np.abs(a_bar - ref) / ref) <= 1e-6
    assert np.allclose(b_bar, np.outer(d, B), rtol=1e-6)


def test_discretize_exact_zoh():
    A, B, d = -np.array([[2.0]]), np.array([3.0]), np.array([0.5])
    _, b_bar = discretize(A, B, d, exact_zoh=True)
    assert b_bar[0, 0] == pytest.approx((np.exp(-1.0) - 1) / -2.0 * 3.0)


@pytest.mark.parametrize("bad", [0.0, -1e-3])
def test_discretize_rejects_nonpositive_step(bad):
    with pytest.raises(ContractError):
        discretize(-np.ones((1, 1)), np.ones(1), np.array([bad]))


def test_discretize_rejects_nonnegative_state_matrix():
    with pytest.raises(ContractError):
        discretize(np.zeros((1, 1)), np.ones(1), np.array([0.1]))


def test_init_keeps_state_matrix_negative_and_steps_in_range():
    raw, p = make_params(0, 16, 8)
    assert np.all(p.state_matrix() < 0)
    dt = np.log1p(np.exp(raw["b_delta"]))
    assert np.all((dt >= 1e-3 - 1e-12) & (dt <= 1e-1 + 1e-12))
    assert np.allclose(raw["a_log"][3], np.log(np.arange(1, 9)))


# ------------------------------------------------------------------ selective scan

def test_scan_zero_step_limit_is_pure_skip():
    raw, p = make_params(0, 3, 4)
    raw["w_delta"][:] = 0
    raw["b_delta"][:] = -60.0      # softplus -> ~1e-26
    x = np.random.default_rng(1).normal(size=(5, 3))
    with shadow64():
        y = selective_scan(Tensor(x), SsmLayerParams(**{k: Tensor(v) for k, v in raw.items()})).data
    assert np.allclose(y, x * raw["d_skip"], atol=1e-20)


def test_scan_single_step():
    raw, p = make_params(2, 3, 4)
    x = np.random.default_rng(0).normal(size=(1, 3))
    delta = np.log1p(np.exp(x[0] @ raw["w_delta"] + raw["b_delta"]))
    B, C = x[0] @ raw["w_b"], x[0] @ raw["w_c"]
    ref = np.array([C @ (delta[d] * B) * x[0, d] for d in range(3)]) + raw["d_skip"] * x[0]
    with shadow64():
        y = selective_scan(Tensor(x), SsmLayerParams(**{k: Tensor(v) for k, v in raw.items()})).data
    assert np.allclose(y[0], ref, atol=1e-12)


def test_scan_matches_naive_recurrence_fixed_case():
    raw, p = make_params(7, 4, 8)
    x = np.random.default_rng(7).normal(size=(16, 4))
    y = selective_scan(Tensor(x), p).data
    assert rel_err(y, naive_scan(x, **raw)) <= 1e-5


@pytest.mark.parametrize("exact", [False, True])
@pytest.mark.parametrize("reverse", [False, True])
def test_scan_variants_match_naive(exact, reverse):
    raw, p = make_params(3, 3, 5, dt=(0.05, 1.0))
    x = np.random.default_rng(3).normal(size=(11, 3))
    y = selective_scan(Tensor(x), p, reverse=reverse, exact_zoh=exact).data
    assert rel_err(y, naive_scan(x, **raw, reverse=reverse, exact_zoh=exact)) <= 1e-5


def test_scan_batch_equals_per_sample():
    raw, p = make_params(1, 3, 4)
    x = np.random.default_rng(1).normal(size=(4, 6, 3))
    batched = selective_scan(Tensor(x), p).data
    for b in range(4):
        assert np.allclose(batched[b], selective_scan(Tensor(x[b]), p).data, atol=1e-6)


def test_scan_rejects_empty_sequence():
    _, p = make_params(0, 2, 2)
    with pytest.raises(ContractError):
        selective_scan(Tensor(np.zeros((0, 2))), p)


def scan_loss(arrays, r, reverse, exact, requires_grad=False):
    ts = {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}
    p = SsmLayerParams(**{k: v for k, v in ts.items() if k != "x"})
    return ts, ops.sum(selective_scan(ts["x"], p, reverse=reverse, exact_zoh=exact) * Tensor(r))


@pytest.mark.parametrize("exact", [False, True])
@pytest.mark.parametrize("reverse", [False, True])
def test_scan_gradients_all_parameters(exact, reverse):
    raw, _ = make_params(5, 3, 4, dt=(0.05, 0.5))
    rng = np.random.default_rng(5)
    arrays = {k: v.astype(np.float64).copy() for k, v in raw.items()}
    arrays["x"] = rng.normal(size=(2, 6, 3))
    r = rng.normal(size=(2, 6, 3))
    with shadow64():
        with GradTape() as tape:
            ts, out = scan_loss(arrays, r, reverse, exact, requires_grad=True)
        grads = tape.backward(out)
        for name, arr in arrays.items():
            fd = central_fd(lambda: scan_loss(arrays, r, reverse, exact)[1].item(), arr, 1e-4)
            assert max_rel_err(grads[ts[name]], fd) <= 1e-3, name


# ------------------------------------------------------------------ blocked scan

@pytest.mark.parametrize("block", [1, 3, 8, 32, 33, 100])
def test_blocked_scan_matches_scan(block):
    raw, p = make_params(11, 4, 6, dt=(0.01, 0.5))
    x = np.random.default_rng(11).normal(size=(33, 4))
    ref = selective_scan(Tensor(x), p).data
    assert rel_err(selective_scan_blocked(Tensor(x), p, block).data, ref) <= 1e-6


def test_blocked_scan_reverse_and_exact():
    raw, p = make_params(4, 3, 4, dt=(0.01, 0.5))
    x = np.random.default_rng(4).normal(size=(2, 20, 3))
    for reverse in (False, True):
        for exact in (False, True):
            ref = selective_scan(Tensor(x), p, reverse=reverse, exact_zoh=exact).data
            got = selective_scan_blocked(Tensor(x), p, 7, reverse=reverse, exact_zoh=exact).data
            assert rel_err(got, ref) <= 1e-6


def test_blocked_scan_block_one_matches_oracle():
    raw, p = make_params(2, 2, 3)
    x = np.random.default_rng(2).normal(size=(9, 2))
    assert rel_err(selective_scan_blocked(Tensor(x), p, 1).data, naive_scan(x, **raw)) <= 1e-5


def test_blocked_scan_full_block_is_plain_scan():
    _, p = make_params(2, 2, 3)
    x = np.random.default_rng(2).normal(size=(9, 2))
    assert np.array_equal(selective_scan_blocked(Tensor(x), p, 9).data, selective_scan(Tensor(x), p).data)


def test_blocked_scan_rejects_zero_block():
    _, p = make_params(0, 2, 2)
    with pytest.raises(ContractError):
        selective_scan_blocked(Tensor(np.ones((3, 2))), p, 0)


# ------------------------------------------------------------------ hidden attention

def test_hidden_attention_forward_is_lower_triangular():
    _, p = make_params(0, 3, 4)
    alpha = materialize_hidden_attention(Tensor(np.random.default_rng(0).normal(size=(7, 3))), p)
    assert alpha.shape == (3, 7, 7)
    assert not np.triu(alpha, 1).any()


def test_hidden_attention_backward_is_upper_triangular():
    _, p = make_params(0, 3, 4)
    alpha = materialize_hidden_attention(Tensor(np.random.default_rng(0).normal(size=(7, 3))), p, reverse=True)
    assert not np.tril(alpha, -1).any()


def test_hidden_attention_single_token():
    raw, p = make_params(1, 2, 3)
    x = np.random.default_rng(1).normal(size=(1, 2))
    delta = np.log1p(np.exp(x[0] @ raw["w_delta"] + raw["b_delta"]))
    B, C = x[0] @ raw["w_b"], x[0] @ raw["w_c"]
    with shadow64():
        alpha = materialize_hidden_attention(Tensor(x), SsmLayerParams(**{k: Tensor(v) for k, v in raw.items()}))
    for d in range(2):
        assert alpha[d, 0, 0] == pytest.approx(C @ (delta[d] * B), abs=1e-12)


def test_hidden_attention_matches_explicit_products():
    raw, p = make_params(6, 2, 3, dt=(0.05, 1.0))
    x = np.random.default_rng(6).normal(size=(6, 2))
    with shadow64():
        alpha = materialize_hidden_attention(Tensor(x), SsmLayerParams(**{k: Tensor(v) for k, v in raw.items()}))
    assert np.allclose(alpha, naive_hidden_attention(x, **{k: raw[k] for k in
                                                           ("a_log", "w_b", "w_c", "w_delta", "b_delta")}),
                       atol=1e-12)


def reconstruct(alpha, x, d_skip):
    return np.einsum("...dij,...jd->...id", alpha, x) + x * d_skip


@pytest.mark.parametrize("reverse", [False, True])
@pytest.mark.parametrize("exact", [False, True])
def test_hidden_attention_reconstructs_scan(reverse, exact):
    raw, p = make_params(8, 4, 8, dt=(0.01, 1.0))
    x = np.random.default_rng(8).normal(size=(2, 25, 4))
    alpha = materialize_hidden_attention(Tensor(x), p, reverse=reverse, exact_zoh=exact)
    y = selective_scan(Tensor(x), p, reverse=reverse, exact_zoh=exact).data
    assert np.max(np.abs(reconstruct(alpha, x, raw["d_skip"]) - y)) <= 1e-4


def test_hidden_attention_underflow_guard():
    raw, _ = make_params(0, 2, 2)
    raw["a_log"][:] = np.log(50.0)
    raw["b_delta"][:] = 5.0
    raw["w_delta"][:] = 0
    p = SsmLayerParams(**{k: Tensor(v) for k, v in raw.items()})
    alpha = materialize_hidden_attention(Tensor(np.ones((40, 2))), p)
    assert np.isfinite(alpha).all()
    assert alpha[:, 39, 0].tolist() == [0.0, 0.0]


# ------------------------------------------------------------------ properties

@pytest.mark.parametrize("j", [0, 3, 7])
def test_forward_scan_is_causal(j):
    _, p = make_params(9, 3, 4, dt=(0.1, 1.0))
    x = np.random.default_rng(9).normal(size=(10, 3))
    base = selective_scan(Tensor(x), p).data
    x2 = x.copy()
    x2[j] += 5.0
    moved = selective_scan(Tensor(x2), p).data
    if j:
        assert np.max(np.abs(moved[:j] - base[:j])) <= 1e-6
    assert np.max(np.abs(moved[j] - base[j])) > 1e-3


def test_state_stays_bounded_on_long_sequences():
    raw, p = make_params(10, 4, 16)
    x = np.random.default_rng(10).normal(size=(4096, 4))
    y = selective_scan(Tensor(x), p).data
    assert np.isfinite(y).all()
    delta = np.log1p(np.exp(x @ raw["w_delta"] + raw["b_delta"]))
    A = -np.exp(raw["a_log"])
    a_max = np.exp(delta.min() * A.max())
    bx_max = np.max(np.abs(delta[..., None] * (x @ raw["w_b"])[:, None, :] * x[..., None]))
    h_bound = bx_max / (1 - a_max)
    c_max = np.max(np.abs(x @ raw["w_c"]))
    skip = np.max(np.abs(x * raw["d_skip"]))
    assert np.max(np.abs(y)) <= 16 * c_max * h_bound + skip + 1e-3


@settings(max_examples=25, deadline=None)
@given(T=st.integers(1, 20), D=st.integers(1, 4), S=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_scan_property_matches_naive(T, D, S, seed):
    raw, p = make_params(seed, D, S)
    x = np.random.default_rng(seed).normal(size=(T, D))
    assert rel_err(selective_scan(Tensor(x), p).data, naive_scan(x, **raw)) <= 1e-5


# ------------------------------------------------------------------ fusion

def test_fuse_zero_gate_gives_zero():
    y = Tensor(np.ones((3, 2)))
    assert not bidirectional_fuse(y, y, Tensor(np.zeros((3, 2)))).data.any()


def test_fuse_saturated_gate_passes_forward_branch():
    yf = np.random.default_rng(0).normal(size=(3, 2))
    out = bidirectional_fuse(Tensor(yf), Tensor(np.zeros((3, 2))), Tensor(np.full((3, 2), 40.0))).data
    assert np.allclose(out, yf * 40.0, rtol=1e-6)


def test_fuse_shape_mismatch():
    with pytest.raises(ShapeError):
        bidirectional_fuse(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))))


def test_backward_on_reversed_input_equals_reversed_forward():
    _, p = make_params(12, 4, 8, dt=(0.01, 1.0))
    x = np.random.default_rng(12).normal(size=(17, 4))
    fwd = selective_scan(Tensor(x), p).data
    bwd = selective_scan(Tensor(x[::-1].copy()), p, reverse=True).data
    assert np.max(np.abs(bwd[::-1] - fwd)) <= 1e-6
