import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pumba.data import SampleArrays, SyntheticSpec, synthesize
from pumba.model import ModelConfig, init_params
from pumba.tensor import Tensor, shadow64
from pumba.training import (AdamW, Batch, ComplexBatchSampler, LossWeights, NonFiniteLossError, augment_d4,
                            bce_loss, compute_loss, fit, make_batch, margin_rank_loss, ranking_pairs,
                            supcon_loss, train_step)
from pumba.vim import EncoderConfig

from oracles import supcon_loops

TINY = ModelConfig(EncoderConfig(image_size=8, patch_size=4, width=6, depth=1, expand=2, conv_width=3,
                                 state_size=4), final_depth=1)
SMALL = ModelConfig(EncoderConfig(image_size=32, patch_size=8, width=32, depth=1, state_size=8), final_depth=1)


def tiny_batch(seed=0, n=6):
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(n, 13, 8, 8)), rng.normal(size=(n, 9)), np.array([1, 0, 0, 1, 0, 0][:n]),
                 ["a", "a", "a", "b", "b", "b"][:n], [f"m{i}" for i in range(n)])


# ------------------------------------------------------------------ losses

def test_bce_at_half():
    assert bce_loss(Tensor([0.5]), [1]).item() == pytest.approx(np.log(2), abs=1e-6)


def test_bce_perfect_prediction_is_near_zero():
    assert bce_loss(Tensor([1.0, 0.0]), [1, 0]).item() == pytest.approx(0.0, abs=1e-6)


def test_bce_matches_direct_sum():
    rng = np.random.default_rng(0)
    s, y = rng.uniform(0.01, 0.99, 32), rng.integers(0, 2, 32)
    ref = -np.mean(y * np.log(s) + (1 - y) * np.log(1 - s))
    with shadow64():
        assert bce_loss(Tensor(s), y).item() == pytest.approx(ref, abs=1e-6)


def test_bce_clamps_extremes():
    assert np.isfinite(bce_loss(Tensor([0.0, 1.0]), [1, 0]).item())


def test_supcon_two_identical_embeddings():
    z = Tensor([[1.0, 2.0], [1.0, 2.0]])
    assert supcon_loss(z, [1, 1], 1.0).item() == pytest.approx(0.0, abs=1e-7)


def test_supcon_without_positive_pairs_is_zero():
    z = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert supcon_loss(z, [0, 1, 2], 0.1).item() == 0.0


def test_supcon_matches_double_loop():
    rng = np.random.default_rng(4)
    z, labels = rng.normal(size=(4, 5)), [1, 0, 1, 1]
    with shadow64():
        assert supcon_loss(Tensor(z), labels, 0.1).item() == pytest.approx(supcon_loops(z, labels, 0.1), abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(B=st.integers(2, 6), seed=st.integers(0, 10_000))
def test_supcon_brute_force_property(B, seed):
    rng = np.random.default_rng(seed)
    z, labels = rng.normal(size=(B, 4)), rng.integers(0, 2, B).tolist()
    with shadow64():
        got = supcon_loss(Tensor(z), labels, 0.1).item()
    assert got == pytest.approx(supcon_loops(z, labels, 0.1), abs=1e-6)


def test_supcon_needs_two_rows():
    with pytest.raises(ValueError):
        supcon_loss(Tensor(np.ones((1, 3))), [1])


def test_rank_loss_boundary_and_tie():
    assert margin_rank_loss(Tensor([0.7]), Tensor([0.5]), 0.2).item() == pytest.approx(0.0, abs=1e-7)
    assert margin_rank_loss(Tensor([0.4, 0.1]), Tensor([0.4, 0.1]), 0.2).item() == pytest.approx(0.2)


def test_rank_loss_direct_formula():
    rng = np.random.default_rng(1)
    sp, sn = rng.uniform(size=10), rng.uniform(size=10)
    with shadow64():
        got = margin_rank_loss(Tensor(sp), Tensor(sn), 0.2).item()
    assert got == pytest.approx(np.mean(np.maximum(0, 0.2 - (sp - sn))), abs=1e-7)


def test_rank_loss_without_pairs_is_zero():
    assert margin_rank_loss(Tensor(np.zeros(0)), Tensor(np.zeros(0))).item() == 0.0


def test_ranking_pairs_stay_within_complex():
    pi, ni = ranking_pairs([1, 0, 0, 1, 0], ["a", "a", "b", "b", "b"])
    assert list(zip(pi, ni)) == [(0, 1), (3, 2), (3, 4)]


def test_loss_weights_validate():
    with pytest.raises(ValueError):
        LossWeights(w_bce=-1)
    with pytest.raises(ValueError):
        LossWeights(temperature=0)


# ------------------------------------------------------------------ optimizer

def test_adamw_zero_gradient_shrinks_by_decay_factor():
    p = {"w": Tensor(np.array([1.0, -2.0, 3.0]))}
    opt = AdamW()
    for _ in range(3):
        before = p["w"].data.copy()
        opt.step(p, {"w": np.zeros(3)})
        assert np.allclose(p["w"].data, before * (1 - 1e-4 * 1e-3), rtol=0, atol=1e-12)


def test_adamw_first_step_moves_by_lr():
    with shadow64():
        p = {"w": Tensor(np.array([0.5, 0.5]))}
    opt = AdamW(weight_decay=0.0)
    opt.step(p, {"w": np.array([3.0, -0.01])})
    assert np.allclose(p["w"].data, [0.5 - 1e-4, 0.5 + 1e-4], atol=1e-9)


def test_adamw_defaults():
    opt = AdamW()
    assert (opt.lr, opt.weight_decay, opt.beta1, opt.beta2, opt.eps) == (1e-4, 1e-3, 0.9, 0.999, 1e-8)


# ------------------------------------------------------------------ training step

def test_loss_total_is_weighted_sum():
    params = init_params(TINY, 0)
    w = LossWeights(w_bce=0.7, w_supcon=0.3, w_rank=1.3)
    total, terms = compute_loss(tiny_batch(), params, TINY, w)
    expect = 0.7 * terms["bce"].item() + 0.3 * terms["supcon"].item() + 1.3 * terms["rank"].item()
    assert total.item() == pytest.approx(expect, abs=1e-6)


def test_zero_weights_only_apply_decay():
    params = init_params(TINY, 0)
    before = {k: v.data.copy() for k, v in params.items()}
    train_step(tiny_batch(), params, AdamW(), LossWeights(0, 0, 0), TINY)
    for k, v in params.items():
        assert np.allclose(v.data, before[k] * np.float32(1 - 1e-7), atol=1e-7)


def test_train_step_is_bitwise_reproducible():
    runs = []
    for _ in range(2):
        params = init_params(TINY, 3)
        _, br = train_step(tiny_batch(3), params, AdamW(), LossWeights(), TINY)
        runs.append((br, b"".join(params[k].data.tobytes() for k in sorted(params))))
    assert runs[0] == runs[1]


def test_non_finite_loss_names_the_term():
    params = init_params(TINY, 0)
    b = tiny_batch()
    b.energies[0, 0] = np.inf
    with pytest.raises(NonFiniteLossError, match="bce"):
        train_step(b, params, AdamW(), LossWeights(), TINY)


def test_rank_term_skipped_without_natives():
    params = init_params(TINY, 0)
    b = tiny_batch()
    b.labels = np.zeros(6, dtype=int)
    _, terms = compute_loss(b, params, TINY, LossWeights())
    assert terms["rank"].item() == 0.0


# ------------------------------------------------------------------ batching

def test_sampler_batches_hold_natives_and_same_complex_decoys():
    labels = np.array([1] + [0] * 9 + [1] + [0] * 9)
    cids = ["a"] * 10 + ["b"] * 10
    s = ComplexBatchSampler(labels, cids, complexes_per_batch=2, decoys_per_complex=3, seed=0)
    idx = s.next_indices()
    assert len(idx) == 8 and labels[idx].sum() == 2
    s2 = ComplexBatchSampler(labels, cids, complexes_per_batch=1, decoys_per_complex=3, seed=0)
    idx = s2.next_indices()
    assert len({cids[i] for i in idx}) == 1 and labels[idx].sum() == 1


def test_sampler_state_round_trip():
    s = ComplexBatchSampler([1, 0, 0, 1, 0, 0], list("aaabbb"), 1, 1, seed=5)
    state = s.state()
    first = [s.next_indices().tolist() for _ in range(4)]
    s.set_state(state)
    assert [s.next_indices().tolist() for _ in range(4)] == first


def test_augmentation_keeps_channels_aligned():
    img = np.random.default_rng(0).normal(size=(4, 3, 6, 6))
    img[:, 1] = img[:, 0]
    out = augment_d4(img, np.random.default_rng(1))
    assert np.array_equal(out[:, 0], out[:, 1])
    for b in range(4):
        assert np.allclose(np.sort(out[b].ravel()), np.sort(img[b].ravel()))


def test_make_batch_without_rng_is_plain_indexing():
    img = np.arange(2 * 13 * 8 * 8, dtype=np.float32).reshape(2, 13, 8, 8)
    b = make_batch(img, np.zeros((2, 9)), [1, 0], ["c", "c"], ["x", "y"], np.array([1, 0]))
    assert np.array_equal(b.images, img[[1, 0]]) and b.model_ids == ["y", "x"]


def test_two_hundred_steps_halve_bce():
    data = SampleArrays.from_samples(synthesize(SyntheticSpec(complexes=10, strength=0.8, seed=0)))
    params = init_params(SMALL, 0)
    _, hist = fit(data, params, SMALL, 200, seed=0)
    bce = np.array([h.bce for h in hist])
    assert bce[-10:].mean() <= 0.5 * bce[0]


def test_seeded_runs_give_identical_loss_curves():
    data = SampleArrays.from_samples(synthesize(SyntheticSpec(complexes=4, decoys_per_complex=5, image_size=8, seed=2)))
    curves = []
    for _ in range(2):
        params = init_params(TINY, 1)
        _, hist = fit(data, params, TINY, 5, seed=1)
        curves.append([h.as_dict() for h in hist])
    assert curves[0] == curves[1]
