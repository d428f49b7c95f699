import struct

import numpy as np
import pytest

from pumba.checkpoint import (CHECKPOINT_VERSION, CheckpointError, decode_checkpoint, encode_checkpoint,
                              load_checkpoint, save_checkpoint)
from pumba.data import SampleArrays, SyntheticSpec, synthesize
from pumba.model import ModelConfig, init_params, score
from pumba.training import AdamW, ComplexBatchSampler, fit
from pumba.vim import EncoderConfig

TINY = ModelConfig(EncoderConfig(image_size=8, patch_size=4, width=6, depth=1, expand=2, conv_width=3,
                                 state_size=4), final_depth=1)


def data():
    return SampleArrays.from_samples(synthesize(SyntheticSpec(complexes=4, decoys_per_complex=5, image_size=8,
                                                              seed=3)))


def snapshot(params):
    return {k: v.data.tobytes() for k, v in params.items()}


def test_save_load_score_is_bitwise(tmp_path):
    params = init_params(TINY, 0)
    d = data()
    before = score(d.images, d.energies, params, TINY).score.data.tobytes()
    save_checkpoint(tmp_path / "m.ckpt", params, extra={"note": "x"})
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.extra == {"note": "x"} and ck.optimizer is None
    assert score(d.images, d.energies, ck.params, TINY).score.data.tobytes() == before


def test_corrupted_byte_fails_checksum(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", init_params(TINY, 0), AdamW())
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    raw[len(raw) // 2] ^= 0x01
    (tmp_path / "m.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "m.ckpt")


def test_version_mismatch_names_both_versions():
    buf = bytearray(encode_checkpoint(init_params(TINY, 0)))
    struct.pack_into("<H", buf, 8, CHECKPOINT_VERSION + 6)
    with pytest.raises(CheckpointError, match=rf"version {CHECKPOINT_VERSION + 6}.*version {CHECKPOINT_VERSION}"):
        decode_checkpoint(bytes(buf))


def test_truncated_and_foreign_files():
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"PUMBA")
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"X" * 100)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_no_temp_file_left_behind(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", init_params(TINY, 0))
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


def test_optimizer_state_round_trips():
    params = init_params(TINY, 0)
    opt, _ = fit(data(), params, TINY, 2, seed=0)
    back = decode_checkpoint(encode_checkpoint(params, opt)).optimizer
    assert back.step_count == 2 and back.lr == opt.lr
    assert all(back.m[k].tobytes() == opt.m[k].tobytes() and back.v[k].tobytes() == opt.v[k].tobytes()
               for k in opt.m)


def test_resume_is_bitwise_equivalent_over_five_steps(tmp_path):
    d = data()
    # uninterrupted: 5 steps then 5 more
    p_ref = init_params(TINY, 4)
    s_ref = ComplexBatchSampler(d.labels, d.complex_ids, seed=4)
    opt_ref, _ = fit(d, p_ref, TINY, 5, sampler=s_ref)
    _, hist_ref = fit(d, p_ref, TINY, 5, opt=opt_ref, sampler=s_ref)

    # interrupted: 5 steps, save, load into fresh objects, 5 more
    p = init_params(TINY, 4)
    s = ComplexBatchSampler(d.labels, d.complex_ids, seed=4)
    opt, _ = fit(d, p, TINY, 5, sampler=s)
    save_checkpoint(tmp_path / "r.ckpt", p, opt, {"sampler_state": s.state()})
    ck = load_checkpoint(tmp_path / "r.ckpt")
    s2 = ComplexBatchSampler(d.labels, d.complex_ids, seed=999)
    s2.set_state(ck.extra["sampler_state"])
    _, hist = fit(d, ck.params, TINY, 5, opt=ck.optimizer, sampler=s2)

    assert [h.as_dict() for h in hist] == [h.as_dict() for h in hist_ref]
    assert snapshot(ck.params) == snapshot(p_ref)
