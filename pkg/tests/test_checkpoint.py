import struct

import numpy as np
import pytest

from wavesep import nn
from wavesep.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from wavesep.errors import ConfigError, IntegrityError
from wavesep.model import Model, ModelConfig, separate_track

CFG = ModelConfig(stacks=1, dilation_depth=2, filters=3, target_field=16, num_outputs=2, post_filters=(4, 3))


def trained_like(seed=0):
    m = Model.init(CFG, seed=seed)
    rng = np.random.default_rng(seed)
    shapes = [p.data for p in m.parameters()]
    state = nn.AdamState([rng.standard_normal(p.shape).astype(np.float32) for p in shapes],
                         [rng.random(p.shape).astype(np.float32) for p in shapes], step_count=42)
    return m, Checkpoint.capture(m, state, [(1.5, 2.5), (1.25, 2.0)])


def test_save_load_save_identical(tmp_path):
    _, ckpt = trained_like()
    save_checkpoint(tmp_path / "a.wssm", ckpt)
    save_checkpoint(tmp_path / "b.wssm", load_checkpoint(tmp_path / "a.wssm"))
    assert (tmp_path / "a.wssm").read_bytes() == (tmp_path / "b.wssm").read_bytes()


def test_round_trip_fields(tmp_path):
    m, ckpt = trained_like(3)
    save_checkpoint(tmp_path / "c.wssm", ckpt)
    back = load_checkpoint(tmp_path / "c.wssm", expected_config=CFG)
    assert back.config == CFG
    assert back.params.tobytes() == m.get_flat().astype(np.float32).tobytes()
    assert back.adam.step_count == 42
    assert back.history == [(1.5, 2.5), (1.25, 2.0)]
    restored = back.adam_state_for(back.to_model())
    flat = np.concatenate([a.reshape(-1) for a in restored.first_moment])
    np.testing.assert_array_equal(flat, ckpt.adam.first_moment[0])


def test_separation_after_reload_is_identical(tmp_path):
    m, ckpt = trained_like(5)
    save_checkpoint(tmp_path / "m.wssm", ckpt)
    mix = np.random.default_rng(0).uniform(-1, 1, 77)
    a = separate_track(m, mix).stacked()
    b = separate_track(load_checkpoint(tmp_path / "m.wssm").to_model(), mix).stacked()
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("where", [10, 100, -10])
def test_flipped_byte_detected(where):
    raw = bytearray(trained_like()[1].to_bytes())
    raw[where] ^= 0x01
    with pytest.raises(IntegrityError, match="offset"):
        Checkpoint.from_bytes(bytes(raw))


def test_truncated():
    raw = trained_like()[1].to_bytes()
    with pytest.raises(IntegrityError):
        Checkpoint.from_bytes(raw[:len(raw) // 2])


def test_bad_magic():
    with pytest.raises(IntegrityError, match="magic"):
        Checkpoint.from_bytes(b"NOPE" + bytes(60))


def test_version_mismatch():
    raw = bytearray(trained_like()[1].to_bytes())
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(IntegrityError, match="version"):
        Checkpoint.from_bytes(bytes(raw))


def test_mismatched_config():
    raw = trained_like()[1].to_bytes()
    other = ModelConfig(stacks=1, dilation_depth=2, filters=4, target_field=16, num_outputs=2,
                        post_filters=(4, 3))
    with pytest.raises(ConfigError):
        Checkpoint.from_bytes(raw, expected_config=other)


def test_without_optimizer_state():
    m = Model.init(CFG, seed=1)
    ckpt = Checkpoint.from_bytes(Checkpoint.capture(m).to_bytes())
    assert ckpt.adam.step_count == 0
    assert not np.any(ckpt.adam.first_moment[0])
