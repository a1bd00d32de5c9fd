"""Binary checkpoint format.

Layout (all little-endian)::

    b"WSSM"  u32 version=1
    u32 config-JSON length, config JSON (UTF-8, sorted keys)
    u64 parameter count P, P x f32 parameters in declared kernel order
    u64 ADAM step count, 4 x f64 (lr, beta1, beta2, epsilon),
        P x f32 first moments, P x f32 second moments
    u32 history length H, H x (f64 train loss, f64 validation loss)
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, IntegrityError
from .fileio import atomic_write
from .model import Model, ModelConfig, parameter_count

MAGIC = b"WSSM"
VERSION = 1


def _split(flat, shapes):
    out, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(flat[pos:pos + n].reshape(shape).copy())
        pos += n
    return out


@dataclass
class Checkpoint:
    config: ModelConfig
    params: np.ndarray  # flat float32
    adam: nn.AdamState  # moments kept flat
    history: list = field(default_factory=list)

    @classmethod
    def capture(cls, model: Model, state: nn.AdamState = None, history=()):
        flat = model.get_flat().astype(np.float32)
        if state is None:
            state = nn.AdamState([np.zeros_like(flat)], [np.zeros_like(flat)])
        else:
            state = nn.AdamState(
                [np.concatenate([m.reshape(-1) for m in state.first_moment]).astype(np.float32)],
                [np.concatenate([v.reshape(-1) for v in state.second_moment]).astype(np.float32)],
                state.step_count, state.lr, state.beta1, state.beta2, state.epsilon)
        return cls(model.config, flat, state, [(float(a), float(b)) for a, b in history])

    def to_model(self):
        model = Model.init(self.config, seed=0, dtype=np.float32)
        model.set_flat(self.params)
        return model

    def adam_state_for(self, model: Model):
        """ADAM state with moments reshaped to the model's parameter shapes."""
        shapes = [p.shape for p in model.parameters()]
        a = self.adam
        return nn.AdamState(_split(a.first_moment[0], shapes), _split(a.second_moment[0], shapes),
                            a.step_count, a.lr, a.beta1, a.beta2, a.epsilon)

    def to_bytes(self):
        cfg = self.config.to_json().encode("utf-8")
        p = np.ascontiguousarray(self.params, dtype="<f4")
        a = self.adam
        parts = [
            MAGIC, struct.pack("<I", VERSION),
            struct.pack("<I", len(cfg)), cfg,
            struct.pack("<Q", p.size), p.tobytes(),
            struct.pack("<Q4d", a.step_count, a.lr, a.beta1, a.beta2, a.epsilon),
            np.ascontiguousarray(a.first_moment[0], dtype="<f4").tobytes(),
            np.ascontiguousarray(a.second_moment[0], dtype="<f4").tobytes(),
            struct.pack("<I", len(self.history)),
            np.asarray(self.history, dtype="<f8").reshape(-1).tobytes(),
        ]
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, raw, expected_config: ModelConfig = None):
        reader = _Reader(raw)
        if reader.take(4) != MAGIC:
            raise IntegrityError("not a checkpoint (bad magic)", offset=0)
        (version,) = reader.unpack("<I")
        if version != VERSION:
            raise IntegrityError(f"unsupported checkpoint version {version} (expected {VERSION})", offset=4)
        if len(raw) < 4 or zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
            raise IntegrityError("checksum mismatch; file is corrupt or truncated", offset=len(raw) - 4)
        (cfg_len,) = reader.unpack("<I")
        cfg_off = reader.pos
        try:
            config = ModelConfig.from_dict(json.loads(reader.take(cfg_len).decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise IntegrityError(f"unreadable model config: {exc}", offset=cfg_off) from None
        if expected_config is not None and config != expected_config:
            raise ConfigError(f"checkpoint config {config} does not match expected {expected_config}")
        (count,) = reader.unpack("<Q")
        if count != parameter_count(config):
            raise IntegrityError(f"parameter blob holds {count} values, config needs "
                                 f"{parameter_count(config)}", offset=reader.pos - 8)
        params = reader.array("<f4", count)
        step, lr, b1, b2, eps = reader.unpack("<Q4d")
        m = reader.array("<f4", count)
        v = reader.array("<f4", count)
        (h_len,) = reader.unpack("<I")
        hist = reader.array("<f8", 2 * h_len).reshape(-1, 2)
        if reader.pos != len(raw) - 4:
            raise IntegrityError(f"{len(raw) - 4 - reader.pos} trailing bytes", offset=reader.pos)
        adam = nn.AdamState([m], [v], int(step), lr, b1, b2, eps)
        return cls(config, params, adam, [tuple(map(float, row)) for row in hist])


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise IntegrityError(f"truncated checkpoint: wanted {n} bytes", offset=self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, n):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * n), dtype=dt).astype(dt.newbyteorder("="))


def save_checkpoint(path, checkpoint: Checkpoint):
    with atomic_write(path) as fh:
        fh.write(checkpoint.to_bytes())


def load_checkpoint(path, expected_config: ModelConfig = None):
    with open(path, "rb") as fh:
        raw = fh.read()
    return Checkpoint.from_bytes(raw, expected_config)
