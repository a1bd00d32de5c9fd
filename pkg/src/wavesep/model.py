"""Non-causal Wavenet for waveform-domain source separation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError

MULTI_INSTRUMENT_SOURCES = ("vocals", "drums", "bass")
SINGING_VOICE_SOURCES = ("vocals",)


@dataclass(frozen=True)
class ModelConfig:
    stacks: int = 4
    filters: int = 64
    dilation_depth: int = 10
    target_field: int = 1600
    num_outputs: int = 3
    sample_rate: int = 16000
    post_filters: tuple = (2048, 256)

    def __post_init__(self):
        object.__setattr__(self, "post_filters", tuple(int(p) for p in self.post_filters))
        for name in ("stacks", "filters", "dilation_depth", "target_field", "num_outputs", "sample_rate"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if len(self.post_filters) != 2 or min(self.post_filters) < 1:
            raise ConfigError(f"post_filters must be two positive integers, got {self.post_filters}")

    @property
    def dilations(self):
        return [2 ** (i % self.dilation_depth) for i in range(self.stacks * self.dilation_depth)]

    @property
    def receptive_field(self):
        return receptive_field(self)

    @property
    def input_field(self):
        return self.target_field + self.receptive_field - 1

    @property
    def estimated_sources(self):
        """Names of the sources the network regresses directly."""
        if self.num_outputs == 3:
            return MULTI_INSTRUMENT_SOURCES
        if self.num_outputs == 1:
            return SINGING_VOICE_SOURCES
        return tuple(f"source{i}" for i in range(self.num_outputs))

    @property
    def residual_source(self):
        """Name of the source obtained by subtraction from the mixture."""
        if self.num_outputs == 1:
            return "accompaniment"
        return "other"

    @property
    def all_sources(self):
        return self.estimated_sources + (self.residual_source,)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["post_filters"] = list(self.post_filters)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def receptive_field(config: ModelConfig):
    """Number of input samples that influence one output sample.

    Input projection (width 3) + every dilated width-3 layer + two width-3
    post convolutions; the final 1x1 adds nothing.
    """
    return 1 + 2 + 2 * sum(config.dilations) + 2 * 2


def receptive_field_ms(config: ModelConfig):
    return 1000.0 * receptive_field(config) / config.sample_rate


def kernel_shapes(config: ModelConfig):
    """``(name, out, in, width, dilation)`` for every kernel, in checkpoint order."""
    k = config.filters
    p1, p2 = config.post_filters
    shapes = [("input_proj", k, 1, 3, 1)]
    for i, d in enumerate(config.dilations):
        shapes.append((f"layer{i}.dilated", 2 * k, k, 3, d))
        shapes.append((f"layer{i}.residual", k, k, 1, 1))
        shapes.append((f"layer{i}.skip", k, k, 1, 1))
    shapes.append(("post1", p1, k, 3, 1))
    shapes.append(("post2", p2, p1, 3, 1))
    shapes.append(("output_proj", config.num_outputs, p2, 1, 1))
    return shapes


def parameter_count(config: ModelConfig):
    return sum(o * i * w + o for _, o, i, w, _ in kernel_shapes(config))


@dataclass
class SourceEstimates:
    """Named single-channel waveforms of equal length."""

    sources: dict

    def __post_init__(self):
        lengths = {len(v) for v in self.sources.values()}
        if len(lengths) > 1:
            raise ConfigError(f"source estimates differ in length: {sorted(lengths)}")

    def __getitem__(self, name):
        return self.sources[name]

    def __iter__(self):
        return iter(self.sources)

    def __len__(self):
        return len(self.sources)

    def names(self):
        return list(self.sources)

    def stacked(self):
        return np.stack([self.sources[n] for n in self.sources])


class Model:
    """Kernels of the separation network, keyed by name in declared order."""

    def __init__(self, config: ModelConfig, kernels: dict):
        self.config = config
        self.kernels = kernels
        expected = kernel_shapes(config)
        if list(kernels) != [s[0] for s in expected]:
            raise ConfigError("kernel names do not match the configuration")
        for name, o, i, w, d in expected:
            kp = kernels[name]
            if kp.weight.shape != (o, i, w) or kp.dilation != d:
                raise ConfigError(f"kernel {name}: got {kp.weight.shape}/d={kp.dilation}, "
                                  f"expected {(o, i, w)}/d={d}")

    @classmethod
    def init(cls, config: ModelConfig, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        kernels = {}
        for name, o, i, w, d in kernel_shapes(config):
            kernels[name] = nn.init_conv(rng, i, o, w, d, dtype=dtype)
        return cls(config, kernels)

    @property
    def dtype(self):
        return self.kernels["input_proj"].weight.dtype

    def parameters(self):
        """Parameter tensors in checkpoint order (weight then bias per kernel)."""
        out = []
        for kp in self.kernels.values():
            out.append(kp.weight)
            out.append(kp.bias)
        return out

    def num_params(self):
        return sum(p.data.size for p in self.parameters())

    def get_flat(self):
        return np.concatenate([p.data.reshape(-1) for p in self.parameters()])

    def set_flat(self, flat):
        flat = np.asarray(flat)
        if flat.size != self.num_params():
            raise ConfigError(f"expected {self.num_params()} parameters, got {flat.size}")
        pos = 0
        for p in self.parameters():
            n = p.data.size
            p.data = flat[pos:pos + n].reshape(p.shape).astype(p.dtype, copy=True)
            pos += n

    def astype(self, dtype):
        kernels = {
            name: nn.ConvParams(nn.parameter(kp.weight.data.astype(dtype)),
                                nn.parameter(kp.bias.data.astype(dtype)), kp.dilation)
            for name, kp in self.kernels.items()
        }
        return Model(self.config, kernels)

    def copy(self):
        return self.astype(self.dtype)

    # ------------------------------------------------------------------

    def forward_tensor(self, x):
        """Differentiable pass on ``(..., 1, input_field)`` returning ``(..., num_outputs, target_field)``."""
        cfg = self.config
        x = x if isinstance(x, nn.Tensor) else nn.Tensor(x)
        if x.shape[-1] != cfg.input_field or x.shape[-2] != 1:
            raise ConfigError(f"forward expects (1, {cfg.input_field}) segments, got {x.shape[-2:]}")
        k = self.kernels
        h = nn.conv1d(x, k["input_proj"])
        skip_len = cfg.target_field + 4
        skips = None
        n_layers = len(cfg.dilations)
        for i in range(n_layers):
            z = nn.conv1d(h, k[f"layer{i}.dilated"])
            g = nn.gated_unit(z)
            s = nn.crop(nn.conv1d(g, k[f"layer{i}.skip"]), skip_len)
            skips = s if skips is None else skips + s
            if i < n_layers - 1:
                # the last residual branch feeds nothing
                h = nn.conv1d(g, k[f"layer{i}.residual"]) + nn.crop(h, g.shape[-1])
        y = nn.relu(skips)
        y = nn.relu(nn.conv1d(y, k["post1"]))
        y = nn.conv1d(y, k["post2"])
        return nn.conv1d(y, k["output_proj"])

    def forward_array(self, segments):
        x = np.asarray(segments, dtype=self.dtype)
        return self.forward_tensor(nn.Tensor(x)).data

    def forward(self, segment):
        """Estimate every directly regressed source for one input-field segment."""
        segment = np.asarray(segment, dtype=self.dtype)
        if segment.ndim != 1 or len(segment) != self.config.input_field:
            raise ConfigError(
                f"segment must be 1-D with {self.config.input_field} samples, got {segment.shape}")
        if not np.all(np.isfinite(segment)):
            raise ConfigError("segment contains non-finite samples")
        y = self.forward_array(segment[None, :])
        return SourceEstimates(dict(zip(self.config.estimated_sources, y)))


def tile_mixture(mixture, config: ModelConfig):
    """Zero-pad and cut a mixture into ``(n_tiles, 1, input_field)`` windows."""
    n = len(mixture)
    half = (config.receptive_field - 1) // 2
    tf = config.target_field
    n_tiles = -(-n // tf)
    padded = np.zeros(n_tiles * tf + 2 * half, dtype=np.float64)
    padded[half:half + n] = mixture
    idx = np.arange(n_tiles)[:, None] * tf + np.arange(config.input_field)[None, :]
    return padded[idx][:, None, :]


def separate_track(model: Model, mixture, sample_rate=None, batch_tiles=16):
    """Run the model over a full track with non-overlapping target-field tiles."""
    cfg = model.config
    if sample_rate is not None and sample_rate != cfg.sample_rate:
        raise ConfigError(f"sample rate {sample_rate} Hz does not match model ({cfg.sample_rate} Hz)")
    mixture = np.asarray(mixture, dtype=np.float64)
    if mixture.ndim != 1 or len(mixture) < 1:
        raise ConfigError("mixture must be a non-empty 1-D waveform")
    n = len(mixture)
    tiles = tile_mixture(mixture, cfg).astype(model.dtype)
    outs = []
    for start in range(0, len(tiles), batch_tiles):
        outs.append(model.forward_array(tiles[start:start + batch_tiles]))
    y = np.concatenate(outs, axis=0)  # (tiles, outputs, target_field)
    y = y.transpose(1, 0, 2).reshape(cfg.num_outputs, -1)[:, :n]
    return SourceEstimates({name: y[i].copy() for i, name in enumerate(cfg.estimated_sources)})


def complete_sources(mixture, estimates: SourceEstimates, residual_name=None):
    """Append mixture minus the sum of estimates as the remaining source."""
    mixture = np.asarray(mixture)
    names = estimates.names()
    for name in names:
        if len(estimates[name]) != len(mixture):
            raise ConfigError(f"estimate {name!r} has {len(estimates[name])} samples, "
                              f"mixture has {len(mixture)}")
    if residual_name is None:
        residual_name = "accompaniment" if len(names) == 1 else "other"
    dtype = np.result_type(mixture.dtype, *(estimates[n].dtype for n in names))
    residual = mixture.astype(dtype, copy=True)
    for name in names:
        residual = residual - estimates[name]
    out = dict(estimates.sources)
    out[residual_name] = residual
    return SourceEstimates(out)
