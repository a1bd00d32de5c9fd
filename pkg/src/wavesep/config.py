"""``key = value`` run configuration files."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .bss_eval import DEFAULT_FILTER_LENGTH
from .errors import ConfigError
from .model import ModelConfig
from .training import LossConfig, SamplerConfig, TrainConfig


def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _pair(v):
    parts = [p for p in v.replace("(", "").replace(")", "").replace(",", " ").split()]
    if len(parts) != 2:
        raise ValueError(f"expected two integers, got {v!r}")
    return tuple(int(p) for p in parts)


def _str(v):
    return v


# key -> (parser, default, help)
KEYS = {
    "stacks": (_int, 4, "number of dilation stacks N"),
    "filters": (_int, 64, "channels k in every residual layer"),
    "dilation_depth": (_int, 10, "layers per stack (dilations 1 .. 2^(depth-1))"),
    "target_field": (_int, 1600, "output samples per forward pass"),
    "num_outputs": (_int, 3, "3 = vocals/drums/bass (+other), 1 = vocals (+accompaniment)"),
    "sample_rate": (_int, 16000, "Hz; audio must already be at this rate"),
    "post_filters": (_pair, (2048, 256), "channels of the two width-3 post convolutions"),
    "init_seed": (_int, 0, "seed for weight initialisation"),
    "lr": (_float, 0.001, "ADAM learning rate"),
    "batch_size": (_int, 10, "segments per update"),
    "patience_epochs": (_int, 16, "stop after this many epochs without validation improvement"),
    "steps_per_epoch": (_int, 1000, "updates per epoch"),
    "max_epochs": (_int, 1000, "hard limit on epochs"),
    "validation_segments": (_int, 100, "fixed validation segments"),
    "seed": (_int, 0, "training seed (batches, validation set)"),
    "alpha": (_float, 0.0, "dissimilarity loss weight"),
    "reduction": (_str, "sum", "loss reduction: sum | mean"),
    "p_voiced": (_float, 0.0, "fraction of draws forced onto voiced windows"),
    "voiced_rms_threshold": (_float, 1e-3, "vocal RMS above which a window counts as voiced"),
    "filter_length": (_int, DEFAULT_FILTER_LENGTH, "BSS Eval distortion filter taps"),
    "dataset": (_str, "", "stem directory root"),
    "manifest": (_str, "", "dataset.json path (default: <dataset>/dataset.json)"),
    "output_dir": (_str, "runs", "where training outputs go"),
}


def help_text():
    lines = ["configuration keys (key = value):"]
    for key, (_, default, text) in KEYS.items():
        if isinstance(default, tuple):
            default = ",".join(map(str, default))
        lines.append(f"  {key:<22} {text} [default: {default}]")
    return "\n".join(lines)


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self):
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in self.values.items() if k in names})

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.values.items() if k in names})

    def loss_config(self):
        return LossConfig(alpha=self["alpha"], reduction=self["reduction"])

    def sampler_config(self):
        return SamplerConfig(p_voiced=self["p_voiced"], voiced_rms_threshold=self["voiced_rms_threshold"],
                             rng_seed=self["seed"])

    def validate(self):
        self.model_config()
        self.train_config()
        self.loss_config()
        self.sampler_config()
        return self


def parse_lines(lines, source="<config>"):
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = KEYS[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return out


def load_run_config(path=None, overrides=()):
    """Defaults, then the file at ``path``, then ``KEY=VALUE`` overrides."""
    values = {k: default for k, (_, default, _) in KEYS.items()}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values.update(parse_lines(fh, str(path)))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
    values.update(parse_lines(overrides, "--set"))
    return RunConfig(values).validate()
