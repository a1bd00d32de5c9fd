"""Losses, voiced-fragment sampling and the early-stopping training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .checkpoint import Checkpoint
from .dataset import TrackStems
from .errors import ConfigError, DatasetError, DivergedTrainingError
from .model import Model, ModelConfig

log = logging.getLogger(__name__)

_VALIDATION_STREAM = 0x5EED_0A11


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.0
    reduction: str = "sum"

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


@dataclass(frozen=True)
class SamplerConfig:
    p_voiced: float = 0.0
    voiced_rms_threshold: float = 1e-3
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_voiced <= 1.0:
            raise ConfigError(f"p_voiced must lie in [0, 1], got {self.p_voiced}")
        if not self.voiced_rms_threshold > 0:
            raise ConfigError(f"voiced_rms_threshold must be > 0, got {self.voiced_rms_threshold}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 10
    patience_epochs: int = 16
    steps_per_epoch: int = 1000
    max_epochs: int = 1000
    validation_segments: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ("batch_size", "patience_epochs", "steps_per_epoch", "max_epochs", "validation_segments"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


# ---------------------------------------------------------------------------
# losses


def _reduce(summed, n_elements, n_batch, reduction):
    if reduction == "sum":
        return summed if n_batch == 1 else nn.scale(summed, 1.0 / n_batch)
    return nn.scale(summed, 1.0 / n_elements)


def _check_shapes(estimates, references):
    if estimates.shape != references.shape:
        raise ConfigError(f"estimates {estimates.shape} and references {references.shape} differ in shape")


def loss_mae(estimates, references, reduction="sum"):
    """Absolute error summed over sources and samples.

    Arrays are ``(sources, time)`` or ``(batch, sources, time)``. With
    ``reduction="sum"`` a batch is averaged over its segments; ``"mean"``
    averages over every element.
    """
    est = estimates if isinstance(estimates, nn.Tensor) else nn.Tensor(estimates)
    ref = np.asarray(references, dtype=est.dtype)
    _check_shapes(est, ref)
    n_batch = est.shape[0] if est.data.ndim == 3 else 1
    summed = nn.total(nn.absolute(nn.sub(est, ref)))
    return _reduce(summed, est.data.size, n_batch, reduction)


def loss_dissimilarity(estimates, references, reduction="sum"):
    """Sum over sources j and every other source i of |est_j - ref_i|."""
    est = estimates if isinstance(estimates, nn.Tensor) else nn.Tensor(estimates)
    ref = np.asarray(references, dtype=est.dtype)
    _check_shapes(est, ref)
    n_src = est.shape[-2]
    n_batch = est.shape[0] if est.data.ndim == 3 else 1
    summed = None
    for shift in range(1, n_src):
        # rolling the reference channels pairs every j with a distinct i != j
        term = nn.total(nn.absolute(nn.sub(est, np.roll(ref, shift, axis=-2))))
        summed = term if summed is None else summed + term
    if summed is None:
        summed = nn.Tensor(np.zeros((), dtype=est.dtype))
    return _reduce(summed, est.data.size, n_batch, reduction)


def loss_total(estimates, references, cfg: LossConfig = LossConfig()):
    """MAE minus ``alpha`` times the dissimilarity term."""
    mae = loss_mae(estimates, references, cfg.reduction)
    if cfg.alpha == 0:
        return mae
    est = estimates if isinstance(estimates, nn.Tensor) else nn.Tensor(estimates)
    if est.shape[-2] < 2:
        raise ConfigError("dissimilarity term needs at least two sources (set alpha = 0)")
    return mae - nn.scale(loss_dissimilarity(est, references, cfg.reduction), cfg.alpha)


# ---------------------------------------------------------------------------
# sampling


def window_rms(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x))) if len(x) else 0.0


def voiced_regions(vocal_stem, threshold, window):
    """``(start, end)`` of every window-aligned block whose RMS exceeds ``threshold``."""
    if not threshold > 0:
        raise ConfigError(f"voiced RMS threshold must be > 0, got {threshold}")
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    x = np.asarray(vocal_stem, dtype=np.float64)
    n_win = len(x) // window
    if n_win == 0:
        return []
    blocks = x[:n_win * window].reshape(n_win, window)
    rms = np.sqrt(np.mean(blocks * blocks, axis=1))
    return [(int(i * window), int((i + 1) * window)) for i in np.flatnonzero(rms > threshold)]


class SegmentSampler:
    """Draws (input segment, target references) pairs from tracks.

    A fraction ``p_voiced`` of draws is forced onto windows where the vocal
    stem is active; the rest are uniform over all valid offsets.
    """

    def __init__(self, model_config: ModelConfig, config: SamplerConfig = SamplerConfig(),
                 vocal_source="vocals"):
        self.model_config = model_config
        self.config = config
        self.vocal_source = vocal_source
        self.fallback_count = 0
        self._regions = {}

    def regions(self, track: TrackStems):
        key = id(track)
        if key not in self._regions:
            vocal = track.sources.get(self.vocal_source)
            self._regions[key] = [] if vocal is None else voiced_regions(
                vocal, self.config.voiced_rms_threshold, self.model_config.target_field)
        return self._regions[key]

    def draw_offset(self, track: TrackStems, rng):
        """Return ``(offset, forced)``: start of the target window in the track."""
        tf = self.model_config.target_field
        n = len(track)
        if n < tf:
            raise DatasetError(f"track {track.name!r} has {n} samples, shorter than the "
                               f"{tf}-sample target field")
        forced = self.config.p_voiced > 0 and rng.random() < self.config.p_voiced
        if forced:
            regions = self.regions(track)
            if regions:
                return regions[int(rng.integers(len(regions)))][0], True
            self.fallback_count += 1
            log.warning("track %r has no voiced region; sampling uniformly", track.name)
        return int(rng.integers(0, n - tf + 1)), False

    def extract(self, track: TrackStems, offset):
        cfg = self.model_config
        tf = cfg.target_field
        half = (cfg.receptive_field - 1) // 2
        segment = np.zeros(cfg.input_field, dtype=np.float64)
        lo, hi = offset - half, offset + tf + half
        src_lo, src_hi = max(lo, 0), min(hi, len(track))
        segment[src_lo - lo:src_hi - lo] = track.mixture[src_lo:src_hi]
        try:
            targets = np.stack([track.sources[s][offset:offset + tf] for s in cfg.estimated_sources])
        except KeyError as exc:
            raise DatasetError(f"track {track.name!r} lacks source {exc.args[0]!r}") from None
        return segment, targets

    def sample(self, track: TrackStems, rng):
        offset, _ = self.draw_offset(track, rng)
        return self.extract(track, offset)


def sample_segment(track, model_config, sampler: SamplerConfig, rng):
    """One training pair: mixture of ``input_field`` samples, targets of ``target_field``."""
    return SegmentSampler(model_config, sampler).sample(track, rng)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best: Checkpoint
    history: list
    best_epoch: int
    step_losses: list = field(default_factory=list)
    step_mae: list = field(default_factory=list)
    stopped_early: bool = False

    def model(self):
        return self.best.to_model()


def _draw_batch(tracks, sampler, seed, epoch, step, batch_size):
    xs, ys = [], []
    for b in range(batch_size):
        rng = np.random.default_rng([seed, epoch, step, b])
        track = tracks[int(rng.integers(len(tracks)))]
        x, y = sampler.sample(track, rng)
        xs.append(x)
        ys.append(y)
    return np.stack(xs)[:, None, :], np.stack(ys)


def validation_set(tracks, sampler, seed, count):
    rng = np.random.default_rng([seed, _VALIDATION_STREAM])
    xs, ys = [], []
    for _ in range(count):
        track = tracks[int(rng.integers(len(tracks)))]
        x, y = sampler.sample(track, rng)
        xs.append(x)
        ys.append(y)
    return np.stack(xs)[:, None, :], np.stack(ys)


def evaluate_loss(model: Model, inputs, targets, batch_size=10):
    """Plain MAE (sum per segment, averaged over segments)."""
    total = 0.0
    for start in range(0, len(inputs), batch_size):
        x = inputs[start:start + batch_size].astype(model.dtype)
        y = model.forward_array(x)
        total += float(np.abs(y.astype(np.float64) - targets[start:start + batch_size]).sum())
    return total / len(inputs)


def train(model: Model, train_tracks, val_tracks, train_cfg: TrainConfig = TrainConfig(),
          loss_cfg: LossConfig = LossConfig(), sampler_cfg: SamplerConfig = SamplerConfig(),
          on_epoch=None):
    """Train in place with ADAM and early stopping; returns the best-validation checkpoint."""
    if not train_tracks or not val_tracks:
        raise DatasetError("training needs at least one train and one validation track")
    names_train = {t.name for t in train_tracks}
    overlap = names_train & {t.name for t in val_tracks}
    if overlap:
        raise DatasetError(f"train and validation tracks overlap: {sorted(overlap)}")
    if loss_cfg.alpha > 0 and model.config.num_outputs < 2:
        raise ConfigError("alpha > 0 needs a model with at least two outputs")

    seed = train_cfg.seed
    sampler = SegmentSampler(model.config, sampler_cfg)
    val_sampler = SegmentSampler(model.config, sampler_cfg)
    val_x, val_y = validation_set(val_tracks, val_sampler, seed, train_cfg.validation_segments)

    params = model.parameters()
    state = nn.AdamState.zeros_like([p.data for p in params], lr=train_cfg.lr)
    history = []
    step_losses, step_mae = [], []
    best = None
    best_val = np.inf
    best_epoch = -1
    stopped_early = False

    for epoch in range(train_cfg.max_epochs):
        epoch_losses = []
        for step in range(train_cfg.steps_per_epoch):
            x, y = _draw_batch(train_tracks, sampler, seed, epoch, step, train_cfg.batch_size)
            for p in params:
                p.grad = None
            est = model.forward_tensor(nn.Tensor(x.astype(model.dtype)))
            loss = loss_total(est, y, loss_cfg)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergedTrainingError(f"non-finite training loss at epoch {epoch}, step {step}",
                                            last_good=best)
            loss.backward()
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
            try:
                new_values, state = nn.adam_step([p.data for p in params], grads, state)
            except DivergedTrainingError as exc:
                raise DivergedTrainingError(str(exc), last_good=best) from None
            for p, v in zip(params, new_values):
                p.data = v
                p.grad = None
            step_losses.append(value)
            if loss_cfg.alpha == 0 and loss_cfg.reduction == "sum":
                step_mae.append(value)
            else:
                step_mae.append(float(np.abs(est.data.astype(np.float64) - y).sum()) / len(x))
            epoch_losses.append(value)

        val_loss = evaluate_loss(model, val_x, val_y, train_cfg.batch_size)
        if not np.isfinite(val_loss):
            raise DivergedTrainingError(f"non-finite validation loss at epoch {epoch}", last_good=best)
        history.append((float(np.mean(epoch_losses)), val_loss))
        log.info("epoch %d: train %.6g  val %.6g", epoch, history[-1][0], val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best = Checkpoint.capture(model, state, history)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
        if epoch - best_epoch >= train_cfg.patience_epochs:
            stopped_early = True
            break

    best = Checkpoint(best.config, best.params, best.adam, list(history))
    return TrainResult(best, history, best_epoch, step_losses, step_mae, stopped_early)
