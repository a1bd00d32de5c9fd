"""BSS Eval source-separation metrics (whole-signal SDR / SIR / SAR).

An estimate is split into a target part, an interference part and an
artifact part by least-squares projection onto the span of delayed copies
(0 .. L-1 samples) of the references. Following the usual toolbox
convention, signals are zero-padded by ``L - 1`` samples so every delayed
copy fits; the decomposition therefore has ``len(estimate) + L - 1``
samples.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateReferenceError, ReportError
from .fileio import atomic_write

DB_CLAMP = 100.0
GRAM_REGULARIZATION = 1e-10
DEFAULT_FILTER_LENGTH = 512
METRICS = ("sdr", "sir", "sar")


@dataclass
class Decomposition:
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray

    @property
    def estimate(self):
        return self.s_target + self.e_interf + self.e_artif


@dataclass(frozen=True)
class Metrics:
    sdr: float
    sir: float
    sar: float

    def as_dict(self):
        return {"sdr": self.sdr, "sir": self.sir, "sar": self.sar}


def _next_pow2(n):
    return 1 << (int(n) - 1).bit_length()


def _xcorr(a_f, b_f, nfft, max_lag):
    """c(m) = sum_t a[t] b[t+m] for m in [-(max_lag-1), max_lag-1], returned as (neg, pos)."""
    c = np.fft.irfft(np.conj(a_f) * b_f, nfft)
    pos = c[:max_lag]                                 # m = 0 .. L-1
    neg = np.concatenate(([c[0]], c[:-max_lag:-1]))   # m = 0, -1, .., -(L-1)
    return neg, pos


class _Projector:
    """Least-squares projection onto delayed copies of a set of references."""

    def __init__(self, references, filter_length):
        from scipy.linalg import toeplitz  # scipy is deferred to keep CLI start-up fast

        refs = np.atleast_2d(np.asarray(references, dtype=np.float64))
        self.refs = refs
        self.L = L = int(filter_length)
        n_src, n = refs.shape
        self.n = n
        self.nfft = _next_pow2(n + L - 1)
        self.ref_f = np.fft.rfft(refs, self.nfft, axis=1)
        energy = np.sum(refs * refs, axis=1)
        if np.any(energy == 0):
            raise DegenerateReferenceError(
                f"reference(s) {np.flatnonzero(energy == 0).tolist()} are silent; "
                "the projection subspace is degenerate")
        gram = np.empty((n_src * L, n_src * L))
        for i in range(n_src):
            for j in range(i, n_src):
                # block[a, b] = <r_i delayed a, r_j delayed b> = c_ij(a - b)
                neg, pos = _xcorr(self.ref_f[i], self.ref_f[j], self.nfft, L)
                block = toeplitz(pos, neg)
                gram[i * L:(i + 1) * L, j * L:(j + 1) * L] = block
                gram[j * L:(j + 1) * L, i * L:(i + 1) * L] = block.T
        self.gram = gram
        self._factors = {}

    def _factor(self, index):
        from scipy.linalg import cho_factor

        key = "all" if index is None else index
        if key not in self._factors:
            L = self.L
            g = self.gram if index is None else self.gram[index * L:(index + 1) * L, index * L:(index + 1) * L]
            g = g + GRAM_REGULARIZATION * np.eye(len(g))
            try:
                self._factors[key] = cho_factor(g, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise DegenerateReferenceError(
                    f"reference Gram matrix is singular beyond regularization: {exc}") from None
        return self._factors[key]

    def project(self, estimate, index=None):
        """Projection of ``estimate`` onto delayed copies of reference ``index`` (or all)."""
        from scipy.linalg import cho_solve

        L = self.L
        est_f = np.fft.rfft(estimate, self.nfft)
        sources = range(len(self.refs)) if index is None else [index]
        rhs = np.concatenate([_xcorr(self.ref_f[i], est_f, self.nfft, L)[1] for i in sources])
        coef = cho_solve(self._factor(index), rhs, check_finite=False)
        # nfft >= n + L - 1, so the circular product is the linear convolution
        out_f = np.zeros_like(est_f)
        for k, i in enumerate(sources):
            out_f += np.fft.rfft(coef[k * L:(k + 1) * L], self.nfft) * self.ref_f[i]
        return np.fft.irfft(out_f, self.nfft)[:self.n + L - 1]


def _check_inputs(estimate, references):
    estimate = np.asarray(estimate, dtype=np.float64)
    references = np.atleast_2d(np.asarray(references, dtype=np.float64))
    if estimate.ndim != 1 or references.shape[1] != len(estimate):
        raise ValueError(f"estimate {estimate.shape} and references {references.shape} differ in length")
    return estimate, references


def decompose(estimate, references, target_index, filter_length=DEFAULT_FILTER_LENGTH, _projector=None):
    """Split ``estimate`` into target, interference and artifact parts."""
    estimate, references = _check_inputs(estimate, references)
    if filter_length < 1:
        raise ValueError(f"filter_length must be >= 1, got {filter_length}")
    if not 0 <= target_index < len(references):
        raise IndexError(f"target_index {target_index} out of range for {len(references)} references")
    proj = _projector or _Projector(references, filter_length)
    padded = np.concatenate([estimate, np.zeros(filter_length - 1)])
    s_target = proj.project(estimate, target_index)
    p_all = proj.project(estimate)
    return Decomposition(s_target, p_all - s_target, padded - p_all)


def _ratio_db(num, den, tiny):
    if num <= tiny:
        return -DB_CLAMP
    if den <= tiny:
        return DB_CLAMP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CLAMP, DB_CLAMP))


def sdr_sir_sar(d: Decomposition):
    """Energy ratios in dB, clamped to +-100 dB."""
    def energy(x):
        return float(np.dot(x, x))

    # energies 200 dB below the estimate count as exactly zero
    tiny = 1e-20 * energy(d.estimate)
    target = energy(d.s_target)
    return Metrics(
        sdr=_ratio_db(target, energy(d.e_interf + d.e_artif), tiny),
        sir=_ratio_db(target, energy(d.e_interf), tiny),
        sar=_ratio_db(energy(d.s_target + d.e_interf), energy(d.e_artif), tiny),
    )


def bss_eval(estimates, references, filter_length=DEFAULT_FILTER_LENGTH):
    """Metrics for every estimate ``i`` against reference ``i`` (same order)."""
    estimates = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    references = np.atleast_2d(np.asarray(references, dtype=np.float64))
    if estimates.shape[1] != references.shape[1]:
        raise ValueError("estimates and references differ in length")
    proj = _Projector(references, filter_length)
    return [sdr_sir_sar(decompose(est, references, i, filter_length, _projector=proj))
            for i, est in enumerate(estimates)]


# ---------------------------------------------------------------------------
# dataset reports


@dataclass
class EvalReport:
    name: str
    filter_length: int
    tracks: dict = field(default_factory=dict)   # track -> source -> Metrics
    medians: dict = field(default_factory=dict)  # source -> Metrics

    @property
    def sources(self):
        return list(self.medians)

    def to_dict(self):
        return {
            "name": self.name,
            "filter_length": self.filter_length,
            "tracks": {t: {s: m.as_dict() for s, m in srcs.items()} for t, srcs in self.tracks.items()},
            "medians": {s: m.as_dict() for s, m in self.medians.items()},
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                d["name"], int(d["filter_length"]),
                {t: {s: Metrics(**m) for s, m in srcs.items()} for t, srcs in d["tracks"].items()},
                {s: Metrics(**m) for s, m in d["medians"].items()},
            )
        except (KeyError, TypeError) as exc:
            raise ReportError(f"malformed evaluation report: {exc}") from None

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def save(self, json_path, csv_path=None):
        with atomic_write(json_path, "w") as fh:
            fh.write(self.to_json())
        if csv_path is not None:
            with atomic_write(csv_path, "w") as fh:
                fh.write(reports_to_csv([self]))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ReportError(f"{path}: not valid JSON: {exc}") from None


def median_metrics(per_track, source):
    values = {m: [getattr(per_track[t][source], m) for t in per_track] for m in METRICS}
    return Metrics(**{m: float(np.median(v)) for m, v in values.items()})


def evaluate_dataset(estimates, references, filter_length=DEFAULT_FILTER_LENGTH, name="model"):
    """Per-track metrics and per-source medians.

    ``estimates`` and ``references`` map track name -> {source: waveform}.
    Every reference track must have an estimate for each of its sources.
    """
    if not references:
        raise ReportError("no reference tracks to evaluate")
    tracks = {}
    for track in sorted(references, key=lambda s: s.encode("utf-8")):
        refs = references[track]
        if track not in estimates:
            raise ReportError(f"missing estimates for track {track!r}")
        est = estimates[track]
        sources = list(refs)
        missing = [s for s in sources if s not in est]
        if missing:
            raise ReportError(f"track {track!r}: missing estimates for sources {missing}")
        ref_mat = np.stack([np.asarray(refs[s], dtype=np.float64) for s in sources])
        est_mat = np.stack([np.asarray(est[s], dtype=np.float64) for s in sources])
        if est_mat.shape != ref_mat.shape:
            raise ReportError(f"track {track!r}: estimate length {est_mat.shape[1]} != "
                              f"reference length {ref_mat.shape[1]}")
        tracks[track] = dict(zip(sources, bss_eval(est_mat, ref_mat, filter_length)))
    sources = list(next(iter(tracks.values())))
    medians = {s: median_metrics(tracks, s) for s in sources}
    return EvalReport(name, int(filter_length), tracks, medians)


def reports_to_csv(reports):
    """One row per report; columns are source x {SDR, SIR, SAR} medians."""
    sources = []
    for r in reports:
        for s in r.sources:
            if s not in sources:
                sources.append(s)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model"] + [f"{s}_{m.upper()}" for s in sources for m in METRICS])
    for r in reports:
        row = [r.name]
        for s in sources:
            m = r.medians.get(s)
            row.extend(["" if m is None else f"{getattr(m, k):.4f}" for k in METRICS])
        writer.writerow(row)
    return buf.getvalue()
