"""WAV codec and stem-directory datasets (16 kHz mono)."""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, FormatError, IntegrityError
from .fileio import atomic_write

log = logging.getLogger(__name__)

MULTI_INSTRUMENT_STEMS = ("vocals", "drums", "bass", "other")
SINGING_VOICE_STEMS = ("vocals", "accompaniment")
MIX_TOLERANCE = 1e-3

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


# ---------------------------------------------------------------------------
# WAV


def read_wav(path):
    """Read a PCM16 or float32 WAV file as a mono float64 waveform in [-1, 1].

    Stereo (or any multi-channel) input is averaged to mono. Returns
    ``(waveform, sample_rate)``.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise IntegrityError(f"{path}: file too short for a RIFF header", offset=len(raw))
    riff, _, wave = struct.unpack("<4sI4s", raw[:12])
    if riff != b"RIFF" or wave != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file (header {riff!r}/{wave!r})")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = struct.unpack("<4sI", raw[pos:pos + 8])
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + size > len(raw):
                raise IntegrityError(f"{path}: truncated 'fmt ' chunk", offset=pos)
            tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", raw[body:body + 16])
            if tag == _EXTENSIBLE:
                if size < 40:
                    raise IntegrityError(f"{path}: truncated extensible 'fmt ' chunk", offset=pos)
                tag = struct.unpack("<H", raw[body + 24:body + 26])[0]
            fmt = (tag, channels, rate, block_align, bits)
        elif cid == b"data":
            if body + size > len(raw):
                raise IntegrityError(
                    f"{path}: 'data' chunk declares {size} bytes, only {len(raw) - body} present",
                    offset=body)
            data = raw[body:body + size]
        pos = body + size + (size & 1)
        if data is not None and fmt is not None:
            break

    if fmt is None:
        raise FormatError(f"{path}: missing 'fmt ' chunk")
    if data is None:
        raise IntegrityError(f"{path}: missing 'data' chunk", offset=pos)
    tag, channels, rate, block_align, bits = fmt
    if channels < 1:
        raise FormatError(f"{path}: 'fmt ' chunk declares {channels} channels")
    if tag == _PCM and bits == 16:
        dtype = np.dtype("<i2")
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype = np.dtype("<f4")
    else:
        raise FormatError(f"{path}: unsupported 'fmt ' chunk encoding (format tag {tag}, {bits} bits); "
                          "only PCM 16-bit and float 32-bit are read")
    frame = channels * dtype.itemsize
    if len(data) % frame:
        raise IntegrityError(f"{path}: 'data' chunk length {len(data)} is not a multiple of "
                             f"the {frame}-byte frame size")
    samples = np.frombuffer(data, dtype=dtype).reshape(-1, channels).astype(np.float64)
    if tag == _PCM:
        samples /= 32768.0
    return samples.mean(axis=1), int(rate)


def encode_pcm16(waveform):
    x = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, waveform, sample_rate):
    """Write a mono PCM16 WAV (samples clamped to [-1, 1]) atomically."""
    waveform = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(waveform)):
        raise ValueError("write_wav: waveform contains non-finite samples")
    payload = encode_pcm16(waveform).tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
                         b"fmt ", 16, _PCM, 1, int(sample_rate), int(sample_rate) * 2, 2, 16,
                         b"data", len(payload))
    with atomic_write(path) as fh:
        fh.write(header)
        fh.write(payload)


# ---------------------------------------------------------------------------
# stem directories


@dataclass
class TrackStems:
    name: str
    sample_rate: int
    mixture: np.ndarray
    sources: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.mixture)
        for src, wav in self.sources.items():
            if len(wav) != n:
                raise DatasetError(f"track {self.name!r}: source {src!r} has {len(wav)} samples, "
                                   f"mixture has {n}")

    def __len__(self):
        return len(self.mixture)

    def mix_error(self):
        if not self.sources:
            return 0.0
        return float(np.max(np.abs(self.mixture - sum(self.sources.values())), initial=0.0))


def detect_layout(names):
    names = set(names)
    if set(MULTI_INSTRUMENT_STEMS) <= names:
        return MULTI_INSTRUMENT_STEMS
    if set(SINGING_VOICE_STEMS) <= names:
        return SINGING_VOICE_STEMS
    return None


def _sorted_bytewise(names):
    return sorted(names, key=lambda s: s.encode("utf-8"))


def load_track(track_dir, stems=None, sample_rate=16000):
    track_dir = Path(track_dir)
    name = track_dir.name
    present = {p.stem for p in track_dir.glob("*.wav")}
    if stems is None:
        stems = detect_layout(present)
        if stems is None:
            raise DatasetError(
                f"track {name!r}: expected stems {MULTI_INSTRUMENT_STEMS} or {SINGING_VOICE_STEMS}, "
                f"found {sorted(present)}")
    missing = [s for s in stems if s not in present]
    if missing:
        raise DatasetError(f"track {name!r}: missing stems {missing}")

    def _load(stem):
        wav, rate = read_wav(track_dir / f"{stem}.wav")
        if rate != sample_rate:
            raise DatasetError(f"track {name!r}: {stem}.wav is {rate} Hz; resample externally to "
                               f"{sample_rate / 1000:g} kHz before loading")
        return wav

    sources = {s: _load(s) for s in stems}
    lengths = {s: len(w) for s, w in sources.items()}
    if len(set(lengths.values())) > 1:
        raise DatasetError(f"track {name!r}: stems differ in length {lengths}")
    if "mixture" in present:
        mixture = _load("mixture")
        if len(mixture) != next(iter(lengths.values())):
            raise DatasetError(f"track {name!r}: mixture has {len(mixture)} samples, stems {lengths}")
        track = TrackStems(name, sample_rate, mixture, sources)
        err = track.mix_error()
        if err > MIX_TOLERANCE:
            log.warning("track %r: mixture differs from the stem sum by %.2e", name, err)
    else:
        track = TrackStems(name, sample_rate, synthesize_mixture(sources), sources)
    return track


def synthesize_mixture(sources, clamp=True):
    total = np.sum([np.asarray(w, dtype=np.float64) for w in sources.values()], axis=0)
    return np.clip(total, -1.0, 1.0) if clamp else total


def list_tracks(root):
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    return _sorted_bytewise(p.name for p in root.iterdir() if p.is_dir())


def load_stem_directory(root, stems=None, sample_rate=16000, names=None):
    """Load every track under ``root`` (or just ``names``) in byte-wise name order."""
    root = Path(root)
    available = list_tracks(root)
    if names is None:
        names = available
    else:
        unknown = [n for n in names if n not in available]
        if unknown:
            raise DatasetError(f"tracks not found under {root}: {unknown}")
        names = _sorted_bytewise(names)
    return [load_track(root / n, stems=stems, sample_rate=sample_rate) for n in names]


def load_manifest(root_or_file):
    """Read ``dataset.json`` with ``train`` / ``validation`` / ``test`` track lists."""
    path = Path(root_or_file)
    if path.is_dir():
        path = path / "dataset.json"
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"dataset manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"dataset manifest {path} is not valid JSON: {exc}") from None
    for split in ("train", "validation"):
        if not isinstance(manifest.get(split), list) or not manifest[split]:
            raise DatasetError(f"dataset manifest {path}: '{split}' must be a non-empty list")
    manifest.setdefault("test", [])
    overlap = set(manifest["train"]) & set(manifest["validation"])
    if overlap:
        raise DatasetError(f"train and validation splits overlap: {sorted(overlap)}")
    return manifest


def write_stem_directory(root, tracks, write_mixture=True):
    """Inverse of :func:`load_stem_directory`; mostly for fixtures and ``mix``."""
    root = Path(root)
    for track in tracks:
        d = root / track.name
        os.makedirs(d, exist_ok=True)
        for src, wav in track.sources.items():
            write_wav(d / f"{src}.wav", wav, track.sample_rate)
        if write_mixture:
            write_wav(d / "mixture.wav", track.mixture, track.sample_rate)
