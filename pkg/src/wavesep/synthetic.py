"""Synthetic singing-voice tracks for smoke tests and demos."""

import numpy as np
from scipy.signal import butter, sosfilt

from .dataset import TrackStems


def gated_tone(n, sample_rate=16000, freq=440.0, amplitude=0.5, period=1.0, duty=0.5, ramp=0.01):
    """Sine that switches on for ``duty * period`` seconds of every period.

    The gate edges are raised-cosine ramps of ``ramp`` seconds.
    """
    t = np.arange(n) / sample_rate
    phase = (t % period) / period
    gate = (phase < duty).astype(np.float64)
    r = max(int(ramp * sample_rate), 1)
    kernel = np.hanning(2 * r + 1)
    gate = np.convolve(gate, kernel / kernel.sum(), mode="same")
    return amplitude * gate * np.sin(2 * np.pi * freq * t)


def filtered_noise(n, rng, sample_rate=16000, cutoff=2000.0, rms=0.1, order=6):
    """High-pass filtered white noise scaled to the given RMS."""
    sos = butter(order, cutoff, btype="highpass", fs=sample_rate, output="sos")
    x = sosfilt(sos, rng.standard_normal(n + 1024))[1024:]
    return x * (rms / np.sqrt(np.mean(x * x)))


def singing_voice_track(name="synthetic", seconds=10.0, sample_rate=16000, seed=0, **tone):
    """Vocals = gated 440 Hz tone, accompaniment = high-passed noise, mixture = sum."""
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    vocals = gated_tone(n, sample_rate, **tone)
    accompaniment = filtered_noise(n, rng, sample_rate)
    return TrackStems(name, sample_rate, vocals + accompaniment,
                      {"vocals": vocals, "accompaniment": accompaniment})


def half_voiced_track(name="half_voiced", seconds=10.0, sample_rate=16000, seed=0):
    """First half carries a tone on the vocal stem, second half is silent."""
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    vocals = np.zeros(n)
    t = np.arange(n // 2) / sample_rate
    vocals[:n // 2] = 0.5 * np.sin(2 * np.pi * 440.0 * t)
    accompaniment = filtered_noise(n, rng, sample_rate)
    return TrackStems(name, sample_rate, vocals + accompaniment,
                      {"vocals": vocals, "accompaniment": accompaniment})
