"""Synthetic speech-like test signals.

Band-passed noise syllables gated at a 3-8 Hz syllabic rate and grouped into
words separated by pauses. The gaps matter: free decays after each offset are
what blind reverberation estimators and SRMR respond to.
"""
from __future__ import annotations

import numpy as np
from scipy.signal import butter, sosfilt

from .audio import SAMPLE_RATE, AudioBuffer


def _raised_cosine_gate(n, n_attack, n_release):
    env = np.ones(n)
    if n_attack:
        env[:n_attack] = 0.5 - 0.5 * np.cos(np.pi * np.arange(n_attack) / n_attack)
    if n_release:
        env[n - n_release :] = 0.5 + 0.5 * np.cos(np.pi * np.arange(1, n_release + 1) / n_release)
    return env


def synth_speech(duration=2.56, sample_rate=SAMPLE_RATE, rng=None, level=0.1) -> AudioBuffer:
    """Speech-rhythm noise bursts, RMS-normalized to ``level``."""
    rng = np.random.default_rng(rng)
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    pos = int(rng.uniform(0.03, 0.12) * sample_rate)
    while pos < n:
        for _ in range(rng.integers(1, 5)):
            period = 1.0 / rng.uniform(3.0, 8.0)
            length = int(period * rng.uniform(0.55, 0.85) * sample_rate)
            if pos + length > n or length < 16:
                pos = n
                break
            lo = rng.uniform(100.0, 600.0)
            hi = rng.uniform(1500.0, min(5000.0, 0.45 * sample_rate))
            sos = butter(4, [lo, hi], "bandpass", fs=sample_rate, output="sos")
            burst = sosfilt(sos, rng.standard_normal(length + 256))[256:]
            attack = int(rng.uniform(0.005, 0.02) * sample_rate)
            release = int(rng.uniform(0.005, 0.02) * sample_rate)
            gate = _raised_cosine_gate(length, min(attack, length // 3), min(release, length // 3))
            wobble = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * np.arange(length) / sample_rate
                                        + rng.uniform(0, 2 * np.pi))
            amp = rng.uniform(0.3, 1.0)
            out[pos : pos + length] += amp * burst * gate * wobble
            pos += int(period * sample_rate)
        pos += int(rng.uniform(0.08, 0.4) * sample_rate)
    rms = np.sqrt(np.mean(out**2))
    if rms > 0:
        out *= level / rms
    return AudioBuffer(out, sample_rate)
