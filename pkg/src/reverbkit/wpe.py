"""Single-channel weighted prediction error (WPE) dereverberation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .audio import FFT_SIZE, HOP, SAMPLE_RATE, WINDOW, AudioBuffer, istft, stft
from .errors import ConfigError, LengthError, RateError


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 10
    delay: int = 3
    iterations: int = 3
    epsilon: float = 1e-8
    psd_context: int = 0
    fft_size: int = FFT_SIZE
    hop: int = HOP
    window: str = WINDOW

    def __post_init__(self):
        if self.taps < 1 or self.delay < 1 or self.iterations < 1:
            raise ConfigError("taps, delay and iterations must all be >= 1")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")


def delayed_context(X, taps, delay):
    """Stack ``[X[t-D], ..., X[t-D-K+1]]`` for every frame with full context.

    ``X`` is ``(n_bins, n_frames)``; returns ``(n_bins, n_frames - D - K + 1, K)``
    aligned with frames ``D + K - 1`` onward.
    """
    n_frames = X.shape[1]
    start = delay + taps - 1
    cols = [X[:, start - delay - k : n_frames - delay - k] for k in range(taps)]
    return np.stack(cols, axis=-1)


def _solve_hermitian(R, r):
    try:
        c = scipy.linalg.cho_factor(R, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(c, r, check_finite=False)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(R, r, rcond=None)[0]


def wpe_filters(X, config: WpeConfig = WpeConfig()):
    """Run WPE on an STFT ``X`` of shape ``(n_bins, n_frames)``.

    Returns ``(D, G)``: the dereverberated STFT and the per-bin prediction
    filters, shape ``(n_bins, taps)``.
    """
    K, delay = config.taps, config.delay
    n_bins, n_frames = X.shape
    start = delay + K - 1
    if n_frames < start + 1:
        raise LengthError(f"need at least {start + 1} STFT frames for taps={K}, delay={delay}; got {n_frames}")
    Xt = delayed_context(X, K, delay)
    target = X[:, start:]
    D = X.copy()
    G = np.zeros((n_bins, K), dtype=np.complex128)
    eye = np.eye(K)
    for _ in range(config.iterations):
        power = np.abs(D) ** 2
        if config.psd_context:
            c = config.psd_context
            kernel = np.ones(2 * c + 1) / (2 * c + 1)
            power = np.apply_along_axis(np.convolve, 1, np.pad(power, ((0, 0), (c, c)), mode="edge"),
                                        kernel, mode="valid")
        lam = np.maximum(power[:, start:], config.epsilon)
        Xw = Xt / lam[..., None]
        R = np.einsum("ftk,ftl->fkl", Xw, Xt.conj())
        r = np.einsum("ftk,ft->fk", Xw, target.conj())
        for f in range(n_bins):
            Rf = 0.5 * (R[f] + R[f].conj().T)
            delta = 1e-6 * np.trace(Rf).real / K
            G[f] = _solve_hermitian(Rf + delta * eye, r[f])
        D[:, start:] = target - np.einsum("fk,ftk->ft", G.conj(), Xt)
    return D, G


def wpe_dereverb(buffer: AudioBuffer, config: WpeConfig = WpeConfig()) -> AudioBuffer:
    """Dereverberate a mono 16 kHz signal; output has the input's length.

    Frames without a full delayed context are passed through unchanged.
    """
    if buffer.sample_rate != SAMPLE_RATE:
        raise RateError(f"WPE expects {SAMPLE_RATE} Hz input, got {buffer.sample_rate} Hz")
    spec = stft(buffer, config.fft_size, config.hop, config.window)
    D, _ = wpe_filters(spec.frames.T, config)
    return istft(spec.with_frames(D.T))
