"""Signal plumbing: WAV I/O, STFT/ISTFT, FFT convolution and log-mel features.

Everything here works on :class:`AudioBuffer`, a mono float64 waveform paired
with its sample rate. Operations are pure; nothing is cached between calls.
"""
from __future__ import annotations

import os
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from .errors import ConfigError, FormatError, IoError, RateError, UnsupportedError

SAMPLE_RATE = 16000
FFT_SIZE = 512
HOP = 128
WINDOW = "hann"

N_MELS = 64
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-5

_PCM16_MAX = 1.0 - 2.0**-15


@dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64, copy=True).reshape(-1)
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        if not np.all(np.isfinite(x)):
            raise ConfigError("samples contain NaN or Inf")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT frames, shape ``(n_frames, fft_size // 2 + 1)``."""

    frames: np.ndarray
    fft_size: int
    hop: int
    window: str
    sample_rate: int
    length: int | None = None

    def __post_init__(self):
        n_bins = self.fft_size // 2 + 1
        if self.frames.ndim != 2 or self.frames.shape[1] != n_bins:
            raise ConfigError(
                f"frames must have shape (n_frames, {n_bins}), got {self.frames.shape}"
            )
        if not 0 < self.hop <= self.fft_size:
            raise ConfigError("hop must satisfy 0 < hop <= fft_size")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames):
        return Spectrogram(
            np.asarray(frames), self.fft_size, self.hop, self.window, self.sample_rate, self.length
        )


@dataclass(frozen=True)
class MelFeature:
    frames: np.ndarray
    n_mels: int
    fmin: float
    fmax: float
    log_floor: float = LOG_FLOOR
    sample_rate: int = field(default=SAMPLE_RATE)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path, channel=0) -> AudioBuffer:
    """Read a PCM16 or float32 WAV file as a mono :class:`AudioBuffer`.

    PCM values are scaled by 1/32768. For multichannel files ``channel``
    selects which one to return.
    """
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(os.fspath(path))
    except FileNotFoundError as exc:
        raise IoError(f"{path}: no such file") from exc
    except ValueError as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "Unsupported" in msg:
            raise UnsupportedError(f"{path}: {msg}") from exc
        raise FormatError(f"{path}: {msg}") from exc
    except (EOFError, IndexError) as exc:
        raise FormatError(f"{path}: truncated or malformed WAV ({exc})") from exc
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedError(f"{path}: unsupported sample type {data.dtype} (need PCM16 or float32)")

    if samples.ndim == 2:
        if not 0 <= channel < samples.shape[1]:
            raise ConfigError(f"channel {channel} out of range for {samples.shape[1]}-channel file")
        samples = samples[:, channel]
    elif channel != 0:
        raise ConfigError(f"channel {channel} requested from a mono file")
    return AudioBuffer(samples, rate)


def quantize_pcm16(samples) -> np.ndarray:
    """Clip to [-1, 1 - 2**-15] and round half away from zero to int16."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, _PCM16_MAX) * 32768.0
    q = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return q.astype(np.int16)


def write_wav(buffer: AudioBuffer, path, encoding="float32"):
    """Write ``buffer`` to ``path`` atomically (temp file, then rename)."""
    if encoding == "pcm16":
        data = quantize_pcm16(buffer.samples)
    elif encoding == "float32":
        data = buffer.samples.astype(np.float32)
    else:
        raise ConfigError(f"unknown encoding {encoding!r}; use 'pcm16' or 'float32'")

    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".wav.tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                wavfile.write(fh, buffer.sample_rate, data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


def _window(name, fft_size):
    try:
        return get_window(name, fft_size, fftbins=True).astype(np.float64)
    except ValueError as exc:
        raise ConfigError(f"unknown window {name!r}") from exc


def cola_deviation(window, hop) -> float:
    """Relative spread of the summed squared window shifted by ``hop``.

    Zero means perfect constant overlap-add for analysis+synthesis windowing.
    """
    w2 = np.asarray(window, dtype=np.float64) ** 2
    n = w2.shape[0]
    if n % hop:
        return np.inf
    env = w2.reshape(n // hop, hop).sum(axis=0)
    mean = env.mean()
    if mean <= 0:
        return np.inf
    return float((env.max() - env.min()) / mean)


def _check_stft_config(fft_size, hop):
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise ConfigError(f"fft_size must be a power of two, got {fft_size}")
    if hop <= 0 or hop > fft_size or fft_size % hop:
        raise ConfigError(f"hop must divide fft_size ({fft_size}), got {hop}")


def stft(buffer: AudioBuffer, fft_size=FFT_SIZE, hop=HOP, window=WINDOW) -> Spectrogram:
    """Centered STFT with reflect padding and an unnormalized forward FFT.

    Frame ``t`` covers samples ``[t*hop, t*hop + fft_size)`` of the signal
    padded by ``fft_size // 2`` on each side. Signals too short for reflect
    padding are zero padded instead.
    """
    _check_stft_config(fft_size, hop)
    win = _window(window, fft_size)
    x = buffer.samples
    n = x.shape[0]
    pad = fft_size // 2
    mode = "reflect" if n > pad else "constant"
    n_frames = 1 + -(-n // hop)
    total = (n_frames - 1) * hop + fft_size
    padded = np.pad(x, pad, mode=mode)
    padded = np.pad(padded, (0, total - padded.shape[0]))
    frames = np.lib.stride_tricks.sliding_window_view(padded, fft_size)[::hop][:n_frames]
    spec = np.fft.rfft(frames * win, axis=1)
    return Spectrogram(spec, fft_size, hop, window, buffer.sample_rate, n)


def istft(spec: Spectrogram) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft`."""
    _check_stft_config(spec.fft_size, spec.hop)
    win = _window(spec.window, spec.fft_size)
    if cola_deviation(win, spec.hop) > 1e-10:
        raise ConfigError(
            f"window {spec.window!r} with hop {spec.hop} is not COLA for squared windows"
        )
    n_frames, n = spec.n_frames, spec.fft_size
    frames = np.fft.irfft(spec.frames, n=n, axis=1) * win
    total = (n_frames - 1) * spec.hop + n
    out = np.zeros(total)
    env = np.zeros(total)
    w2 = win**2
    for t in range(n_frames):
        s = t * spec.hop
        out[s : s + n] += frames[t]
        env[s : s + n] += w2
    nz = env > 1e-12
    out[nz] /= env[nz]
    pad = n // 2
    length = spec.length if spec.length is not None else total - 2 * pad
    y = out[pad : pad + length]
    if y.shape[0] < length:
        y = np.pad(y, (0, length - y.shape[0]))
    return AudioBuffer(y, spec.sample_rate)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

_DIRECT_MAX_TAPS = 64


def _next_pow2(n):
    return 1 << max(0, int(n - 1).bit_length())


def partitioned_convolve(x, h, block=None) -> np.ndarray:
    """Uniformly partitioned overlap-add convolution of two 1-D arrays.

    The kernel is split into ``block``-sized partitions; each input block is
    transformed once and multiplied against every partition in a
    frequency-domain delay line.
    """
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    nx, nh = x.shape[0], h.shape[0]
    if nx == 0 or nh == 0:
        return np.zeros(max(nx + nh - 1, 0))
    if block is None:
        block = min(_next_pow2(nh), 1024)
    nfft = 2 * block
    n_parts = -(-nh // block)
    n_blocks = -(-nx // block)

    hp = np.zeros(n_parts * block)
    hp[:nh] = h
    H = np.fft.rfft(hp.reshape(n_parts, block), n=nfft, axis=1)
    xp = np.zeros(n_blocks * block)
    xp[:nx] = x
    X = np.fft.rfft(xp.reshape(n_blocks, block), n=nfft, axis=1)

    Y = np.zeros((n_blocks + n_parts - 1, H.shape[1]), dtype=np.complex128)
    for j in range(n_parts):
        Y[j : j + n_blocks] += X * H[j]
    y_blocks = np.fft.irfft(Y, n=nfft, axis=1)

    out = np.zeros((n_blocks + n_parts) * block)
    # Each output block spans two block slots: add first and second halves.
    m = y_blocks.shape[0]
    out[: m * block] += y_blocks[:, :block].reshape(-1)
    out[block : (m + 1) * block] += y_blocks[:, block:].reshape(-1)
    return out[: nx + nh - 1]


def convolve(signal: AudioBuffer, kernel: AudioBuffer) -> AudioBuffer:
    """Full linear convolution; output length ``len(signal) + len(kernel) - 1``."""
    if signal.sample_rate != kernel.sample_rate:
        raise RateError(
            f"sample rates differ: signal {signal.sample_rate} Hz, kernel {kernel.sample_rate} Hz"
        )
    x, h = signal.samples, kernel.samples
    if min(x.shape[0], h.shape[0]) <= _DIRECT_MAX_TAPS:
        y = np.convolve(x, h)
    else:
        y = partitioned_convolve(x, h)
    return AudioBuffer(y, signal.sample_rate)


# ---------------------------------------------------------------------------
# Log-mel
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, fft_size, sample_rate, fmin=FMIN, fmax=FMAX) -> np.ndarray:
    """Triangular HTK-mel filterbank, shape ``(n_mels, fft_size // 2 + 1)``."""
    if n_mels < 1:
        raise ConfigError("n_mels must be >= 1")
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ConfigError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got {fmin}, {fmax}")
    bins = np.fft.rfftfreq(fft_size, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (center - lower)
    falling = (upper - bins) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = fb.sum(axis=1) <= 0
    if np.any(empty):
        # Bands narrower than one bin: fall back to the nearest bin.
        nearest = np.abs(bins[None, :] - center[empty]).argmin(axis=1)
        fb[np.flatnonzero(empty), nearest] = 1.0
    return fb


def logmel(buffer: AudioBuffer, n_mels=N_MELS, fmin=FMIN, fmax=FMAX, log_floor=LOG_FLOOR,
           fft_size=FFT_SIZE, hop=HOP) -> MelFeature:
    if fmax > buffer.sample_rate / 2:
        raise ConfigError(f"fmax {fmax} exceeds Nyquist {buffer.sample_rate / 2}")
    if log_floor <= 0:
        raise ConfigError("log_floor must be positive")
    fb = mel_filterbank(n_mels, fft_size, buffer.sample_rate, fmin, fmax)
    power = np.abs(stft(buffer, fft_size, hop).frames) ** 2
    frames = np.log(power @ fb.T + log_floor)
    return MelFeature(frames, n_mels, fmin, fmax, log_floor, buffer.sample_rate)
