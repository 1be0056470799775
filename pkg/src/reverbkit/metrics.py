"""Acoustic metrics: EDC, RT60, EDT, DRR, blind RT60, RTE and SRMR.

RIR-level metrics come from Schroeder backward integration. Speech-level
metrics (blind RT60, RTE, SRMR) work on the waveform alone.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import fft as sfft

from .audio import AudioBuffer, mel_filterbank, stft
from .errors import (
    DegenerateError,
    EstimationError,
    InsufficientDecayError,
    SilenceError,
)
from .rir import Rir

EDC_CAP_DB = -120.0
DRR_CLAMP_DB = 80.0
DRR_HALF_WINDOW_S = 0.0025
ANALYSIS_WINDOW_S = 2.56
SILENCE_RMS = 1e-6


@dataclass(frozen=True)
class Edc:
    """Schroeder energy decay curve in dB, starting at ``t0`` seconds."""

    values_db: np.ndarray
    sample_rate: int
    t0: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.values_db.shape[0]) / self.sample_rate


@dataclass
class AcousticReport:
    rt60: float | None = None
    edt: float | None = None
    drr: float | None = None
    rte: float | None = None
    srmr: float | None = None
    delta_rt60: float | None = None
    delta_edt: float | None = None
    delta_drr: float | None = None
    rt60_source: str | None = None
    rt60_method: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "AcousticReport":
        return cls(**d)


# ---------------------------------------------------------------------------
# RIR analysis
# ---------------------------------------------------------------------------


def onset_index(h, threshold_db=-20.0) -> int:
    """First sample whose energy is within ``threshold_db`` of the peak."""
    e = np.asarray(h) ** 2
    peak = e.max()
    if peak <= 0:
        raise DegenerateError("impulse response has zero energy")
    return int(np.argmax(e >= peak * 10.0 ** (threshold_db / 10.0)))


def edc(rir: Rir, trim_onset=True, cap_db=EDC_CAP_DB) -> Edc:
    """Schroeder backward-integrated decay curve, normalized to 0 dB.

    With ``trim_onset`` the curve starts at the first sample within 20 dB of
    the peak, so any propagation delay is excluded from the decay. Samples
    after the last nonzero energy sit at ``cap_db``.
    """
    h = rir.h.samples
    if not np.any(h):
        raise DegenerateError("impulse response has zero energy")
    start = onset_index(h) if trim_onset else 0
    e = h[start:] ** 2
    tail = np.cumsum(e[::-1])[::-1]
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(tail / tail[0])
    db = np.maximum(db, cap_db)
    db = np.minimum.accumulate(db)
    return Edc(db, rir.sample_rate, start / rir.sample_rate)


def _fit_slope(curve: Edc, hi_db, lo_db, cap_db=EDC_CAP_DB):
    """Least-squares slope (dB/s) over the curve between ``hi_db`` and ``lo_db``.

    Returns None when the curve has no uncapped sample at or below ``lo_db``.
    """
    v = curve.values_db
    finite = v > cap_db
    reached = np.flatnonzero(finite & (v <= lo_db))
    if reached.size == 0:
        return None
    stop = reached[0]
    start = int(np.argmax(v <= hi_db))
    idx = np.arange(start, stop + 1)
    idx = idx[finite[idx]]
    if idx.size < 2:
        return None
    t = idx / curve.sample_rate
    y = v[idx]
    tc = t - t.mean()
    denom = np.dot(tc, tc)
    if denom <= 0:
        return None
    slope = float(np.dot(tc, y - y.mean()) / denom)
    return slope if slope < 0 else None


def rt60_from_edc(curve: Edc, full_output=False):
    """RT60 from a T30 line fit, falling back to T20.

    With ``full_output`` returns ``(rt60, method)`` where method is ``"T30"``
    or ``"T20"``.
    """
    for method, lo in (("T30", -35.0), ("T20", -25.0)):
        slope = _fit_slope(curve, -5.0, lo)
        if slope is not None:
            rt = -60.0 / slope
            return (rt, method) if full_output else rt
    raise InsufficientDecayError("EDC never reaches -25 dB; cannot fit T20 or T30")


def edt_from_edc(curve: Edc) -> float:
    slope = _fit_slope(curve, 0.0, -10.0)
    if slope is None:
        raise InsufficientDecayError("EDC never reaches -10 dB; cannot fit EDT")
    return -60.0 / slope


def drr(rir: Rir, direct_time=None, half_window=DRR_HALF_WINDOW_S) -> float:
    """Direct-to-reverberant ratio in dB, clamped to +/-80 dB.

    The direct window is ``+/- half_window`` around the direct arrival, taken
    from ``direct_time``, the RIR provenance, or the global peak, in that
    order. Reverberant energy is everything after the window.
    """
    h = rir.h.samples
    fs = rir.sample_rate
    if not np.any(h):
        raise DegenerateError("impulse response has zero energy")
    if direct_time is None:
        direct_time = rir.direct_delay
    nd = int(np.argmax(np.abs(h))) if direct_time is None else int(round(direct_time * fs))
    half = int(round(half_window * fs))
    lo, hi = max(nd - half, 0), nd + half + 1
    e_direct = float(np.sum(h[lo:hi] ** 2))
    e_reverb = float(np.sum(h[hi:] ** 2))
    if e_reverb == 0.0:
        return DRR_CLAMP_DB
    if e_direct == 0.0:
        return -DRR_CLAMP_DB
    return float(np.clip(10.0 * math.log10(e_direct / e_reverb), -DRR_CLAMP_DB, DRR_CLAMP_DB))


def fixed_window(rir: Rir, seconds=ANALYSIS_WINDOW_S) -> Rir:
    """Trim or zero-pad an RIR to exactly ``seconds``."""
    n = int(round(seconds * rir.sample_rate))
    h = rir.h.samples[:n]
    if h.shape[0] < n:
        h = np.pad(h, (0, n - h.shape[0]))
    return Rir(AudioBuffer(h, rir.sample_rate), rir.room, rir.direct_delay, dict(rir.meta))


def rir_report(rir: Rir, window=ANALYSIS_WINDOW_S) -> AcousticReport:
    """RT60 (oracle, from the EDC), EDT and DRR of one RIR."""
    if window is not None:
        rir = fixed_window(rir, window)
    curve = edc(rir)
    rt, method = rt60_from_edc(curve, full_output=True)
    return AcousticReport(rt60=rt, edt=edt_from_edc(curve), drr=drr(rir),
                          rt60_source="oracle", rt60_method=method)


def rir_delta(predicted: Rir, reference: Rir, window=ANALYSIS_WINDOW_S) -> AcousticReport:
    """Absolute RT60/EDT/DRR errors of ``predicted`` against ``reference``.

    Both RIRs are cut to the fixed analysis window first. The returned report
    carries the predicted RIR's own parameters alongside the deltas.
    """
    reports = []
    for side, r in (("predicted", predicted), ("reference", reference)):
        try:
            reports.append(rir_report(r, window))
        except (InsufficientDecayError, DegenerateError) as exc:
            raise type(exc)(f"{side} RIR: {exc}") from exc
    p, ref = reports
    p.delta_rt60 = abs(p.rt60 - ref.rt60)
    p.delta_edt = abs(p.edt - ref.edt)
    p.delta_drr = abs(p.drr - ref.drr)
    return p


# ---------------------------------------------------------------------------
# Blind RT60 from speech
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlindRt60Config:
    n_bands: int = 8
    smooth_frames: int = 3
    peak_halfwidth: int = 2
    active_db: float = 35.0
    fit_start_db: float = 5.0
    fit_stop_db: float = 40.0
    rise_db: float = 3.0
    max_frames: int = 80
    min_points: int = 3
    min_drop_db: float = 10.0


def _check_speech(speech: AudioBuffer, min_seconds):
    if speech.duration < min_seconds:
        raise EstimationError(f"need at least {min_seconds} s of audio, got {speech.duration:.3f} s")
    if speech.rms() < SILENCE_RMS:
        raise SilenceError("signal is silent")


def band_energy_db(speech: AudioBuffer, n_bands=8) -> tuple:
    """Frame energies in dB for ``n_bands`` groups of adjacent mel bands.

    Returns ``(levels, frame_rate)`` with ``levels`` shaped ``(n_bands, n_frames)``.
    """
    spec = stft(speech)
    power = np.abs(spec.frames) ** 2
    fb = mel_filterbank(64, spec.fft_size, speech.sample_rate, 0.0, speech.sample_rate / 2)
    mel = power @ fb.T
    groups = np.array_split(np.arange(fb.shape[0]), n_bands)
    bands = np.stack([mel[:, g].sum(axis=1) for g in groups])
    ref = bands.max()
    levels = 10.0 * np.log10(np.maximum(bands, ref * 1e-12) / ref)
    return levels, speech.sample_rate / spec.hop


def decay_slopes(speech: AudioBuffer, config: BlindRt60Config = BlindRt60Config()) -> np.ndarray:
    """Slopes (dB/s) of free-decay segments following sound offsets.

    A segment starts at a local maximum of the smoothed band level and runs
    until the level rises again, falls ``fit_stop_db`` below the peak, or
    ``max_frames`` pass. Its slope is fit from ``fit_start_db`` below the
    peak onward.
    """
    levels, frame_rate = band_energy_db(speech, config.n_bands)
    k = config.smooth_frames
    if k > 1:
        kernel = np.ones(k) / k
        levels = np.stack([np.convolve(b, kernel, mode="same") for b in levels])
    slopes = []
    w = config.peak_halfwidth
    for band in levels:
        n = band.shape[0]
        active = band.max() - config.active_db
        for t in range(w, n - 1):
            peak = band[t]
            if peak < active or peak < band[max(t - w, 0) : t + w + 1].max():
                continue
            if band[t + 1] >= peak:
                continue
            end = t + 1
            running_min = band[end]
            while end + 1 < n and end + 1 - t <= config.max_frames:
                nxt = band[end + 1]
                if nxt > running_min + config.rise_db or running_min <= peak - config.fit_stop_db:
                    break
                end += 1
                running_min = min(running_min, nxt)
            seg = band[t : end + 1]
            # Trim trailing frames that climb back up toward the next onset.
            last = int(np.argmin(seg))
            seg = seg[: last + 1]
            if peak - seg[-1] < config.min_drop_db:
                continue
            first = int(np.argmax(seg <= peak - config.fit_start_db))
            y = seg[first:]
            if y.shape[0] < config.min_points:
                continue
            x = np.arange(y.shape[0]) / frame_rate
            xc = x - x.mean()
            slope = np.dot(xc, y - y.mean()) / np.dot(xc, xc)
            if slope < 0:
                slopes.append(slope)
    return np.asarray(slopes)


def blind_rt60(speech: AudioBuffer, config: BlindRt60Config = BlindRt60Config()) -> float:
    """RT60 estimated from reverberant speech alone (classical decay-rate method)."""
    _check_speech(speech, 1.0)
    slopes = decay_slopes(speech, config)
    if slopes.size == 0:
        raise EstimationError("no free-decay segments found")
    return float(-60.0 / np.median(slopes))


def rte(output: AudioBuffer, reference: AudioBuffer, config: BlindRt60Config = BlindRt60Config()) -> float:
    return abs(blind_rt60(output, config) - blind_rt60(reference, config))


# ---------------------------------------------------------------------------
# SRMR
# ---------------------------------------------------------------------------

SRMR_CHANNELS = 23
SRMR_FMIN = 125.0
SRMR_FMAX = 8000.0
MOD_FMIN = 4.0
MOD_FMAX = 128.0
MOD_BANDS = 8
MOD_Q = 2.0


def erb_rate(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=np.float64))


def inverse_erb_rate(e):
    return (10.0 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 0.00437


def gammatone_centers(n=SRMR_CHANNELS, fmin=SRMR_FMIN, fmax=SRMR_FMAX) -> np.ndarray:
    return inverse_erb_rate(np.linspace(erb_rate(fmin), erb_rate(fmax), n))


def modulation_centers(n=MOD_BANDS, fmin=MOD_FMIN, fmax=MOD_FMAX) -> np.ndarray:
    return np.geomspace(fmin, fmax, n)


def modulation_energies(speech: AudioBuffer) -> np.ndarray:
    """Modulation energy per (gammatone channel, modulation band).

    Channel envelopes are magnitudes of the analytic signal, built directly in
    the frequency domain from the one-sided gammatone response.
    """
    x = speech.samples
    fs = speech.sample_rate
    n = sfft.next_fast_len(x.shape[0])
    spectrum = sfft.rfft(x, n)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    centers = gammatone_centers(fmax=min(SRMR_FMAX, fs / 2))
    bandwidth = 1.019 * 24.7 * (4.37 * centers / 1000.0 + 1.0)

    mod_centers = modulation_centers()
    mod_freqs = np.fft.rfftfreq(n, 1.0 / fs)
    with np.errstate(divide="ignore"):
        ratio = mod_freqs[None, :] / mod_centers[:, None] - mod_centers[:, None] / mod_freqs[None, :]
    mod_gain = np.where(mod_freqs[None, :] > 0, 1.0 / (1.0 + (MOD_Q * ratio) ** 2), 0.0)

    out = np.empty((centers.shape[0], mod_centers.shape[0]))
    analytic = np.zeros(n, dtype=np.complex128)
    half = spectrum.shape[0]
    for i, (fc, b) in enumerate(zip(centers, bandwidth)):
        gain = (1.0 + ((freqs - fc) / b) ** 2) ** -2
        analytic[:] = 0.0
        analytic[:half] = spectrum * gain
        analytic[1 : (n + 1) // 2] *= 2.0
        env = np.abs(sfft.ifft(analytic))
        env_power = np.abs(sfft.rfft(env)) ** 2
        out[i] = mod_gain @ env_power
    return out


def srmr(speech: AudioBuffer) -> float:
    """Speech-to-reverberation modulation energy ratio.

    Energy in modulation bands 1-4 (4 to ~18 Hz) over bands 5-8, summed over
    23 gammatone channels.
    """
    _check_speech(speech, 0.5)
    energies = modulation_energies(speech).sum(axis=0)
    high = energies[4:].sum()
    if high <= 0:
        raise SilenceError("no modulation energy")
    return float(energies[:4].sum() / high)


def speech_report(speech: AudioBuffer, reference: AudioBuffer | None = None,
                  config: BlindRt60Config = BlindRt60Config()) -> AcousticReport:
    """SRMR, blind RT60 and (with a reference) RTE for one signal."""
    rt = blind_rt60(speech, config)
    report = AcousticReport(rt60=rt, srmr=srmr(speech), rt60_source="blind", rt60_method="decay-rate")
    if reference is not None:
        report.rte = abs(rt - blind_rt60(reference, config))
    return report
