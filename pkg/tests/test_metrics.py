import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from reverbkit.audio import AudioBuffer, convolve
from reverbkit.errors import DegenerateError, EstimationError, InsufficientDecayError, SilenceError
from reverbkit.metrics import (
    DRR_CLAMP_DB,
    EDC_CAP_DB,
    BlindRt60Config,
    blind_rt60,
    drr,
    edc,
    edt_from_edc,
    fixed_window,
    gammatone_centers,
    modulation_centers,
    onset_index,
    rir_delta,
    rir_report,
    rt60_from_edc,
    rte,
    speech_report,
    srmr,
)
from reverbkit.rir import Rir, synth_exponential_rir
from reverbkit.speech import synth_speech

FS = 16000


def rir_of(h):
    return Rir(AudioBuffer(np.asarray(h, dtype=float), FS))


def exp_decay(t60, duration, delay=0):
    n = np.arange(int(duration * FS))
    h = 10.0 ** (-3.0 * n / (FS * t60))  # amplitude falls 60 dB in t60
    return np.concatenate([np.zeros(delay), h])


def reverberate(x, rir):
    return AudioBuffer(convolve(x, rir.h).samples[: len(x)], FS)


# ---------------------------------------------------------------- EDC


def test_edc_matches_reverse_loop_oracle():
    h = np.random.default_rng(0).standard_normal(300) * np.exp(-np.arange(300) / 60)
    h[0] = 5.0
    tail, acc = np.zeros(300), 0.0
    for i in range(299, -1, -1):
        acc += h[i] ** 2
        tail[i] = acc
    want = np.maximum(10 * np.log10(tail / tail[0]), EDC_CAP_DB)
    got = edc(rir_of(h), trim_onset=False).values_db
    assert np.max(np.abs(got - want)) < 1e-9


def test_edc_closed_form_geometric_tail():
    # energy r**n truncated at N has tail (r**n - r**N) / (1 - r**N)
    r, n_len = 0.999, 5000
    h = np.sqrt(r) ** np.arange(n_len)
    n = np.arange(n_len)
    with np.errstate(divide="ignore"):
        want = np.maximum(10 * np.log10((r**n - r**n_len) / (1 - r**n_len)), EDC_CAP_DB)
    got = edc(rir_of(h)).values_db
    assert np.max(np.abs(got - want)[want > -100]) < 1e-8


def test_edc_starts_at_zero_monotone_and_capped():
    h = np.concatenate([np.zeros(50), [1.0], np.zeros(100)])
    c = edc(rir_of(h))
    assert c.values_db[0] == 0.0
    assert np.all(np.diff(c.values_db) <= 0)
    assert c.values_db.min() == EDC_CAP_DB
    assert c.t0 == pytest.approx(50 / FS)


def test_edc_zero_rir():
    with pytest.raises(DegenerateError):
        edc(rir_of(np.zeros(10)))


def test_onset_index_threshold():
    h = np.zeros(100)
    h[[10, 20, 30]] = [0.05, 0.5, 1.0]
    assert onset_index(h) == 20
    assert onset_index(h, -30.0) == 10


# ---------------------------------------------------------------- RT60 and EDT


@pytest.mark.parametrize("t60", [0.2, 0.5, 1.3])
def test_rt60_and_edt_of_pure_exponential(t60):
    curve = edc(rir_of(exp_decay(t60, 3 * t60)))
    rt, method = rt60_from_edc(curve, full_output=True)
    assert method == "T30"
    assert rt == pytest.approx(t60, rel=1e-3)
    assert edt_from_edc(curve) == pytest.approx(t60, rel=1e-3)


def test_rt60_t20_fallback_and_failure():
    # 0.6 s decay cut at 0.32 s reaches -32 dB before the truncation knee
    h = exp_decay(0.6, 0.6)
    h[int(0.33 * FS):] = 0
    curve = edc(rir_of(h), cap_db=-32.0)
    rt, method = rt60_from_edc(curve, full_output=True)
    assert method == "T20"
    assert rt == pytest.approx(0.6, rel=0.05)
    with pytest.raises(InsufficientDecayError):
        rt60_from_edc(edc(rir_of(h), cap_db=-20.0))
    with pytest.raises(InsufficientDecayError):
        edt_from_edc(edc(rir_of(h), cap_db=-8.0))


def test_report_invariant_to_gain_and_delay():
    base = synth_exponential_rir(0.5, 1.0, seed=4)
    a = rir_report(base)
    b = rir_report(base.scaled(37.0))
    shifted = Rir(AudioBuffer(np.concatenate([np.zeros(400), base.h.samples[:-400]]), FS))
    c = rir_report(shifted)
    assert b.rt60 == pytest.approx(a.rt60, rel=1e-9)
    assert b.edt == pytest.approx(a.edt, rel=1e-9)
    assert b.drr == pytest.approx(a.drr, abs=1e-9)
    assert c.rt60 == pytest.approx(a.rt60, rel=0.02)
    assert a.rt60_source == "oracle"


# ---------------------------------------------------------------- DRR


def test_drr_hand_computed():
    h = np.zeros(4000)
    h[1000] = 1.0
    h[1000 + 41 :] = 0.01  # outside the +/-40 sample direct window
    want = 10 * np.log10(1.0 / (0.0001 * (4000 - 1041)))
    assert drr(rir_of(h)) == pytest.approx(want, abs=1e-9)
    # explicit direct time and RIR provenance agree with the peak search
    assert drr(rir_of(h), direct_time=1000 / FS) == pytest.approx(want, abs=1e-9)


def test_drr_clamps():
    h = np.zeros(2000)
    h[500] = 1.0
    assert drr(rir_of(h)) == DRR_CLAMP_DB
    assert drr(rir_of(h), direct_time=200 / FS) == -DRR_CLAMP_DB
    h[1000] = 1e-6
    assert drr(rir_of(h)) == pytest.approx(DRR_CLAMP_DB)


def test_fixed_window_trims_and_pads():
    assert len(fixed_window(rir_of(np.ones(100)), 0.01).h) == 160
    assert len(fixed_window(rir_of(np.ones(400)), 0.01).h) == 160


@settings(max_examples=20, deadline=None)
@given(st.floats(0.15, 1.2), st.integers(0, 10_000))
def test_rir_delta_identity(t60, seed):
    r = synth_exponential_rir(t60, max(1.0, t60), seed=seed)
    d = rir_delta(r, r)
    assert (d.delta_rt60, d.delta_edt, d.delta_drr) == (0.0, 0.0, 0.0)


def test_rir_delta_symmetric():
    a = synth_exponential_rir(0.4, 1.0, seed=1)
    b = synth_exponential_rir(0.8, 1.0, seed=2)
    ab, ba = rir_delta(a, b), rir_delta(b, a)
    assert ab.delta_rt60 == pytest.approx(ba.delta_rt60)
    assert ab.delta_rt60 == pytest.approx(0.4, rel=0.1)


# ---------------------------------------------------------------- blind RT60


@pytest.fixture(scope="module")
def utterance():
    return synth_speech(4.0, FS, np.random.default_rng(0))


@pytest.mark.parametrize("t60", [0.3, 0.6, 0.9])
def test_blind_rt60_tracks_exponential_decay(utterance, t60):
    est = blind_rt60(reverberate(utterance, synth_exponential_rir(t60, 2.56, seed=1)))
    assert est == pytest.approx(t60, rel=0.15)


def test_blind_rt60_monotone_and_clean_short(utterance):
    ests = [blind_rt60(reverberate(utterance, synth_exponential_rir(t, 2.56, seed=2))) for t in (0.2, 0.4, 0.7, 1.0)]
    assert all(b > a for a, b in zip(ests, ests[1:]))
    assert blind_rt60(utterance) < 0.1


def test_blind_rt60_errors():
    with pytest.raises(SilenceError):
        blind_rt60(AudioBuffer(np.zeros(2 * FS), FS))
    with pytest.raises(EstimationError):
        blind_rt60(AudioBuffer(np.ones(FS // 2), FS))
    with pytest.raises(EstimationError):
        # a stationary tone has no free decays
        t = np.arange(2 * FS) / FS
        blind_rt60(AudioBuffer(np.sin(2 * np.pi * 440 * t), FS))


def test_blind_rt60_gain_invariant(utterance):
    y = reverberate(utterance, synth_exponential_rir(0.5, 2.56, seed=3))
    assert blind_rt60(AudioBuffer(y.samples * 8.0, FS)) == pytest.approx(blind_rt60(y), rel=1e-9)


def test_rte_and_speech_report(utterance):
    y = reverberate(utterance, synth_exponential_rir(0.6, 2.56, seed=5))
    cfg = BlindRt60Config()
    assert rte(y, utterance, cfg) == pytest.approx(abs(blind_rt60(y) - blind_rt60(utterance)))
    rep = speech_report(y, utterance)
    assert rep.rt60_source == "blind"
    assert rep.rte == pytest.approx(rte(y, utterance))
    assert rep.srmr == pytest.approx(srmr(y))


# ---------------------------------------------------------------- SRMR


def srmr_oracle(x):
    """Time-domain route: scipy FIR gammatones, Hilbert envelopes and the same
    modulation-band shapes applied to each envelope's power spectrum."""
    energies = np.zeros(8)
    for fc in gammatone_centers():
        b, a = signal.gammatone(min(fc, 7990.0), "fir", fs=FS)
        env = np.abs(signal.hilbert(signal.lfilter(b, a, x)))
        power = np.abs(np.fft.rfft(env)) ** 2
        f = np.fft.rfftfreq(len(env), 1 / FS)
        for j, m in enumerate(modulation_centers()):
            with np.errstate(divide="ignore"):
                ratio = f / m - m / f
            energies[j] += np.where(f > 0, 1 / (1 + (2 * ratio) ** 2), 0) @ power
    return energies[:4].sum() / energies[4:].sum()


@pytest.mark.parametrize("t60", [None, 0.2, 0.6])
def test_srmr_matches_time_domain_oracle(utterance, t60):
    y = utterance if t60 is None else reverberate(utterance, synth_exponential_rir(t60, 2.56, seed=1))
    assert srmr(y) == pytest.approx(srmr_oracle(y.samples), rel=0.05)


def test_srmr_falls_with_reverberation(utterance):
    vals = [srmr(utterance)] + [srmr(reverberate(utterance, synth_exponential_rir(t, 2.56, seed=6)))
                                for t in (0.2, 0.5, 0.9)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_srmr_slow_vs_fast_modulation():
    t = np.arange(3 * FS) / FS
    carrier = np.sin(2 * np.pi * 1000 * t)
    slow = srmr(AudioBuffer(carrier * (1 + 0.9 * np.sin(2 * np.pi * 4 * t)), FS))
    fast = srmr(AudioBuffer(carrier * (1 + 0.9 * np.sin(2 * np.pi * 64 * t)), FS))
    assert slow > 5.0
    assert fast < 1.0


def test_srmr_scale_invariant_and_errors(utterance):
    assert srmr(AudioBuffer(utterance.samples * 0.01, FS)) == pytest.approx(srmr(utterance), rel=1e-9)
    with pytest.raises(SilenceError):
        srmr(AudioBuffer(np.zeros(FS), FS))
    with pytest.raises(EstimationError):
        srmr(AudioBuffer(np.ones(100), FS))


def test_filterbank_centres():
    c = gammatone_centers()
    assert len(c) == 23 and c[0] == pytest.approx(125.0) and c[-1] == pytest.approx(8000.0)
    m = modulation_centers()
    assert len(m) == 8 and m[0] == pytest.approx(4.0) and m[-1] == pytest.approx(128.0)
