import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from reverbkit.audio import AudioBuffer
from reverbkit.errors import ConfigError, FormatError, RateError, SampleDivergedError, ShapeError, SilenceError, TrainingDivergedError
from reverbkit.flow import (
    N_EDC_POINTS,
    PARAM_NAMES,
    FlowModel,
    FlowTask,
    FlowTrainConfig,
    defeaturize_rir,
    edc_grid,
    featurize,
    flow_loss,
    load_checkpoint,
    rir_feature,
    sample,
    save_checkpoint,
    speech_feature,
    time_embedding,
    train,
    train_pairs,
)
from reverbkit.metrics import rir_report
from reverbkit.rir import RoomSpec, simulate_rir, synth_exponential_rir
from reverbkit.speech import synth_speech


def small_model(d_x=3, d_c=2, hidden=8, seed=0):
    m = FlowModel.init(d_x, d_c, hidden=hidden, rng=seed)
    # nonzero biases and null vector so every gradient path is exercised
    rng = np.random.default_rng(seed + 1)
    for k in ("b1", "b2", "b3", "null"):
        m.params[k] = 0.3 * rng.standard_normal(m.params[k].shape)
    return m


def rotation_data(n, rng, noise=0.01):
    c = rng.uniform(-1, 1, (n, 2))
    return c, np.stack([-c[:, 1], c[:, 0]], 1) + noise * rng.standard_normal((n, 2))


# ---------------------------------------------------------------- model and loss


def test_time_embedding():
    e = time_embedding([0.0, 0.5], 32)
    assert e.shape == (2, 32)
    assert np.all(e[0, :16] == 0) and np.all(e[0, 16:] == 1)
    assert np.allclose(e[:, :16] ** 2 + e[:, 16:] ** 2, 1.0)


@pytest.mark.parametrize("config", range(20))
def test_gradients_match_central_differences(config):
    rng = np.random.default_rng(100 + config)
    d_x, d_c, hidden, n = (int(v) for v in rng.integers([1, 1, 2, 1], [6, 5, 10, 7]))
    m = small_model(d_x, d_c, hidden, seed=config)
    x1, c, x0 = rng.standard_normal((n, d_x)), rng.standard_normal((n, d_c)), rng.standard_normal((n, d_x))
    t = rng.uniform(0, 1, n)
    sigma = float(rng.choice([0.0, 0.05]))
    drop = rng.uniform(size=n) < 0.5
    _, grads = flow_loss(m, x1, c, x0, t, sigma, drop)
    h = 1e-5
    worst = 0.0
    for name in PARAM_NAMES:
        p = m.params[name]
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + h
            lp = flow_loss(m, x1, c, x0, t, sigma, drop)[0]
            p[idx] = keep - h
            lm = flow_loss(m, x1, c, x0, t, sigma, drop)[0]
            p[idx] = keep
            num[idx] = (lp - lm) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(num), np.abs(grads[name])), 1e-6)
        worst = max(worst, float(np.max(np.abs(num - grads[name]) / denom)))
    assert worst < 1e-4


def test_zero_loss_when_target_equals_source_and_output_is_zero():
    m = small_model()
    m.params["W3"][:] = 0.0
    m.params["b3"][:] = 0.0
    x = np.random.default_rng(0).standard_normal((3, 3))
    assert flow_loss(m, x, np.ones((3, 2)), x, [0.1, 0.5, 0.9])[0] == 0.0


def test_zero_loss_when_velocity_is_exact():
    m = small_model()
    for k in ("W1", "W2", "W3", "b3"):
        m.params[k][:] = 0.0
    x1, x0 = np.array([1.0, -2.0, 0.5]), np.array([0.2, 0.1, -0.3])
    m.params["b3"][:] = x1 - x0
    loss, grads = flow_loss(m, np.tile(x1, (4, 1)), np.ones((4, 2)), np.tile(x0, (4, 1)), [0, 0.3, 0.7, 1])
    assert loss == 0.0
    assert all(not np.any(g) for g in grads.values())


def test_loss_permutation_invariant():
    rng = np.random.default_rng(0)
    m = small_model()
    x1, c, x0, t = rng.standard_normal((6, 3)), rng.standard_normal((6, 2)), rng.standard_normal((6, 3)), rng.uniform(0, 1, 6)
    perm = rng.permutation(6)
    a, ga = flow_loss(m, x1, c, x0, t)
    b, gb = flow_loss(m, x1[perm], c[perm], x0[perm], t[perm])
    assert a == pytest.approx(b, rel=1e-12)
    assert all(np.allclose(ga[k], gb[k], rtol=1e-10, atol=1e-14) for k in ga)


def test_loss_errors():
    m = small_model()
    with pytest.raises(ShapeError):
        flow_loss(m, np.zeros(4), np.zeros(2), np.zeros(3), 0.5)
    with pytest.raises(ShapeError):
        flow_loss(m, np.zeros((2, 3)), np.zeros((3, 2)), np.zeros((2, 3)), 0.5)
    with pytest.raises(ConfigError):
        flow_loss(m, np.zeros(3), np.zeros(2), np.zeros(3), 1.5)


def test_null_condition_used_for_unconditional_velocity():
    m = small_model()
    x = np.ones((2, 3))
    assert np.array_equal(m.velocity(x, 0.4), m.velocity(x, 0.4, np.tile(m.params["null"], (2, 1))))


# ---------------------------------------------------------------- training


def test_training_deterministic_per_seed():
    rng = np.random.default_rng(0)
    C, X = rotation_data(200, rng)
    cfg = FlowTrainConfig(steps=300, hidden=16, seed=3)
    a, b = train_pairs(C, X, cfg), train_pairs(C, X, cfg)
    assert a.hash() == b.hash() and a.loss_history == b.loss_history
    assert train_pairs(C, X, FlowTrainConfig(steps=300, hidden=16, seed=4)).hash() != a.hash()


def test_constant_dataset_sampling_error():
    c, x = np.array([[0.5, -0.5]]), np.array([[0.5, -1.0, 2.0]])
    m = train_pairs(c, x, FlowTrainConfig(steps=5000, lr=1e-2, seed=0))
    assert m.loss_history[-1] < m.loss_history[0]
    # mean over sampling seeds; single draws scatter with the stiff field near t = 1
    errs = [np.linalg.norm(sample(m, c[0], seed=s) - x[0]) for s in range(20)]
    assert np.mean(errs) < 0.05


def test_dirac_source_and_target():
    # source pinned to x0 and a single target: the exact velocity is the constant x1 - x0
    x0, x1 = np.array([0.3, -0.2]), np.array([1.0, 2.0])
    m = train_pairs(np.zeros((1, 1)), x1[None], FlowTrainConfig(steps=3000, hidden=32, lr=1e-2, cond_drop_prob=0.0),
                    x0=x0)
    for steps in (1, 4, 32):
        assert np.linalg.norm(sample(m, np.zeros(1), steps=steps, x0=x0) - x1) < 0.05


@pytest.fixture(scope="module")
def rotation_model():
    C, X = rotation_data(2000, np.random.default_rng(0))
    return train_pairs(C, X, FlowTrainConfig(steps=10_000, lr=1e-2, seed=0, cond_drop_prob=0.0))


def test_rotation_toy_reaches_noise_floor(rotation_model):
    Ct, Xt = rotation_data(500, np.random.default_rng(1))
    mse = np.mean((sample(rotation_model, Ct, steps=32, seed=5) - Xt) ** 2)
    assert mse < 10 * 0.01**2


def test_euler_converges_with_steps(rotation_model):
    c = rotation_data(50, np.random.default_rng(2))[0]
    ref = sample(rotation_model, c, steps=1024, seed=1)
    errs = [np.sqrt(np.mean((sample(rotation_model, c, steps=s, seed=1) - ref) ** 2)) for s in (16, 32, 64, 128)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < errs[0] / 4


def test_euler_fine_steps_differ_less_than_coarse(rotation_model):
    c = rotation_data(10, np.random.default_rng(4))[0]
    fine, coarse = [], []
    for s in range(50):
        x = {n: sample(rotation_model, c, steps=n, seed=s) for n in (4, 8, 128, 256)}
        fine.append(np.linalg.norm(x[256] - x[128]))
        coarse.append(np.linalg.norm(x[8] - x[4]))
    assert np.median(fine) < np.median(coarse)


def test_cfg_scale_one_is_pure_conditional(rotation_model):
    c = rotation_data(5, np.random.default_rng(3))[0]
    x = np.random.default_rng(9).standard_normal((5, 2))
    want = x.copy()
    for i in range(8):
        want = want + rotation_model.velocity(want, i / 8, c) / 8
    assert np.array_equal(sample(rotation_model, c, steps=8, seed=9, cfg_scale=1.0), want)
    assert not np.array_equal(sample(rotation_model, c, steps=8, seed=9, cfg_scale=3.0), want)


def test_sample_single_and_batch(rotation_model):
    c = np.array([0.2, -0.4])
    one = sample(rotation_model, c, seed=2)
    assert one.shape == (2,)
    with pytest.raises(ConfigError):
        sample(rotation_model, c, steps=0)


def test_divergence_errors():
    C, X = rotation_data(50, np.random.default_rng(0))
    with pytest.raises(TrainingDivergedError) as info:
        train_pairs(C, X * 1e4, FlowTrainConfig(steps=200, lr=10.0, hidden=8))
    assert info.value.step >= 0
    m = small_model(2, 2)
    m.params["b3"][:] = 1e308
    with pytest.raises(SampleDivergedError):
        sample(m, np.zeros(2), steps=1, x0=np.full(2, 1.7e308))


def test_train_config_validation():
    for kw in ({"steps": 0}, {"lr": 0.0}, {"cond_drop_prob": 1.0}, {"sigma_min": 0.5}, {"momentum": 1.0},
               {"weight_decay": -1.0}):
        with pytest.raises(ConfigError):
            FlowTrainConfig(**kw)
    with pytest.raises(ShapeError):
        train_pairs(np.zeros((3, 2)), np.zeros((2, 2)))


# ---------------------------------------------------------------- features and normalization


def test_task_normalization_uses_given_rows_only():
    rng = np.random.default_rng(0)
    C, X = rng.standard_normal((40, 3)) * 4 + 1, rng.standard_normal((40, 66))
    X[:, 5] = 7.0  # constant column keeps unit scale
    task = FlowTask("rir_estimation").fit(C[:30], X[:30], ids=[f"i{k}" for k in range(30)])
    assert np.allclose(task.c_mean, C[:30].mean(0)) and np.allclose(task.c_std, C[:30].std(0))
    assert task.x_std[5] == 1.0
    assert np.allclose(task.denorm_x(task.norm_x(X)), X)
    assert len(task.train_ids) == 30
    with pytest.raises(ConfigError):
        FlowTask("rir_estimation").norm_x(X)
    with pytest.raises(ConfigError):
        FlowTask("denoise")


def test_train_fits_stats_on_given_pairs():
    rng = np.random.default_rng(1)
    pairs = [(rng.standard_normal(2), rng.standard_normal(66)) for _ in range(12)]
    task = FlowTask("rir_estimation")
    train(task, pairs, FlowTrainConfig(steps=5, hidden=4))
    assert np.allclose(task.x_mean, np.mean([x for _, x in pairs], 0))


def test_edc_grid():
    g = edc_grid()
    assert len(g) == N_EDC_POINTS and g[0] == 0.0 and g[-1] == pytest.approx(2.56)
    assert np.all(np.diff(g) > 0) and np.all(np.diff(g, 2) > 0)


def test_rir_feature_monotone_in_t60():
    t60s = np.linspace(0.2, 1.2, 11)
    feats = [rir_feature(synth_exponential_rir(t, 2.56, seed=0)) for t in t60s]
    late = np.array([f[N_EDC_POINTS // 2 : N_EDC_POINTS] for f in feats])
    # each late dimension is nondecreasing in t60 (ties only at the -120 dB cap)
    assert np.all(np.diff(late, axis=0) >= -1e-9)
    assert spearmanr(t60s, late.mean(1))[0] > 0.95
    # DRR falls as the tail grows
    assert spearmanr(t60s, [f[-1] for f in feats])[0] < -0.95


def test_feature_gain_behaviour():
    r = synth_exponential_rir(0.5, 2.56, seed=1)
    a, b = rir_feature(r), rir_feature(r.scaled(10.0))
    assert np.allclose(a[:N_EDC_POINTS], b[:N_EDC_POINTS], atol=1e-9)
    assert b[N_EDC_POINTS] - a[N_EDC_POINTS] == pytest.approx(20.0)
    assert b[-1] == pytest.approx(a[-1])
    # white noise keeps every band well above the log floor
    s = np.random.default_rng(2).standard_normal(40960) * 0.1
    fa = speech_feature(AudioBuffer(s, 16000))
    fb = speech_feature(AudioBuffer(s * 10, 16000))
    assert fa.shape == (512,)
    assert np.max(np.abs(fb - fa - 2 * np.log(10))) < 1e-3


def test_feature_errors():
    with pytest.raises(RateError):
        speech_feature(AudioBuffer(np.ones(8000), 8000))
    with pytest.raises(SilenceError):
        speech_feature(AudioBuffer(np.zeros(16000), 16000))
    with pytest.raises(ConfigError):
        featurize(FlowTask("dereverb"), synth_exponential_rir(0.5, 1.0))


def test_speech_feature_uses_central_window():
    s = synth_speech(2.56, rng=np.random.default_rng(3)).samples
    padded = AudioBuffer(np.concatenate([np.zeros(8000), s, np.zeros(8000)]), 16000)
    assert np.allclose(speech_feature(padded), speech_feature(AudioBuffer(s, 16000)))


@pytest.mark.parametrize("source", ["exp0.3", "exp0.9", "room"])
def test_defeaturize_roundtrip_floor(source):
    if source == "room":
        ref = simulate_rir(RoomSpec((6.0, 5.0, 3.0), 0.3, (2.0, 1.5, 1.2), (4.0, 3.5, 1.6)))
    else:
        ref = synth_exponential_rir(float(source[3:]), 2.56, seed=4)
    est = defeaturize_rir(rir_feature(ref), seed=0)
    a, b = rir_report(est), rir_report(ref)
    assert abs(a.rt60 - b.rt60) <= 0.10 * b.rt60
    assert abs(a.drr - b.drr) <= 2.0
    assert len(est.h) == 40960 and not est.meta["projected"]


def test_defeaturize_linear_edc():
    f = np.concatenate([-120.0 * edc_grid(), [0.0, 0.0]])
    assert rir_report(defeaturize_rir(f)).rt60 == pytest.approx(0.5, rel=0.02)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-120, 0), min_size=N_EDC_POINTS, max_size=N_EDC_POINTS),
       st.floats(-40, 10), st.floats(-20, 20))
def test_defeaturize_any_feature(curve, e_direct, drr_db):
    r = defeaturize_rir(np.array(curve + [e_direct, drr_db]))
    h = r.h.samples
    assert np.all(np.isfinite(h)) and len(h) == 40960
    assert r.meta["projected"] == bool(np.any(np.diff(np.minimum(curve, 0)) > 0))
    assert h[40] ** 2 == pytest.approx(10 ** (e_direct / 10), rel=1e-9)


def test_defeaturize_errors():
    with pytest.raises(ShapeError):
        defeaturize_rir(np.zeros(10))
    with pytest.raises(ConfigError):
        defeaturize_rir(np.full(66, np.nan))


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_and_refusals(tmp_path):
    m = small_model()
    m.loss_history = [1.0, 0.5]
    task = FlowTask("rir_estimation").fit(np.ones((2, 2)), np.zeros((2, 66)), ["a", "b"])
    path = tmp_path / "ck.json"
    save_checkpoint(m, task, path, {"note": 1})
    m2, task2, extra = load_checkpoint(path)
    assert m2.hash() == m.hash() and m2.loss_history == [1.0, 0.5]
    assert task2.train_ids == ("a", "b") and extra == {"note": 1}
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_checkpoint(path)
    doc["format_version"] = 1
    doc["params"]["b3"][0] += 1.0
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_checkpoint(path)
