"""Batch experiments: flow training from a manifest, dereverberation and RIR
estimation evaluations, reports and EDC plot data.

Per-item failures are recorded in the report and never abort a batch.
"""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy.interpolate import interp1d

from . import __version__
from .audio import FFT_SIZE, HOP, N_MELS, SAMPLE_RATE, AudioBuffer, convolve, istft, mel_filterbank, read_wav, stft
from .config import DEFAULTS, blind_config, snapshot, train_config, wpe_config
from .dataset import Manifest, _atomic_write_text
from .errors import ConfigError, ReverbKitError
from .flow import (
    N_CHUNKS,
    FlowTask,
    defeaturize_rir,
    load_checkpoint,
    rir_feature,
    sample,
    speech_feature,
    train,
)
from .metrics import blind_rt60, edc, rir_delta, srmr
from .rir import Rir
from .speech import synth_speech
from .wpe import wpe_dereverb

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
DEREVERB_METHODS = ("none", "wpe", "flow")
RIR_METHODS = ("flow", "oracle", "mean")
DEREVERB_COLUMNS = (("srmr", "SRMR"), ("rt60_ms", "RT60 (ms)"), ("rte_ms", "RTE (ms)"))
RIR_COLUMNS = (("delta_rt60_ms", "ΔRT60 (ms)"), ("delta_drr_db", "ΔDRR (dB)"), ("delta_edt_ms", "ΔEDT (ms)"))
CONVENTIONS = ("dereverberation metrics use each file at its full duration; "
               "RIR metrics use fixed 2.56 s windows and the central 2.56 s of the reverberant input; "
               "SRMR is the original (non-normalized) ratio; speech RT60 is a classical blind decay-rate estimate")


def item_seed(seed, item_id):
    """Stable 32-bit seed for one item."""
    return int(hashlib.sha256(f"{seed}:{item_id}".encode()).hexdigest()[:8], 16)


# --------------------------------------------------------------------------- training


def training_pairs(manifest: Manifest, kind, augment=1, seed=0):
    """Feature pairs from the train split only.

    Each train item gives its stored pair plus ``augment - 1`` extra pairs
    made by convolving freshly generated synthetic utterances with the
    item's RIR. Returns ``(pairs, ids)``; ``ids`` lists the contributing items.
    """
    if augment < 1:
        raise ConfigError("augment must be >= 1")
    pairs, ids = [], []
    for item in manifest.train:
        rir = manifest.load_rir(item)
        clean = manifest.load_clean(item)
        rev = manifest.load_reverberant(item)
        cleans, revs = [clean], [rev]
        rng = np.random.default_rng(item_seed(seed, item.id))
        for _ in range(augment - 1):
            x = synth_speech(len(clean) / SAMPLE_RATE, SAMPLE_RATE, rng)
            cleans.append(x)
            revs.append(AudioBuffer(convolve(x, rir.h).samples[: len(x)], SAMPLE_RATE))
        target_rir = rir_feature(rir) if kind == "rir_estimation" else None
        for x, y in zip(cleans, revs):
            target = target_rir if target_rir is not None else speech_feature(x)
            pairs.append((speech_feature(y), target))
        ids.append(item.id)
    return pairs, ids


def train_flow(manifest: Manifest, kind, cfg=None):
    """Train a flow model for ``kind`` on the manifest's train split.

    Returns ``(model, task)``. Normalization stats come from the same
    train-only pairs; the contributing ids are audited against the test split.
    """
    cfg = cfg or DEFAULTS
    task = FlowTask(kind)
    pairs, ids = training_pairs(manifest, kind, cfg["flow"]["augment"], cfg["flow"]["seed"])
    if not pairs:
        raise ConfigError("manifest has no train items")
    leaked = set(ids) & {it.id for it in manifest.test}
    if leaked:
        raise ConfigError(f"test items in training set: {sorted(leaked)[:3]}")
    log.info("flow %s: training on %d pairs from ids %s", kind, len(pairs), ",".join(ids))
    task.fit([c for c, _ in pairs], [x for _, x in pairs], ids)
    model = train(task, pairs, train_config(cfg))
    return model, task


# --------------------------------------------------------------------------- inference


def flow_dereverb(model, task: FlowTask, buffer: AudioBuffer, steps=32, seed=0, cfg_scale=1.0) -> AudioBuffer:
    """Dereverberate by predicting the clean log-mel feature and applying the
    implied per-band, per-chunk attenuation to the STFT magnitude.

    Gains are interpolated across chunk centres, capped at unity and
    spread from mel bands to FFT bins through the filterbank.
    """
    if task.kind != "dereverb":
        raise ConfigError(f"checkpoint is for {task.kind!r}, not dereverb")
    c_raw = speech_feature(buffer)
    pred = task.denorm_x(sample(model, task.norm_c(c_raw), steps, seed, cfg_scale))
    log_gain = 0.5 * (pred - c_raw).reshape(N_CHUNKS, N_MELS)
    log_gain = np.minimum(log_gain, 0.0)
    spec = stft(buffer, FFT_SIZE, HOP)
    n_frames = spec.n_frames
    centres = (np.arange(N_CHUNKS) + 0.5) / N_CHUNKS * n_frames
    frame_gain = interp1d(centres, log_gain, axis=0, bounds_error=False,
                          fill_value=(log_gain[0], log_gain[-1]))(np.arange(n_frames))
    fb = mel_filterbank(N_MELS, FFT_SIZE, SAMPLE_RATE)
    weight = fb.sum(0)
    bin_gain = np.exp(frame_gain @ fb / np.where(weight > 0, weight, 1.0))
    return istft(spec.with_frames(spec.frames * bin_gain))


def estimate_rir(model, task: FlowTask, buffer: AudioBuffer, steps=32, seed=0, cfg_scale=1.0) -> Rir:
    if task.kind != "rir_estimation":
        raise ConfigError(f"checkpoint is for {task.kind!r}, not rir_estimation")
    c = task.norm_c(speech_feature(buffer))
    f = task.denorm_x(sample(model, c, steps, seed, cfg_scale))
    return defeaturize_rir(f, seed=seed)


# --------------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    kind: str
    methods: list
    per_item: list
    aggregates: dict
    config_snapshot: dict
    failures: list = field(default_factory=list)
    tool_version: str = __version__
    created: str = ""

    def to_dict(self):
        return {
            "header": {
                "schema_version": REPORT_SCHEMA_VERSION,
                "tool_version": self.tool_version,
                "created": self.created,
                "kind": self.kind,
                "conventions": CONVENTIONS,
            },
            "methods": list(self.methods),
            "per_item": self.per_item,
            "aggregates": self.aggregates,
            "failures": self.failures,
            "config_snapshot": self.config_snapshot,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def columns(self):
        return DEREVERB_COLUMNS if self.kind == "dereverb" else RIR_COLUMNS

    def markdown(self):
        cols = self.columns()
        out = io.StringIO()
        out.write(f"| Method | {' | '.join(c[1] for c in cols)} |\n")
        out.write("|---" * (len(cols) + 1) + "|\n")
        for m in self.methods:
            agg = self.aggregates.get(m, {})
            cells = ["n/a" if agg.get(k) is None else f"{agg[k]:.2f}" for k, _ in cols]
            out.write(f"| {m} | {' | '.join(cells)} |\n")
        if self.failures:
            out.write(f"\n{len(self.failures)} item/method pair(s) failed; see the JSON report.\n")
        return out.getvalue()


def aggregate(per_item, methods, keys):
    """Arithmetic mean of each metric per method over items that have it."""
    out = {}
    for m in methods:
        rows = [r for r in per_item if r["method"] == m]
        agg = {}
        for k in keys:
            vals = [r[k] for r in rows if r.get(k) is not None]
            agg[k] = math.fsum(vals) / len(vals) if vals else None
        agg["n"] = len(rows)
        out[m] = agg
    return out


def report_schema():
    return json.loads(resources.files("reverbkit").joinpath("schemas/eval_report.schema.json").read_text())


def validate_report(doc):
    jsonschema.validate(doc, report_schema())


def write_report(report: EvalReport, out_dir, stem=None):
    """Validate and write ``<stem>.json`` and ``<stem>.md``; returns the JSON path."""
    report.created = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    doc = report.to_dict()
    validate_report(doc)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{report.kind}_report"
    _atomic_write_text(out_dir / f"{stem}.json", report.to_json())
    _atomic_write_text(out_dir / f"{stem}.md", report.markdown())
    return out_dir / f"{stem}.json"


def _map(fn, args, jobs):
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(fn, args))
    return [fn(a) for a in args]


def _ms(x):
    return None if x is None else 1000.0 * x


# --------------------------------------------------------------------------- dereverberation


def _dereverb_item(args):
    item_id, inp, ref, methods, model, task, cfg = args
    rows, failures = [], []
    bcfg = blind_config(cfg)
    try:
        ref_rt = blind_rt60(ref, bcfg)
    except ReverbKitError as e:
        ref_rt = None
        failures.append({"id": item_id, "method": "reference", "error": f"{type(e).__name__}: {e}"})
    for m in methods:
        try:
            if m == "none":
                out = inp
            elif m == "wpe":
                out = wpe_dereverb(inp, wpe_config(cfg))
            else:
                s = cfg["sample"]
                out = flow_dereverb(model, task, inp, s["steps"], item_seed(s["seed"], item_id), s["cfg_scale"])
            row = {"id": item_id, "method": m, "rt60_source": "blind", "srmr": None, "rt60_ms": None, "rte_ms": None}
            errs = []
            for key, fn in (("srmr", lambda: srmr(out)), ("rt60_ms", lambda: _ms(blind_rt60(out, bcfg)))):
                try:
                    row[key] = float(fn())
                except ReverbKitError as e:
                    errs.append(f"{key}: {type(e).__name__}: {e}")
            if row["rt60_ms"] is not None and ref_rt is not None:
                row["rte_ms"] = abs(row["rt60_ms"] - 1000.0 * ref_rt)
            rows.append(row)
            failures.extend({"id": item_id, "method": m, "error": e} for e in errs)
        except ReverbKitError as e:
            failures.append({"id": item_id, "method": m, "error": f"{type(e).__name__}: {e}"})
    return rows, failures


def run_dereverb_eval(manifest: Manifest, methods=DEREVERB_METHODS, out_dir=None, checkpoint=None,
                      cfg=None, source="reverberant", split="test") -> EvalReport:
    """SRMR, blind RT60 and RTE per test item and method.

    ``source="clean"`` feeds the clean files instead (estimator self-check).
    ``split=None`` evaluates every item.
    """
    cfg = cfg or DEFAULTS
    methods = list(methods)
    unknown = set(methods) - set(DEREVERB_METHODS)
    if unknown:
        raise ConfigError(f"unknown dereverberation method(s) {sorted(unknown)}")
    model = task = None
    if "flow" in methods:
        if checkpoint is None:
            raise ConfigError("method flow needs a trained dereverb checkpoint")
        model, task, _ = load_checkpoint(checkpoint)
        if task.kind != "dereverb":
            raise ConfigError(f"checkpoint {checkpoint} is for {task.kind!r}, not dereverb")
    args = []
    for item in manifest.items if split is None else manifest.split(split):
        clean = manifest.load_clean(item)
        inp = clean if source == "clean" else manifest.load_reverberant(item)
        args.append((item.id, inp, clean, methods, model, task, cfg))
    results = _map(_dereverb_item, args, cfg["eval"]["jobs"])
    per_item = [r for rows, _ in results for r in rows]
    failures = [f for _, fs in results for f in fs]
    report = EvalReport("dereverb", methods, per_item, aggregate(per_item, methods, [k for k, _ in DEREVERB_COLUMNS]),
                        snapshot(cfg), failures)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


# --------------------------------------------------------------------------- RIR estimation


def _rir_item(args):
    item_id, rev, ref, methods, model, task, cfg = args
    rows, failures = [], []
    s = cfg["sample"]
    seed = item_seed(s["seed"], item_id)
    for m in methods:
        try:
            if m == "flow":
                pred = estimate_rir(model, task, rev, s["steps"], seed, s["cfg_scale"])
            elif m == "oracle":
                pred = defeaturize_rir(rir_feature(ref), seed=seed)
            else:
                pred = defeaturize_rir(task.x_mean, seed=seed)
            d = rir_delta(pred, ref)
            rows.append({
                "id": item_id, "method": m, "rt60_source": "oracle", "rt60_method": d.rt60_method,
                "rt60_ms": _ms(d.rt60), "edt_ms": _ms(d.edt), "drr_db": d.drr,
                "delta_rt60_ms": _ms(d.delta_rt60), "delta_drr_db": d.delta_drr, "delta_edt_ms": _ms(d.delta_edt),
                "projected": bool(pred.meta.get("projected", False)),
            })
        except ReverbKitError as e:
            failures.append({"id": item_id, "method": m, "error": f"{type(e).__name__}: {e}"})
    return rows, failures


def run_rir_eval(manifest: Manifest, checkpoint, methods=RIR_METHODS, out_dir=None, cfg=None,
                 split="test") -> EvalReport:
    """Predict each test item's RIR from its reverberant audio and report
    absolute RT60/DRR/EDT errors against the reference.

    ``oracle`` is the featurize/defeaturize roundtrip of the reference (the
    floor any feature-space method can reach); ``mean`` always predicts the
    train-split mean feature.
    """
    cfg = cfg or DEFAULTS
    methods = list(methods)
    unknown = set(methods) - set(RIR_METHODS)
    if unknown:
        raise ConfigError(f"unknown RIR method(s) {sorted(unknown)}")
    if checkpoint is None:
        raise ConfigError("RIR evaluation needs a trained rir_estimation checkpoint")
    if isinstance(checkpoint, tuple):
        model, task = checkpoint
    else:
        model, task, _ = load_checkpoint(checkpoint)
    if task.kind != "rir_estimation":
        raise ConfigError(f"checkpoint is for {task.kind!r}, not rir_estimation")
    items = manifest.items if split is None else manifest.split(split)
    args = [(it.id, manifest.load_reverberant(it), manifest.load_rir(it), methods, model, task, cfg)
            for it in items]
    results = _map(_rir_item, args, cfg["eval"]["jobs"])
    per_item = [r for rows, _ in results for r in rows]
    failures = [f for _, fs in results for f in fs]
    report = EvalReport("rir", methods, per_item, aggregate(per_item, methods, [k for k, _ in RIR_COLUMNS]),
                        snapshot(cfg), failures)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


# --------------------------------------------------------------------------- plot data


def export_edc_plotdata(rir_paths, out_csv):
    """Long-format ``rir_id,t_seconds,edc_db`` rows for each readable RIR.

    Unreadable or degenerate files are skipped; their errors are returned as
    ``[(path, message), ...]`` and the CSV holds everything else.
    """
    errors = []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rir_id", "t_seconds", "edc_db"])
    for p in rir_paths:
        p = Path(p)
        try:
            curve = edc(Rir(read_wav(p)))
        except (ReverbKitError, OSError) as e:
            errors.append((str(p), f"{type(e).__name__}: {e}"))
            continue
        for t, v in zip(curve.times, curve.values_db):
            w.writerow([p.stem, repr(float(t)), repr(float(v))])
    _atomic_write_text(out_csv, buf.getvalue())
    return errors
