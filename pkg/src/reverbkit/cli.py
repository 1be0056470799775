"""Command-line entry point.

Exit codes: 0 success, 1 partial (per-item or per-file) failures,
2 configuration or input errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .audio import AudioBuffer, convolve, read_wav, write_wav
from .config import corpus_config, dump_ini, load_config, set_value, snapshot, wpe_config
from .dataset import build_dataset, load_manifest
from .errors import ConfigError, FormatError, IoError, RateError, ReverbKitError, ShapeError, UnsupportedError
from .flow import load_checkpoint, save_checkpoint
from .harness import (
    estimate_rir,
    export_edc_plotdata,
    flow_dereverb,
    run_dereverb_eval,
    run_rir_eval,
    train_flow,
)
from .metrics import rir_delta, rir_report, speech_report
from .rir import Rir, RoomSpec, simulate_rir
from .wpe import wpe_dereverb

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2
_CONFIG_ERRORS = (ConfigError, FormatError, IoError, RateError, UnsupportedError, ShapeError)


def _out(args, name):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _print_json(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


def _room_from_args(args):
    if args.room:
        try:
            return RoomSpec.from_dict(json.loads(Path(args.room).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read room file {args.room}: {e}") from e
    if not (args.dims and args.source and args.receiver):
        raise ConfigError("give --room FILE or all of --dims, --source, --receiver")
    alpha = args.absorption if len(args.absorption) > 1 else args.absorption[0]
    return RoomSpec(tuple(args.dims), alpha, tuple(args.source), tuple(args.receiver))


def cmd_simulate_rir(args, cfg):
    room = _room_from_args(args)
    rir = simulate_rir(room)
    path = _out(args, "rir.wav")
    write_wav(rir.h, path)
    doc = {"room": room.to_dict(), "direct_delay": rir.direct_delay, **rir.meta}
    path.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(path)
    return EXIT_OK


def cmd_build_dataset(args, cfg):
    d = cfg["dataset"]
    m = build_dataset(d["n_items"], d["seed"], args.out, d["clean_source"], corpus_config(cfg),
                      d["test_fraction"], d["segment_s"], d["encoding"], cfg["eval"]["jobs"])
    print(f"{len(m.items)} items ({len(m.train)} train / {len(m.test)} test) -> {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def cmd_convolve(args, cfg):
    y = convolve(read_wav(args.input), read_wav(args.rir))
    if args.truncate:
        y = AudioBuffer(y.samples[: len(read_wav(args.input))], y.sample_rate)
    write_wav(y, args.output)
    return EXIT_OK


def cmd_dereverb(args, cfg):
    x = read_wav(args.input)
    if args.method == "wpe":
        y = wpe_dereverb(x, wpe_config(cfg))
    else:
        if not args.checkpoint:
            raise ConfigError("--method flow needs --checkpoint")
        model, task, _ = load_checkpoint(args.checkpoint)
        s = cfg["sample"]
        y = flow_dereverb(model, task, x, s["steps"], s["seed"], s["cfg_scale"])
    write_wav(y, args.output)
    return EXIT_OK


def cmd_train_flow(args, cfg):
    kind = {"dereverb": "dereverb", "rir": "rir_estimation"}[args.task]
    manifest = load_manifest(args.manifest)
    model, task = train_flow(manifest, kind, cfg)
    path = _out(args, f"flow_{args.task}.json")
    save_checkpoint(model, task, path, {"config": snapshot(cfg), "manifest_seed": manifest.seed})
    print(f"{path} hash={model.hash()} final_loss={model.loss_history[-1]:.4f}")
    return EXIT_OK


def cmd_estimate_rir(args, cfg):
    model, task, _ = load_checkpoint(args.checkpoint)
    s = cfg["sample"]
    rir = estimate_rir(model, task, read_wav(args.input), s["steps"], s["seed"], s["cfg_scale"])
    path = Path(args.output) if args.output else _out(args, "estimated_rir.wav")
    write_wav(rir.h, path)
    _print_json({"output": str(path), "projected": rir.meta["projected"], **rir_report(rir).to_dict()})
    return EXIT_OK


def _load_rir(path):
    return Rir(read_wav(path))


def cmd_metrics(args, cfg):
    if args.kind == "rir":
        rep = rir_report(_load_rir(args.input))
    elif args.kind == "speech":
        ref = read_wav(args.reference) if args.reference else None
        rep = speech_report(read_wav(args.input), ref)
    else:
        if not args.reference:
            raise ConfigError("metrics delta needs --reference")
        rep = rir_delta(_load_rir(args.input), _load_rir(args.reference))
    _print_json(rep.to_dict())
    return EXIT_OK


def cmd_eval(args, cfg):
    manifest = load_manifest(args.manifest)
    if args.kind == "dereverb":
        methods = args.methods or ["none", "wpe"] + (["flow"] if args.checkpoint else [])
        report = run_dereverb_eval(manifest, methods, args.out, args.checkpoint, cfg)
    else:
        report = run_rir_eval(manifest, args.checkpoint, args.methods or ["flow", "oracle", "mean"], args.out, cfg)
    print(report.markdown())
    return EXIT_PARTIAL if report.failures else EXIT_OK


def cmd_export_edc(args, cfg):
    csv_path = Path(args.csv) if args.csv else _out(args, "edc.csv")
    errors = export_edc_plotdata(args.rirs, csv_path)
    for path, msg in errors:
        print(f"error: {path}: {msg}", file=sys.stderr)
    print(csv_path)
    return EXIT_PARTIAL if errors else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="reverbkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, help="seed for dataset, training and sampling")
    p.add_argument("--config", help="INI file with module settings")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes for per-item work")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate-rir", help="image-source RIR for a shoebox room")
    s.add_argument("--room", help="room JSON (as written in dataset sidecars)")
    s.add_argument("--dims", type=float, nargs=3)
    s.add_argument("--absorption", type=float, nargs="+", default=[0.3])
    s.add_argument("--source", type=float, nargs=3)
    s.add_argument("--receiver", type=float, nargs=3)
    s.set_defaults(fn=cmd_simulate_rir)

    s = sub.add_parser("build-dataset", help="simulate a corpus and write a manifest")
    s.add_argument("--n-items", type=int)
    s.add_argument("--clean-source", help="'synthetic' or a directory of 16 kHz WAVs")
    s.set_defaults(fn=cmd_build_dataset)

    s = sub.add_parser("convolve", help="convolve a signal with an RIR")
    s.add_argument("input")
    s.add_argument("rir")
    s.add_argument("output")
    s.add_argument("--truncate", action="store_true", help="cut the result to the input length")
    s.set_defaults(fn=cmd_convolve)

    s = sub.add_parser("dereverb", help="dereverberate one file")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--method", choices=["wpe", "flow"], default="wpe")
    s.add_argument("--checkpoint")
    s.set_defaults(fn=cmd_dereverb)

    s = sub.add_parser("train-flow", help="train a flow model on a manifest's train split")
    s.add_argument("--task", choices=["dereverb", "rir"], required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--steps", type=int)
    s.set_defaults(fn=cmd_train_flow)

    s = sub.add_parser("estimate-rir", help="estimate an RIR from reverberant speech")
    s.add_argument("input")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--output")
    s.set_defaults(fn=cmd_estimate_rir)

    s = sub.add_parser("metrics", help="acoustic metrics as JSON")
    s.add_argument("kind", choices=["rir", "speech", "delta"])
    s.add_argument("input")
    s.add_argument("--reference")
    s.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("eval", help="batch evaluation over a manifest's test split")
    s.add_argument("kind", choices=["dereverb", "rir"])
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--methods", nargs="+")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("export-edc", help="EDC plot data as long-format CSV")
    s.add_argument("rirs", nargs="+")
    s.add_argument("--csv", help="output CSV (default <out>/edc.csv)")
    s.set_defaults(fn=cmd_export_edc)

    s = sub.add_parser("show-config", help="print the effective configuration as INI")
    s.set_defaults(fn=lambda args, cfg: print(dump_ini(cfg), end="") or EXIT_OK)
    return p


def _effective_config(args):
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        for section in ("dataset", "flow", "sample"):
            set_value(cfg, section, "seed", args.seed)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        set_value(cfg, "eval", "jobs", args.jobs)
    if getattr(args, "n_items", None) is not None:
        set_value(cfg, "dataset", "n_items", args.n_items)
    if getattr(args, "clean_source", None) is not None:
        set_value(cfg, "dataset", "clean_source", args.clean_source)
    if getattr(args, "steps", None) is not None:
        set_value(cfg, "flow", "steps", args.steps)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _effective_config(args)
        return args.fn(args, cfg)
    except _CONFIG_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ReverbKitError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
