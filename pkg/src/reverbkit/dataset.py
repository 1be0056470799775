"""Synthetic corpus construction and manifests.

Every item is a simulated room, its RIR, a 2.56 s clean utterance and the
reverberant mix ``convolve(clean, rir)`` cut to the clean length. Items are
generated from independent per-item seeds, so results do not depend on
``jobs`` or on processing order.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer, convolve, read_wav, write_wav
from .errors import ConfigError, FormatError, IoError, RateError
from .metrics import ANALYSIS_WINDOW_S, rir_report
from .rir import CorpusConfig, Rir, RoomSpec, eyring_t60, item_rngs, sabine_t60, sample_room, simulate_rir
from .speech import synth_speech

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass
class ManifestItem:
    id: str
    room: dict
    rir_path: str
    clean_path: str
    reverberant_path: str
    split: str


@dataclass
class Manifest:
    items: list
    seed: int
    clean_source: str = "synthetic"
    schema_version: int = SCHEMA_VERSION
    root: Path = field(default=Path("."), compare=False)

    def split(self, name):
        return [it for it in self.items if it.split == name]

    @property
    def train(self):
        return self.split("train")

    @property
    def test(self):
        return self.split("test")

    def path(self, rel):
        return self.root / rel

    def load_rir(self, item: ManifestItem) -> Rir:
        room = RoomSpec.from_dict(item.room)
        buf = read_wav(self.path(item.rir_path))
        meta = json.loads(self.path(item.rir_path).with_suffix(".json").read_text())
        return Rir(buf, room, meta.get("direct_delay"), {"id": item.id})

    def load_clean(self, item: ManifestItem) -> AudioBuffer:
        return read_wav(self.path(item.clean_path))

    def load_reverberant(self, item: ManifestItem) -> AudioBuffer:
        return read_wav(self.path(item.reverberant_path))

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "clean_source": self.clean_source,
            "items": [vars(it) for it in self.items],
        }


def _atomic_write_text(path, text):
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def assign_splits(ids, seed, test_fraction=0.2):
    """Exact train/test split from a keyed hash of ``(seed, id)``.

    The ``round(test_fraction * n)`` ids with the smallest hashes go to test.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    keys = [hashlib.sha256(f"{seed}:{i}".encode()).hexdigest() for i in ids]
    n_test = int(round(test_fraction * len(ids)))
    order = sorted(range(len(ids)), key=lambda k: keys[k])
    test = set(order[:n_test])
    return ["test" if k in test else "train" for k in range(len(ids))]


def _fit_length(x, n):
    if len(x) >= n:
        s = (len(x) - n) // 2
        return x[s : s + n]
    return np.pad(x, (0, n - len(x)))


def list_wavs(wav_dir):
    wav_dir = Path(wav_dir)
    if not wav_dir.is_dir():
        raise ConfigError(f"clean source {wav_dir} is not a directory")
    files = sorted(p for p in wav_dir.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise ConfigError(f"no WAV files in {wav_dir}")
    return files


def _make_item(args):
    index, rng, config, clean_files, segment_s, out_dir, encoding = args
    item_id = f"item{index:05d}"
    room = sample_room(rng, config)
    rir = simulate_rir(room)
    n = int(round(segment_s * SAMPLE_RATE))
    if clean_files is None:
        clean = synth_speech(segment_s, SAMPLE_RATE, rng).samples
    else:
        path = clean_files[int(rng.integers(len(clean_files)))]
        buf = read_wav(path)
        if buf.sample_rate != SAMPLE_RATE:
            raise RateError(f"{path}: {buf.sample_rate} Hz, need {SAMPLE_RATE} Hz (no resampling is done)")
        clean = _fit_length(buf.samples, n)
    # quantize to the storage format first so stored files reconvolve exactly
    h = rir.h.samples.astype(np.float32).astype(np.float64)
    clean = clean.astype(np.float32).astype(np.float64)
    if encoding == "pcm16":
        from .audio import quantize_pcm16

        clean = quantize_pcm16(clean) / 32768.0
    rev = convolve(AudioBuffer(clean, SAMPLE_RATE), AudioBuffer(h, SAMPLE_RATE)).samples[:n]

    paths = {k: f"{k}/{item_id}.wav" for k in ("rir", "clean", "reverberant")}
    write_wav(AudioBuffer(h, SAMPLE_RATE), out_dir / paths["rir"], "float32")
    write_wav(AudioBuffer(clean, SAMPLE_RATE), out_dir / paths["clean"], encoding)
    write_wav(AudioBuffer(rev, SAMPLE_RATE), out_dir / paths["reverberant"], "float32")

    stored = Rir(AudioBuffer(h, SAMPLE_RATE), room, rir.direct_delay, {})
    try:
        rep = rir_report(stored, ANALYSIS_WINDOW_S).to_dict()
    except Exception as e:  # degenerate rooms keep their audio; the sidecar says why
        rep = {"error": str(e)}
    sidecar = {
        "id": item_id,
        "room": room.to_dict(),
        "direct_delay": rir.direct_delay,
        "images": rir.meta.get("images"),
        "eyring_t60": eyring_t60(room),
        "sabine_t60": sabine_t60(room),
        "oracle": rep,
    }
    _atomic_write_text(out_dir / f"rir/{item_id}.json", json.dumps(sidecar, indent=1, sort_keys=True))
    return item_id, room.to_dict(), paths


def build_dataset(n_items, seed, out_dir, clean_source="synthetic", corpus: CorpusConfig = CorpusConfig(),
                  test_fraction=0.2, segment_s=ANALYSIS_WINDOW_S, encoding="float32", jobs=1) -> Manifest:
    """Simulate ``n_items`` rooms and write audio, sidecars and the manifest.

    ``clean_source`` is ``"synthetic"`` or a directory of mono 16 kHz WAVs.
    """
    if n_items < 1:
        raise ConfigError("n_items must be >= 1")
    out_dir = Path(out_dir)
    clean_files = None if clean_source == "synthetic" else list_wavs(clean_source)
    try:
        for sub in ("rir", "clean", "reverberant"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {out_dir}: {e}") from e
    jobs_args = [(i, rng, corpus, clean_files, segment_s, out_dir, encoding)
                 for i, rng in enumerate(item_rngs(n_items, seed))]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            made = list(ex.map(_make_item, jobs_args))
    else:
        made = [_make_item(a) for a in jobs_args]
    splits = assign_splits([m[0] for m in made], seed, test_fraction)
    items = [ManifestItem(i, room, p["rir"], p["clean"], p["reverberant"], s)
             for (i, room, p), s in zip(made, splits)]
    source = "synthetic" if clean_files is None else "wav-dir"
    manifest = Manifest(items, seed, source, root=out_dir)
    _atomic_write_text(out_dir / MANIFEST_NAME, json.dumps(manifest.to_dict(), indent=1, sort_keys=True))
    return manifest


def load_manifest(path) -> Manifest:
    """Read and validate a manifest; fails before returning if anything is missing."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise IoError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest {path} is not valid JSON: {e}") from e
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"manifest schema {doc.get('schema_version')!r} != supported {SCHEMA_VERSION}")
    try:
        items = [ManifestItem(**it) for it in doc["items"]]
    except (KeyError, TypeError) as e:
        raise FormatError(f"malformed manifest item: {e}") from e
    ids = [it.id for it in items]
    if len(set(ids)) != len(ids):
        raise FormatError("manifest ids are not unique")
    root = path.parent
    missing = [str(root / p) for it in items for p in (it.rir_path, it.clean_path, it.reverberant_path)
               if not (root / p).is_file()]
    if missing:
        raise IoError(f"{len(missing)} manifest file(s) missing, e.g. {missing[0]}")
    bad = [it.id for it in items if it.split not in ("train", "test")]
    if bad:
        raise FormatError(f"invalid split label for {bad[0]}")
    return Manifest(items, doc["seed"], doc.get("clean_source", "synthetic"), doc["schema_version"], root)
