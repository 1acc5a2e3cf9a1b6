"""Corpus generation, the MFCC pitch-invariance study and the bag-of-features baseline."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .dsp.audio import AudioBuffer, load_audio, write_wav
from .dsp.cqt import HOP
from .dsp.features import cluster_distances, detect_silence, mfcc
from .dsp.synth import INSTRUMENTS, N_PITCHES, NUANCES_DB, instrument_spec, synth_tone
from .forest import bag_of_features, forest_predict, forest_train
from .training import (
    DatasetError, DatasetManifest, Entry, accuracy_report, eval_windows, excerpt_frames, silent_fraction,
    write_manifest,
)

log = logging.getLogger(__name__)

DISTANCE_COLUMNS = ("grouping", "group_id", "decile10", "q25", "median", "q75", "decile90", "n_pairs")
GROUPINGS = ("instrument", "instrument+pitch", "instrument+nuance")


def is_test_pitch(pitch_index: int) -> bool:
    # every fourth pitch is held out, so test notes sit between training notes
    return pitch_index % 4 == 2


def synth_corpus(out_dir, seed: int = 0, n_pitches: int = N_PITCHES, nuances=tuple(NUANCES_DB),
                 instruments=None, duration: float = 4.5) -> DatasetManifest:
    """Write one float WAV per (instrument, pitch, nuance) and ``manifest.csv``.

    Each note draws from its own generator keyed by the seed and the note's
    indices, so the corpus does not depend on generation order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    instruments = range(len(INSTRUMENTS)) if instruments is None else instruments
    entries = []
    for i in instruments:
        name = INSTRUMENTS[i].name
        for p in range(n_pitches):
            for j, nuance in enumerate(nuances):
                spec = instrument_spec(i, p, NUANCES_DB[nuance], duration)
                audio = synth_tone(spec, np.random.default_rng([seed, i, p, j]))
                path = out / f"{i}_{name.replace(' ', '_').rstrip('.')}_p{p:02d}_{nuance}.wav"
                write_wav(path, audio.samples, audio.sample_rate, bits=32)
                split = "test" if is_test_pitch(p) else "train"
                entries.append(Entry(path, i, split, None, {"instrument": name, "pitch": str(p), "nuance": nuance}))
    manifest = DatasetManifest(entries, [INSTRUMENTS[i].name for i in instruments])
    write_manifest(out / "manifest.csv", manifest, ("instrument", "pitch", "nuance"))
    return manifest


def note_mfcc(audio: AudioBuffer, n_keep: int = 12) -> np.ndarray:
    """One vector per note: the frame average of its MFCC."""
    return mfcc(audio, n_keep).mean(axis=0)


def mfcc_distances(manifest: DatasetManifest, n_keep: int = 12):
    """Distance summaries for each grouping; returns ``(rows, per_grouping_distances)``."""
    required = ("instrument", "pitch", "nuance")
    for e in manifest.entries:
        missing = [c for c in required if not e.meta.get(c)]
        if missing:
            raise DatasetError(f"{e.path}: missing metadata columns {missing}")
    vectors = np.stack([note_mfcc(load_audio(e.path), n_keep) for e in manifest.entries])
    keys = {
        "instrument": [e.meta["instrument"] for e in manifest.entries],
        "instrument+pitch": [f"{e.meta['instrument']}|{e.meta['pitch']}" for e in manifest.entries],
        "instrument+nuance": [f"{e.meta['instrument']}|{e.meta['nuance']}" for e in manifest.entries],
    }
    rows, groups = [], {}
    for grouping in GROUPINGS:
        result = cluster_distances(vectors, keys[grouping])
        groups[grouping] = result
        for gid, summary in result.items():
            rows.append({"grouping": grouping, "group_id": gid, **{k: summary[k] for k in DISTANCE_COLUMNS[2:]}})
    return rows, groups


def invariance_ratios(groups) -> dict[str, float]:
    """Per instrument: median all-note distance over the median distance among same-pitch notes."""
    out = {}
    for inst, summary in groups["instrument"].items():
        same = [s["distances"] for g, s in groups["instrument+pitch"].items() if g.split("|")[0] == inst]
        out[inst] = summary["median"] / float(np.median(np.concatenate(same)))
    return out


def write_rows(path, rows, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def excerpt_features(entries, silence_db: float = -60.0):
    """Bag-of-features for every kept half-overlapping 3 s window; returns ``(X, labels)``."""
    X, y = [], []
    for e in entries:
        audio = load_audio(e.path)
        mask = detect_silence(audio, silence_db)
        n = excerpt_frames(audio.sample_rate)
        for start in eval_windows(len(audio), audio.sample_rate):
            if silent_fraction(mask, int(round(start / HOP))) >= 0.5:
                continue
            X.append(bag_of_features(AudioBuffer(audio.samples[start : start + n], audio.sample_rate)))
            y.append(e.label)
    return np.array(X).reshape(-1, 70), np.array(y, dtype=int)


def run_baseline(manifest: DatasetManifest, seed: int = 0, silence_db: float = -60.0):
    """Train the forest on train-split excerpts and score test-split excerpts."""
    manifest.validate(len(manifest.class_names))
    X, y = excerpt_features(manifest.split("train"), silence_db)
    Xt, yt = excerpt_features(manifest.split("test"), silence_db)
    model = forest_train(X, y, seed=seed, n_classes=len(manifest.class_names))
    pred, _ = forest_predict(model, Xt)
    train_pred, _ = forest_predict(model, X)
    log.info("forest train accuracy %.4f", np.mean(train_pred == y))
    return accuracy_report(yt, pred, manifest.class_names), model
