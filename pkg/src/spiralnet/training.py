"""Training protocol: balanced on-the-fly excerpt batches, Adam, epoch-level early stopping."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .architectures import NetworkSpec
from .dsp.audio import SAMPLE_RATE, load_audio
from .dsp.cqt import HOP, N_FRAMES, Spectrogram, bin_frequencies, cqt_frames, weight_magnitudes
from .dsp.features import SILENCE_DB, detect_silence
from .nn import Adam, Network, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

EXCERPT_SECONDS = 3.0
EVAL_HOP_SECONDS = 1.5
N_CLASSES = 8


class DatasetError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class Entry:
    path: Path
    label: int
    split: str
    artist: str | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    entries: list[Entry]
    class_names: list[str]

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def validate(self, n_classes: int = N_CLASSES) -> None:
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise DatasetError(f"{e.path}: split must be train or test, got {e.split!r}")
            if not 0 <= e.label < n_classes:
                raise DatasetError(f"{e.path}: label {e.label} outside [0, {n_classes})")
        train = self.split("train")
        missing = set(range(n_classes)) - {e.label for e in train}
        if missing:
            raise DatasetError(f"classes absent from the train split: {sorted(missing)}")
        train_paths = {e.path.resolve() for e in train}
        leaked = [e.path for e in self.split("test") if e.path.resolve() in train_paths]
        if leaked:
            raise DatasetError(f"recordings in both splits: {leaked[:3]}")
        train_artists = {e.artist for e in train if e.artist}
        shared = {e.artist for e in self.split("test") if e.artist} & train_artists
        if shared:
            raise DatasetError(f"artists in both splits: {sorted(shared)}")


MANIFEST_COLUMNS = ("path", "label", "split")


def read_manifest(path) -> DatasetManifest:
    """CSV with columns ``path,label,split`` and optional ``artist``, ``instrument`` and free metadata.

    Relative paths resolve against the manifest's directory. Class names come
    from the ``instrument`` column when present.
    """
    path = Path(path)
    entries = []
    names: dict[int, str] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DatasetError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            p = Path(row["path"])
            if not p.is_absolute():
                p = path.parent / p
            label = int(row["label"])
            meta = {k: v for k, v in row.items() if k not in ("path", "label", "split", "artist")}
            if row.get("instrument"):
                names.setdefault(label, row["instrument"])
            entries.append(Entry(p, label, row["split"].strip(), row.get("artist") or None, meta))
    n = max([-1, *names, *(e.label for e in entries)]) + 1
    return DatasetManifest(entries, [names.get(k, f"class{k}") for k in range(n)])


def write_manifest(path, manifest: DatasetManifest, extra_columns: tuple[str, ...] = ()) -> None:
    path = Path(path)
    cols = list(MANIFEST_COLUMNS) + (["artist"] if any(e.artist for e in manifest.entries) else []) + list(extra_columns)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for e in manifest.entries:
            try:
                rel = e.path.resolve().relative_to(path.parent.resolve())
            except ValueError:
                rel = e.path
            row = {"path": rel.as_posix(), "label": e.label, "split": e.split, "artist": e.artist or "", **e.meta}
            w.writerow([row.get(c, "") for c in cols])


@dataclass
class CachedFile:
    """Full-length CQT magnitudes and the CQT-aligned silence mask of one recording."""

    magnitudes: np.ndarray  # (frames, 96) float32
    silent: np.ndarray  # (frames,) bool
    n_samples: int
    sample_rate: int


class SpectrogramCache:
    """Computes each file's CQT once; excerpts are frame-aligned slices of it."""

    def __init__(self, silence_db: float = SILENCE_DB):
        self.silence_db = silence_db
        self._files: dict[Path, CachedFile] = {}
        self.bin_freqs = bin_frequencies()

    def get(self, path) -> CachedFile:
        path = Path(path)
        if path not in self._files:
            audio = load_audio(path)
            mag = np.abs(cqt_frames(audio.samples, audio.sample_rate)).astype(np.float32)
            self._files[path] = CachedFile(mag, detect_silence(audio, self.silence_db), len(audio), audio.sample_rate)
        return self._files[path]

    def excerpt(self, path, start_frame: int, n_frames: int = N_FRAMES) -> np.ndarray:
        """Weighted spectrogram of the 3 s window starting at sample ``start_frame * HOP``.

        The window's own frames are ``start_frame + 1 .. start_frame + n_frames``,
        matching the center crop applied to a standalone 3 s excerpt.
        """
        f = self.get(path)
        block = f.magnitudes[start_frame + 1 : start_frame + 1 + n_frames]
        if len(block) < n_frames:
            block = np.pad(block, ((0, n_frames - len(block)), (0, 0)))
        return weight_magnitudes(block, self.bin_freqs).astype(np.float32)

    def silent_fraction(self, path, start_frame: int, n_frames: int = N_FRAMES) -> float:
        return silent_fraction(self.get(path).silent, start_frame, n_frames)


def silent_fraction(mask: np.ndarray, start_frame: int, n_frames: int = N_FRAMES) -> float:
    """Share of silent frames in the window starting at ``start_frame``; frames past the end count as silent."""
    window = mask[start_frame + 1 : start_frame + 1 + n_frames]
    return (np.count_nonzero(window) + n_frames - len(window)) / n_frames


def excerpt_frames(sample_rate: int = SAMPLE_RATE) -> int:
    return int(round(EXCERPT_SECONDS * sample_rate))


class ExcerptSampler:
    """Uniform draws of non-silent 3 s windows per class from the train split."""

    def __init__(self, manifest: DatasetManifest, cache: SpectrogramCache, split: str = "train",
                 max_silent: float = 0.5):
        self.cache = cache
        self.candidates: dict[int, list[tuple[Path, int]]] = {}
        for e in manifest.split(split):
            f = cache.get(e.path)
            n_excerpt = excerpt_frames(f.sample_rate)
            if f.n_samples < n_excerpt:
                continue
            last = (f.n_samples - n_excerpt) // HOP
            for s in range(last + 1):
                if cache.silent_fraction(e.path, s) < max_silent:
                    self.candidates.setdefault(e.label, []).append((e.path, s))

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        options = self.candidates.get(k)
        if not options:
            raise DatasetError(f"class {k} has no 3 s non-silent excerpt in the train split")
        path, start = options[rng.integers(len(options))]
        return self.cache.excerpt(path, start)

    def batch(self, rng: np.random.Generator, batch_size: int = 32, n_classes: int = N_CLASSES):
        if batch_size % n_classes:
            raise ValueError("batch size must be a multiple of the class count")
        labels = np.repeat(np.arange(n_classes), batch_size // n_classes)
        rng.shuffle(labels)
        x = np.stack([self.sample(int(k), rng) for k in labels])
        return x, labels


def sample_excerpt(manifest: DatasetManifest, k: int, rng: np.random.Generator,
                   cache: SpectrogramCache | None = None) -> Spectrogram:
    cache = cache or SpectrogramCache()
    values = ExcerptSampler(manifest, cache).sample(k, rng)
    return Spectrogram(values, cache.bin_freqs, HOP / SAMPLE_RATE, weighted=True)


def normalize_batch(x: np.ndarray) -> np.ndarray:
    """Subtract the batch-wide mean and divide by the batch-wide standard deviation."""
    x64 = np.asarray(x, dtype=np.float64)
    mean = x64.mean()
    std = x64.std()
    if not std > 0:
        raise DegenerateBatchError("batch has zero variance")
    return ((x64 - mean) / std).astype(np.asarray(x).dtype)


def should_stop(history: list[float]) -> bool:
    """True once the latest epoch's mean loss failed to decrease."""
    return len(history) >= 2 and history[-1] >= history[-2]


def stopping_epoch(history: list[float]) -> int | None:
    for i in range(2, len(history) + 1):
        if should_stop(history[:i]):
            return i
    return None


@dataclass
class TrainConfig:
    epoch_size: int = 8192
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    max_epochs: int = 100
    silence_db: float = SILENCE_DB

    def __post_init__(self):
        if self.epoch_size % self.batch_size:
            raise ValueError("epoch size must be a multiple of the batch size")


@dataclass
class TrainResult:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    history: list[float]
    seconds: float
    stopped_early: bool


def output_classes(spec: NetworkSpec) -> int:
    dense = [l for l in spec.head if l.kind == "dense"]
    return int(dense[-1]["units"])


def _streams(seed: int):
    init, data, drop = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(data), np.random.default_rng(drop)


def train(spec: NetworkSpec, manifest: DatasetManifest, config: TrainConfig = TrainConfig(),
          cache: SpectrogramCache | None = None, on_epoch: Callable[[int, float], None] | None = None,
          checkpoint: str | Path | None = None) -> TrainResult:
    n_classes = output_classes(spec)
    manifest.validate(n_classes)
    cache = cache or SpectrogramCache(config.silence_db)
    sampler = ExcerptSampler(manifest, cache)
    for k in range(n_classes):
        if not sampler.candidates.get(k):
            raise DatasetError(f"class {k} ({manifest.class_names[k]}) has no usable train excerpt")
    init_rng, data_rng, drop_rng = _streams(config.seed)
    params = init_params(spec, init_rng)
    net = Network(spec, params)
    opt = Adam(params, lr=config.lr)
    history: list[float] = []
    t0 = time.perf_counter()
    stopped = False
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for _ in range(config.epoch_size // config.batch_size):
            x, y = sampler.batch(data_rng, config.batch_size, n_classes)
            x = normalize_batch(x)
            try:
                probs = net.forward(x, training=True, rng=drop_rng)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, step {len(losses) + 1}: {exc}") from exc
            loss = T.cross_entropy(probs, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch}, step {len(losses) + 1}: non-finite loss {loss}")
            losses.append(loss)
            opt.step(params, net.backward(y))
        history.append(float(np.mean(losses)))
        log.info("epoch %d mean loss %.4f (%.0f s)", epoch, history[-1], time.perf_counter() - t0)
        if on_epoch:
            on_epoch(epoch, history[-1])
        if should_stop(history):
            stopped = True
            break
    result = TrainResult(spec, params, history, time.perf_counter() - t0, stopped)
    if checkpoint is not None:
        save_checkpoint(checkpoint, spec, params, {"history": history, "seed": config.seed})
    return result


def eval_windows(n_samples: int, sample_rate: int = SAMPLE_RATE) -> list[int]:
    """Start samples of the half-overlapping 3 s windows covering a recording."""
    length = excerpt_frames(sample_rate)
    hop = int(round(EVAL_HOP_SECONDS * sample_rate))
    if n_samples < length:
        return []
    return [i * hop for i in range((n_samples - length) // hop + 1)]


@dataclass
class AccuracyReport:
    class_names: list[str]
    accuracy: list[float | None]  # percent, None for classes absent from the test split
    counts: list[int]
    stddev: list[float | None] | None = None
    average_stddev: float | None = None

    @property
    def average(self) -> float:
        present = [a for a in self.accuracy if a is not None]
        return float(np.mean(present)) if present else float("nan")

    def rows(self):
        for i, name in enumerate(self.class_names):
            sd = None if self.stddev is None else self.stddev[i]
            yield name, self.accuracy[i], sd, self.counts[i]
        yield "average", self.average, self.average_stddev, sum(self.counts)


def _fmt(v):
    return "" if v is None else f"{v:.4f}"


def write_accuracy_csv(path, report: AccuracyReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "accuracy", "stddev", "n_excerpts"])
        for name, acc, sd, n in report.rows():
            w.writerow([name, _fmt(acc), _fmt(0.0 if sd is None and acc is not None else sd), n])


def predict(probs: np.ndarray) -> np.ndarray:
    """Argmax with ties resolved toward the lowest class index."""
    return np.argmax(probs, axis=-1)


def test_excerpts(manifest: DatasetManifest, cache: SpectrogramCache, split: str = "test", max_silent: float = 0.5):
    """Yield ``(label, spectrogram)`` for every kept evaluation window."""
    for e in manifest.split(split):
        f = cache.get(e.path)
        for start in eval_windows(f.n_samples, f.sample_rate):
            frame = int(round(start / HOP))
            if cache.silent_fraction(e.path, frame) >= max_silent:
                continue
            yield e.label, cache.excerpt(e.path, frame)


def accuracy_report(labels, predictions, class_names) -> AccuracyReport:
    labels = np.asarray(labels, dtype=int)
    predictions = np.asarray(predictions, dtype=int)
    acc, counts = [], []
    for k in range(len(class_names)):
        sel = labels == k
        counts.append(int(sel.sum()))
        acc.append(float(100.0 * np.mean(predictions[sel] == k)) if sel.any() else None)
    return AccuracyReport(list(class_names), acc, counts)


def evaluate(spec: NetworkSpec, params: dict[str, np.ndarray], manifest: DatasetManifest,
             cache: SpectrogramCache | None = None, batch_size: int = 64) -> AccuracyReport:
    """Per-class accuracy over half-overlapping 3 s test excerpts (excerpt-level, no voting)."""
    cache = cache or SpectrogramCache()
    net = Network(spec, params)
    labels, preds, batch = [], [], []

    def flush():
        x = normalize_batch(np.stack([b[1] for b in batch]))
        preds.extend(predict(net.forward(x, training=False)))
        labels.extend(b[0] for b in batch)
        batch.clear()

    for item in test_excerpts(manifest, cache):
        batch.append(item)
        if len(batch) == batch_size:
            flush()
    if batch:
        flush()
    return accuracy_report(labels, preds, manifest.class_names)


def evaluate_checkpoint(path, manifest: DatasetManifest, spec: NetworkSpec | None = None,
                        cache: SpectrogramCache | None = None) -> AccuracyReport:
    ck_spec, params, _ = load_checkpoint(path)
    if spec is not None and spec.to_json() != ck_spec.to_json():
        raise T.DimensionError(f"checkpoint holds architecture {ck_spec.name!r}, expected {spec.name!r}")
    return evaluate(ck_spec, params, manifest, cache)


def combine_trials(reports: list[AccuracyReport]) -> AccuracyReport:
    """Mean and standard deviation across trials, per class and for the class average."""
    names = reports[0].class_names
    mean, sd = [], []
    for k in range(len(names)):
        vals = [r.accuracy[k] for r in reports if r.accuracy[k] is not None]
        mean.append(float(np.mean(vals)) if vals else None)
        sd.append(float(np.std(vals)) if vals else None)
    out = AccuracyReport(names, mean, reports[0].counts, sd)
    out.average_stddev = float(np.std([r.average for r in reports]))
    return out


def repeated_trials(spec: NetworkSpec, manifest: DatasetManifest, config: TrainConfig, n_trials: int,
                    seeds: list[int] | None = None, cache: SpectrogramCache | None = None):
    if n_trials < 2:
        raise ValueError("repeated trials need at least two runs")
    seeds = seeds if seeds is not None else [config.seed + i for i in range(n_trials)]
    if len(seeds) != n_trials:
        raise ValueError("one seed per trial is required")
    cache = cache or SpectrogramCache(config.silence_db)
    reports, results = [], []
    for s in seeds:
        cfg = TrainConfig(config.epoch_size, config.batch_size, config.lr, s, config.max_epochs, config.silence_db)
        res = train(spec, manifest, cfg, cache)
        results.append(res)
        reports.append(evaluate(spec, res.params, manifest, cache))
    return combine_trials(reports), results
