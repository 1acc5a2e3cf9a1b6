"""Command-line entry point; every subcommand writes into one run directory."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import experiments, plotting
from .architectures import ARCHITECTURES, count_params, describe, get_architecture
from .dsp.audio import AudioError, load_audio
from .dsp.cqt import cqt, perceptual_weighting
from .dsp.features import SILENCE_DB
from .forest import ForestError
from .nn import StateError, load_checkpoint
from .tensor import DimensionError, NonFiniteError
from .training import (
    DatasetError, TrainConfig, TrainingDiverged, evaluate, read_manifest, repeated_trials, train,
    write_accuracy_csv,
)

log = logging.getLogger("spiralnet")

EXPECTED_ERRORS = (DatasetError, DimensionError, NonFiniteError, TrainingDiverged, ForestError, AudioError,
                   StateError, ValueError, OSError)


class RunDir:
    """Artifacts are written under temporary names and renamed only when the command succeeds."""

    def __init__(self, out):
        self.root = Path(out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.pending: dict[str, Path] = {}

    def path(self, name: str) -> Path:
        tmp = self.root / f".tmp-{name}"
        self.pending[name] = tmp
        return tmp

    def commit(self) -> list[str]:
        for name, tmp in self.pending.items():
            os.replace(tmp, self.root / name)
        done = sorted(self.pending)
        self.pending.clear()
        return done

    def abort(self) -> None:
        for tmp in self.pending.values():
            tmp.unlink(missing_ok=True)
        self.pending.clear()


def _versions() -> dict:
    import matplotlib
    import scipy

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__}


def _write_metadata(run: RunDir, args, artifacts: list[str], extra: dict | None = None) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    meta = {"command": args.command, "config": config, "seed": getattr(args, "seed", None),
            "versions": _versions(), "artifacts": artifacts, **(extra or {})}
    tmp = run.root / ".tmp-run.json"
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, run.root / "run.json")


def _config(args) -> TrainConfig:
    return TrainConfig(epoch_size=args.epoch_size, seed=args.seed, max_epochs=args.epochs_cap, lr=args.lr,
                       silence_db=args.silence_db)


def cmd_synth(args, run: RunDir):
    manifest = experiments.synth_corpus(run.root, seed=args.seed, n_pitches=args.pitches, duration=args.duration)
    print(f"wrote {len(manifest.entries)} files and manifest.csv to {run.root}")
    return {"n_files": len(manifest.entries)}


def cmd_mfcc_distances(args, run: RunDir):
    manifest = read_manifest(args.manifest)
    rows, groups = experiments.mfcc_distances(manifest)
    experiments.write_rows(run.path("mfcc_distances.csv"), rows, experiments.DISTANCE_COLUMNS)
    ratios = experiments.invariance_ratios(groups)
    experiments.write_rows(run.path("pitch_invariance.csv"),
                           [{"instrument": k, "ratio": v} for k, v in ratios.items()], ("instrument", "ratio"))
    if not args.no_figures:
        plotting.distance_boxplots(run.path("mfcc_distances.png"), rows)
    for k, v in ratios.items():
        print(f"{k:15s} all-note / same-pitch median distance: {v:10.1f}")
    return {}


def cmd_count_params(args, run: RunDir | None):
    names = list(ARCHITECTURES) if args.arch == "table" else [args.arch]
    totals = []
    for name in names:
        spec = get_architecture(name)
        if len(names) == 1:
            print(f"{'branch':8s} {'#':>2s} {'kind':18s} {'output':>12s} {'params':>8s}")
            for r in describe(spec):
                print(f"{r['branch']:8s} {r['index']:2d} {r['kind']:18s} {r['output']:>12s} {r['params']:8d}")
        totals.append((name, count_params(spec)))
        print(f"{name:10s} total {totals[-1][1]:,}")
    if run is not None:
        with open(run.path("param_counts.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["architecture", "params"])
            w.writerows(totals)
    return {}


def _write_loss(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(history, 1):
            w.writerow([i, repr(v)])


def cmd_train(args, run: RunDir):
    manifest = read_manifest(args.manifest)
    spec = get_architecture(args.arch)
    result = train(spec, manifest, _config(args), on_epoch=lambda e, l: print(f"epoch {e}: mean loss {l:.4f}"),
                   checkpoint=run.path("model.ckpt"))
    _write_loss(run.path("loss.csv"), result.history)
    if not args.no_figures:
        plotting.loss_curve(run.path("loss.png"), result.history)
    return {"epochs": len(result.history), "stopped_early": result.stopped_early}


def _report(run: RunDir, report, figures: bool) -> None:
    write_accuracy_csv(run.path("accuracy.csv"), report)
    if figures:
        plotting.accuracy_bars(run.path("accuracy.png"), report)
    for name, acc, sd, n in report.rows():
        shown = "absent" if acc is None else f"{acc:6.2f}%" + ("" if sd is None else f" +/- {sd:.2f}")
        print(f"{name:15s} {shown}  ({n} excerpts)")


def cmd_evaluate(args, run: RunDir):
    manifest = read_manifest(args.manifest)
    spec, params, _ = load_checkpoint(args.checkpoint)
    if args.arch is not None:
        expected = get_architecture(args.arch)
        if expected.to_json() != spec.to_json():
            raise DimensionError(f"checkpoint holds architecture {spec.name!r}, not {args.arch!r}")
    _report(run, evaluate(spec, params, manifest), not args.no_figures)
    return {"architecture": spec.name}


def cmd_trials(args, run: RunDir):
    manifest = read_manifest(args.manifest)
    spec = get_architecture(args.arch)
    seeds = [args.seed] * args.trials if args.same_seed else None
    report, results = repeated_trials(spec, manifest, _config(args), args.trials, seeds=seeds)
    for i, res in enumerate(results, 1):
        _write_loss(run.path(f"loss_trial{i}.csv"), res.history)
    _report(run, report, not args.no_figures)
    return {"epochs": [len(r.history) for r in results]}


def cmd_baseline(args, run: RunDir):
    manifest = read_manifest(args.manifest)
    report, model = experiments.run_baseline(manifest, seed=args.seed, silence_db=args.silence_db)
    model.save(run.path("forest.json"))
    _report(run, report, not args.no_figures)
    return {}


def cmd_cqt(args, run: RunDir):
    """Weighted spectrogram as little-endian float32 with a JSON sidecar."""
    audio = load_audio(args.input)
    spec = perceptual_weighting(cqt(audio, n_frames=None if args.full else 128))
    stem = Path(args.input).stem
    run.path(f"{stem}.f32").write_bytes(spec.values.astype("<f4").tobytes())
    sidecar = {"shape": list(spec.shape), "dtype": "<f4", "bin_freqs": spec.bin_freqs.tolist(), "hop": spec.hop}
    run.path(f"{stem}.json").write_text(json.dumps(sidecar, indent=2))
    return {}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spiralnet", description="Instrument recognition with weight-shared CNNs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, manifest=False, out=True, arch=False):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        if out:
            p.add_argument("--out", type=Path, required=True, help="run directory")
        if manifest:
            p.add_argument("--manifest", type=Path, required=True)
        if arch:
            p.add_argument("--arch", choices=list(ARCHITECTURES), default="all")
        p.add_argument("--seed", type=int, default=int(os.environ.get("SPIRALNET_SEED", 0)))
        p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
        return p

    p = add("synth", cmd_synth, "generate the synthetic source-filter corpus")
    p.add_argument("--pitches", type=int, default=32)
    p.add_argument("--duration", type=float, default=4.5)

    add("mfcc-distances", cmd_mfcc_distances, "MFCC cluster distances by instrument, pitch and nuance", manifest=True)

    p = sub.add_parser("count-params", help="per-layer and total parameter counts")
    p.set_defaults(func=cmd_count_params)
    p.add_argument("--arch", choices=list(ARCHITECTURES) + ["table"], default="table")
    p.add_argument("--out", type=Path)

    for name, func, text in (("train", cmd_train, "train one network"),
                             ("trials", cmd_trials, "repeated train+evaluate runs")):
        p = add(name, func, text, manifest=True, arch=True)
        p.add_argument("--epochs-cap", type=int, default=100)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--epoch-size", type=int, default=8192, help="excerpts per epoch")
        p.add_argument("--silence-db", type=float, default=SILENCE_DB)
        if name == "trials":
            p.add_argument("--trials", type=int, default=5)
            p.add_argument("--same-seed", action="store_true", help="reuse --seed for every trial")

    p = add("evaluate", cmd_evaluate, "per-class accuracy of a checkpoint", manifest=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--arch", choices=list(ARCHITECTURES), help="reject checkpoints of another architecture")

    p = add("baseline", cmd_baseline, "bag-of-features random forest", manifest=True)
    p.add_argument("--silence-db", type=float, default=SILENCE_DB)

    p = add("cqt", cmd_cqt, "export a weighted constant-Q spectrogram")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--full", action="store_true", help="keep every frame instead of the central 128")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    run = RunDir(args.out) if getattr(args, "out", None) is not None else None
    try:
        extra = args.func(args, run)
        if run is not None:
            artifacts = run.commit()
            _write_metadata(run, args, artifacts, extra)
    except EXPECTED_ERRORS as exc:
        if run is not None:
            run.abort()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        if run is not None:
            run.abort()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
