"""Command-line entry point: synth, spectrogram, train, eval, report.

Settings resolve as defaults <- config file <- flags, fully, before any
work starts. Config files are flat key=value text (UTF-8, # comments) or
JSON; a run.json written by `train` can be fed back via --config-file to
reproduce a run byte-for-byte.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
`CARDIOTYPE_THREADS` caps worker parallelism (0 or unset = auto).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__, dsp, nn, signal_io, train_eval
from .errors import DataError, UsageError
from .labels import (
    THRESHOLDS,
    ClipCategory,
    Dimension,
    Granularity,
    load_scores,
)
from .rng import mix64
from .train_eval import worker_count


# ---------------------------------------------------------------------------
# Option schema and resolution


@dataclass(frozen=True)
class Option:
    key: str
    flag: str
    type: type
    default: Any
    help: str
    choices: tuple[str, ...] | None = None
    required: bool = False


def _path_opt(key: str, flag: str, help_text: str, required: bool = True) -> Option:
    return Option(key=key, flag=flag, type=str, default=None, help=help_text, required=required)


_TRAIN_OPTIONS: tuple[Option, ...] = (
    _path_opt("spectrograms_a", "--spectrograms-a",
              "spectrogram store for window config a (window 100)", required=False),
    _path_opt("spectrograms_b", "--spectrograms-b",
              "spectrogram store for window config b (window 327)", required=False),
    _path_opt("scores", "--scores", "scores.csv with per-subject questionnaire means"),
    _path_opt("out", "--out", "output directory for reports and checkpoints"),
    Option("dimension", "--dimension", str, "all",
           "personality dimension to train (default: all)",
           choices=("ext", "agr", "con", "ems", "ope", "all")),
    Option("category", "--category", str, "all",
           "clip-category filter (default: all)",
           choices=("all", "hahv", "lahv", "lalv", "halv")),
    Option("folds", "--folds", int, 10, "cross-validation folds (default: 10)"),
    Option("epochs", "--epochs", int, 3, "training epochs per fold (default: 3)"),
    Option("batch", "--batch", int, 16, "batch size (default: 16)"),
    Option("lr", "--lr", float, 0.001, "SGD learning rate (default: 0.001)"),
    Option("momentum", "--momentum", float, 0.9, "SGD momentum (default: 0.9)"),
    Option("weight_decay", "--weight-decay", float, 0.001,
           "SGD weight decay (default: 0.001)"),
    Option("input_size", "--input-size", int, 224,
           "model input side; must divide 224 (default: 224)"),
    Option("granularity", "--granularity", str, "segment",
           "fold-split granularity (default: segment)",
           choices=("segment", "subject")),
    Option("seed", "--seed", int, 0, "master random seed (default: 0)"),
)

_SCHEMAS: dict[str, tuple[Option, ...]] = {
    "synth": (
        _path_opt("out", "--out", "directory to write the synthetic dataset into"),
        Option("subjects", "--subjects", int, 10, "number of subjects (default: 10)"),
        Option("clips", "--clips", int, 4, "clips per subject (default: 4)"),
        Option("seed", "--seed", int, 0, "master random seed (default: 0)"),
        Option("hr_low", "--hr-low", float, 60.0,
               "heart rate of the low regime in bpm (default: 60)"),
        Option("hr_high", "--hr-high", float, 90.0,
               "heart rate of the high regime in bpm (default: 90)"),
        Option("noise", "--noise", float, 0.02,
               "Gaussian noise std in mV (default: 0.02)"),
        Option("duration_s", "--duration-s", float, 30.0,
               "clip duration in seconds (default: 30)"),
        Option("sample_rate", "--sample-rate", int, 256,
               "sampling rate in Hz (default: 256)"),
        Option("force", "--force", bool, False,
               "overwrite an existing non-empty output directory (default: false)"),
        Option("checksums", "--checksums", bool, False,
               "record per-file sha256 checksums in the manifest (default: false)"),
    ),
    "spectrogram": (
        _path_opt("data", "--data", "dataset root (manifest, scores, signals)"),
        _path_opt("out", "--out", "directory to write spectrogram files into"),
        Option("config", "--config", str, "a",
               "window config: a = window 100, b = window 327 (default: a)",
               choices=("a", "b")),
        Option("format", "--format", str, "f32",
               "export format (default: f32)", choices=("pgm", "f32", "both")),
        Option("channel", "--channel", str, "left_arm",
               "ECG channel to load (default: left_arm)",
               choices=("left_arm", "right_arm")),
        Option("seg_len_s", "--seg-len-s", float, 10.0,
               "segment length in seconds (default: 10)"),
    ),
    "train": _TRAIN_OPTIONS,
    "eval": (
        _path_opt("run", "--run", "run.json written by a previous train run"),
        _path_opt("out", "--out", "output directory for re-evaluated reports"),
    ),
    "report": (
        _path_opt("predictions_a", "--predictions-a",
                  "predictions.csv for window config a", required=False),
        _path_opt("predictions_b", "--predictions-b",
                  "predictions.csv for window config b", required=False),
        _path_opt("out", "--out", "output directory for rendered reports"),
        Option("format", "--format", str, "both",
               "report format to write (default: both)",
               choices=("markdown", "csv", "both")),
    ),
}


def load_config_file(path: Path | str) -> dict[str, Any]:
    """Parse a key=value or JSON config file (run.json accepted)."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from exc
        if isinstance(raw.get("resolved"), dict):
            raw = raw["resolved"]
        return {k: v for k, v in raw.items() if k != "command"}
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _coerce(option: Option, value: Any, origin: str) -> Any:
    if value is None:
        return None
    if option.type is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes"):
            return True
        if text in ("0", "false", "no"):
            return False
        raise UsageError(f"{origin}: {option.key} must be a boolean, got {value!r}")
    try:
        value = option.type(value)
    except (TypeError, ValueError):
        raise UsageError(
            f"{origin}: {option.key} must be {option.type.__name__}, got {value!r}"
        ) from None
    if option.choices is not None and value not in option.choices:
        raise UsageError(
            f"{origin}: {option.key} must be one of {', '.join(option.choices)}"
        )
    return value


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults <- config file <- flags into one fully-resolved dict."""
    schema = {opt.key: opt for opt in _SCHEMAS[command]}
    resolved = {opt.key: opt.default for opt in _SCHEMAS[command]}
    config_file = getattr(args, "config_file", None)
    if config_file:
        for key, value in load_config_file(config_file).items():
            if key not in schema:
                raise UsageError(f"{config_file}: unknown setting {key!r} for {command}")
            resolved[key] = _coerce(schema[key], value, str(config_file))
    for key, opt in schema.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = _coerce(opt, flag_value, "flag")
    missing = [
        schema[key].flag for key, value in resolved.items()
        if value is None and schema[key].required
    ]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    return resolved


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="cardiotype",
        description="ECG spectrograms to binary Big-Five labels, end to end.",
    )
    parser.add_argument("--version", action="version", version=f"cardiotype {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "synth": "write a synthetic two-heart-rate-regime dataset",
        "spectrogram": "convert a dataset into spectrogram files",
        "train": "k-fold training and evaluation over the run grid",
        "eval": "re-evaluate saved checkpoints from a run.json",
        "report": "re-render reports from persisted predictions",
    }
    for command, options in _SCHEMAS.items():
        sub = subparsers.add_parser(
            command, description=descriptions[command], help=descriptions[command]
        )
        sub.add_argument(
            "--config-file",
            default=None,
            help="key=value or JSON settings file (flags override it)",
        )
        for opt in options:
            kwargs: dict[str, Any] = {"default": None, "help": opt.help, "dest": opt.key}
            if opt.type is bool:
                kwargs["action"] = "store_const"
                kwargs["const"] = True
            else:
                kwargs["type"] = str  # coerced (with nicer messages) in resolve()
                if opt.choices is not None:
                    kwargs["choices"] = opt.choices
            sub.add_argument(opt.flag, **kwargs)
        sub.set_defaults(func=_COMMANDS[command], command=command)
    return parser


# ---------------------------------------------------------------------------
# synth


def _synth_scores(subject_id: int, is_high: bool, seed: int) -> tuple[float, ...]:
    row = []
    for i, dim in enumerate(Dimension):
        rng = np.random.default_rng(mix64(seed, subject_id, i, 7))
        delta = 0.2 + 0.6 * rng.uniform()
        base = THRESHOLDS[dim]
        row.append(round(base + delta, 2) if is_high else round(base - delta, 2))
    return tuple(row)


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = resolve("synth", args)
    if cfg["subjects"] < 2:
        raise UsageError("--subjects must be at least 2 (one per heart-rate regime)")
    if cfg["clips"] < 1:
        raise UsageError("--clips must be at least 1")
    if cfg["hr_low"] <= 0 or cfg["hr_high"] <= 0:
        raise UsageError("heart rates must be positive")
    if cfg["noise"] < 0:
        raise UsageError("--noise must be non-negative")
    if cfg["duration_s"] * cfg["sample_rate"] < 1:
        raise UsageError("--duration-s too short for the sample rate")

    seed = cfg["seed"]
    n_low = (cfg["subjects"] + 1) // 2  # first half of subjects = low regime

    def signals():
        for subject_id in range(1, cfg["subjects"] + 1):
            is_high = subject_id > n_low
            hr = cfg["hr_high"] if is_high else cfg["hr_low"]
            for clip_id in range(1, cfg["clips"] + 1):
                left = signal_io.synth_ecg(
                    cfg["duration_s"], cfg["sample_rate"], hr, cfg["noise"],
                    seed=mix64(seed, subject_id, clip_id, 0),
                )
                right = 0.9 * signal_io.synth_ecg(
                    cfg["duration_s"], cfg["sample_rate"], hr, cfg["noise"],
                    seed=mix64(seed, subject_id, clip_id, 1),
                )
                yield subject_id, clip_id, left, right

    scores_rows = [
        (s, *_synth_scores(s, s > n_low, seed)) for s in range(1, cfg["subjects"] + 1)
    ]
    signal_io.write_dataset(
        cfg["out"],
        sample_rate_hz=cfg["sample_rate"],
        subjects=cfg["subjects"],
        clips=cfg["clips"],
        signals=signals(),
        scores_rows=scores_rows,
        force=cfg["force"],
        checksums=cfg["checksums"],
    )
    print(
        f"wrote {cfg['subjects']} subjects x {cfg['clips']} clips "
        f"({cfg['subjects'] * cfg['clips']} signal files) to {cfg['out']}"
    )
    return 0


# ---------------------------------------------------------------------------
# spectrogram


def cmd_spectrogram(args: argparse.Namespace) -> int:
    cfg = resolve("spectrogram", args)
    records = signal_io.load_dataset(cfg["data"], signal_io.Channel(cfg["channel"]))
    if not records:
        raise DataError(f"no signal files under {cfg['data']}")
    seg_len = int(round(cfg["seg_len_s"] * records[0].sample_rate_hz))
    spec_config = dsp.preset_config(cfg["config"], seg_len=seg_len)

    segments = []
    for record in records:
        segments.extend(signal_io.segment(record, cfg["seg_len_s"]))
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    def export(seg):
        spectrogram = dsp.log_spectrogram(seg, spec_config)
        base = (seg.subject_id, seg.clip_id, seg.offset_samples)
        if cfg["format"] in ("f32", "both"):
            dsp.export_f32(
                spectrogram, out_dir / train_eval.spectrogram_filename(*base, "spec")
            )
        if cfg["format"] in ("pgm", "both"):
            dsp.export_pgm(
                spectrogram, out_dir / train_eval.spectrogram_filename(*base, "pgm")
            )

    workers = worker_count()
    if workers > 1 and len(segments) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(export, segments))
    else:
        for seg in segments:
            export(seg)
    print(
        f"wrote {len(segments)} spectrograms ({cfg['format']}) from "
        f"{len(records)} records to {out_dir} "
        f"[window {spec_config.window_len}, hop {spec_config.hop}]"
    )
    return 0


# ---------------------------------------------------------------------------
# train / eval / report


def _train_runs(cfg: dict[str, Any]) -> tuple[list[train_eval.RunConfig], list[str]]:
    configs = [c for c in ("a", "b") if cfg[f"spectrograms_{c}"]]
    if not configs:
        raise UsageError("provide --spectrograms-a and/or --spectrograms-b")
    if cfg["input_size"] < 1 or 224 % cfg["input_size"]:
        raise UsageError(f"--input-size must divide 224, got {cfg['input_size']}")
    dimensions = (
        list(Dimension) if cfg["dimension"] == "all" else [Dimension(cfg["dimension"])]
    )
    train_config = nn.TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch"],
        learning_rate=cfg["lr"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        input_size=cfg["input_size"],
    )
    runs = [
        train_eval.RunConfig(
            dimension=dim,
            category=ClipCategory(cfg["category"]),
            window_config=config,
            train=train_config,
            folds=cfg["folds"],
            granularity=Granularity(cfg["granularity"]),
        )
        for config in configs
        for dim in dimensions
    ]
    return runs, configs


def _write_report_files(
    report: train_eval.MetricsReport, out_dir: Path, formats: tuple[str, ...] = ("markdown", "csv")
) -> None:
    if "markdown" in formats:
        (out_dir / "report.md").write_text(
            train_eval.render_report(report, "markdown"), encoding="utf-8"
        )
    if "csv" in formats:
        (out_dir / "report.csv").write_text(
            train_eval.render_report(report, "csv"), encoding="utf-8"
        )


def _write_predictions(report: train_eval.MetricsReport, out_dir: Path) -> None:
    for config, records in sorted(report.predictions.items()):
        config_dir = out_dir / f"config_{config}"
        config_dir.mkdir(parents=True, exist_ok=True)
        train_eval.write_predictions_csv(records, config_dir / "predictions.csv")


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve("train", args)
    runs, configs = _train_runs(cfg)
    stores = {
        config: train_eval.load_spectrogram_store(cfg[f"spectrograms_{config}"])
        for config in configs
    }
    scores = load_scores(cfg["scores"])
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    report = train_eval.run_experiment(
        runs,
        stores,
        scores,
        checkpoint_dir=out_dir / "checkpoints",
        on_progress=print,
    )
    _write_report_files(report, out_dir)
    _write_predictions(report, out_dir)
    run_meta = {
        "command": "train",
        "package_version": __version__,
        "resolved": cfg,
    }
    (out_dir / "run.json").write_text(
        json.dumps(run_meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"report written to {out_dir / 'report.md'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve("eval", args)
    run_path = Path(cfg["run"])
    if not run_path.is_file():
        raise DataError(f"run file not found: {run_path}")
    run_meta = json.loads(run_path.read_text(encoding="utf-8"))
    train_cfg = run_meta.get("resolved")
    if not isinstance(train_cfg, dict):
        raise DataError(f"{run_path}: missing resolved config")
    schema = {opt.key: opt for opt in _SCHEMAS["train"]}
    overlay = {
        key: _coerce(schema[key], value, str(run_path))
        for key, value in train_cfg.items()
        if key in schema
    }
    train_cfg = {opt.key: opt.default for opt in _SCHEMAS["train"]}
    train_cfg.update(overlay)

    runs, configs = _train_runs(train_cfg)
    stores = {
        config: train_eval.load_spectrogram_store(train_cfg[f"spectrograms_{config}"])
        for config in configs
    }
    scores = load_scores(train_cfg["scores"])
    checkpoint_dir = Path(train_cfg["out"]) / "checkpoints"
    if not checkpoint_dir.is_dir():
        raise DataError(f"checkpoint directory not found: {checkpoint_dir}")

    report = train_eval.MetricsReport()
    for run in sorted(runs, key=train_eval._run_sort_key):
        examples = train_eval.assemble(
            stores[run.window_config], scores, run.dimension, run.category
        )
        plan = train_eval.stratified_kfold(
            examples,
            run.folds,
            run.granularity,
            seed=mix64(
                run.train.seed,
                train_eval.DIMENSION_ORDER.index(run.dimension),
                train_eval.CATEGORY_ORDER.index(run.category),
            ),
        )
        prepared = train_eval.prepare_inputs(examples, run.train.input_size)
        records = report.predictions.setdefault(run.window_config, [])
        for fold in range(run.folds):
            name = (
                f"{run.window_config}_{run.dimension.value}_"
                f"{run.category.value}_fold{fold:02d}.mdlp"
            )
            model_spec, params = nn.load_checkpoint(checkpoint_dir / name)
            test_idx = plan.test_indices(fold)
            logits = train_eval._forward_batched(
                params, model_spec, prepared[0][test_idx], run.train.batch_size
            )
            predictions = logits.argmax(axis=1)
            counts = train_eval.counts_from_pairs(prepared[1][test_idx], predictions)
            report.folds.append(
                train_eval.FoldMetrics(
                    dimension=run.dimension,
                    category=run.category,
                    window_config=run.window_config,
                    fold=fold,
                    counts=counts,
                    metrics=train_eval.compute_metrics(counts),
                )
            )
            for row, idx in enumerate(test_idx):
                ex = examples[idx]
                records.append(
                    train_eval.PredictionRecord(
                        dimension=run.dimension,
                        category=run.category,
                        fold=fold,
                        subject_id=ex.subject_id,
                        clip_id=ex.clip_id,
                        offset=ex.offset_samples,
                        label=int(prepared[1][idx]),
                        prediction=int(predictions[row]),
                        logit0=float(logits[row, 0]),
                        logit1=float(logits[row, 1]),
                    )
                )
    report.meta = {"aggregation": "unweighted mean over folds", "seed": train_cfg["seed"],
                   "epochs": train_cfg["epochs"], "batch_size": train_cfg["batch"],
                   "learning_rate": train_cfg["lr"], "momentum": train_cfg["momentum"],
                   "weight_decay": train_cfg["weight_decay"],
                   "input_size": train_cfg["input_size"], "folds": train_cfg["folds"],
                   "granularity": train_cfg["granularity"]}

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_report_files(report, out_dir)
    _write_predictions(report, out_dir)
    print(f"re-evaluated report written to {out_dir / 'report.md'}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    cfg = resolve("report", args)
    predictions: dict[str, list[train_eval.PredictionRecord]] = {}
    for config in ("a", "b"):
        path = cfg[f"predictions_{config}"]
        if path:
            predictions[config] = train_eval.read_predictions_csv(path)
    if not predictions:
        raise UsageError("provide --predictions-a and/or --predictions-b")
    report = train_eval.report_from_predictions(predictions)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    formats = ("markdown", "csv") if cfg["format"] == "both" else (cfg["format"],)
    _write_report_files(report, out_dir, formats)
    written = [
        str(out_dir / name)
        for fmt, name in (("markdown", "report.md"), ("csv", "report.csv"))
        if fmt in formats
    ]
    print(f"wrote {', '.join(written)}")
    return 0


_COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "synth": cmd_synth,
    "spectrogram": cmd_spectrogram,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        traceback.print_exc()
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
