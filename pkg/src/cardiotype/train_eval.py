"""K-fold training, precision/recall/F1 metrics, and report rendering.

A run is one (dimension, clip-category filter, spectrogram window config)
cell of the experiment grid; each run trains one model per fold and
evaluates it on the held-out fold in eval mode. Per-example predictions are
persisted alongside the confusion counts so every reported metric can be
recounted from raw (label, prediction) pairs.

Aggregation across folds is the unweighted arithmetic mean, and reports say
so. Degenerate 0/0 metric cases are reported as 0 and flagged rather than
dropped.
"""

from __future__ import annotations

import os
import re
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from math import floor
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

try:  # many tiny gemms: one BLAS thread beats the sync overhead
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def _single_thread_blas():
    if threadpool_limits is None:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=1, user_api="blas")

from . import nn
from .dsp import minmax_unit, read_f32
from .errors import DataError
from .labels import (
    ClipCategory,
    Dimension,
    DIMENSION_TITLES,
    FoldPlan,
    Granularity,
    LabeledExample,
    SpectrogramRef,
    assemble,
    stratified_kfold,
)
from .labels import BigFiveScores
from .rng import mix64

DIMENSION_ORDER = list(Dimension)
CATEGORY_ORDER = [
    ClipCategory.ALL,
    ClipCategory.HAHV,
    ClipCategory.LAHV,
    ClipCategory.LALV,
    ClipCategory.HALV,
]
CONFIG_ORDER = ["a", "b"]
CONFIG_TITLES = {"a": "window 100", "b": "window 327"}

PREDICTIONS_HEADER = (
    "dimension,category,fold,subject_id,clip_id,offset,label,prediction,logit0,logit1"
)

_SPEC_NAME = re.compile(r"^S(\d+)_C(\d+)_O(\d+)\.spec$")


def worker_count() -> int:
    """Parallelism cap from CARDIOTYPE_THREADS (0 or unset = one per CPU)."""
    raw = os.environ.get("CARDIOTYPE_THREADS", "").strip()
    if raw:
        try:
            value = int(raw)
        except ValueError:
            value = 0
        if value > 0:
            return value
    return os.cpu_count() or 1


def spectrogram_filename(subject_id: int, clip_id: int, offset: int, ext: str) -> str:
    return f"S{subject_id:02d}_C{clip_id:02d}_O{offset}.{ext}"


def load_spectrogram_store(directory: Path | str) -> list[SpectrogramRef]:
    """Read every S{ss}_C{cc}_O{offset}.spec file under a directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"spectrogram store not found: {directory}")
    refs: list[SpectrogramRef] = []
    for path in directory.iterdir():
        match = _SPEC_NAME.match(path.name)
        if not match:
            continue
        subject_id, clip_id, offset = (int(g) for g in match.groups())
        refs.append(
            SpectrogramRef(
                subject_id=subject_id,
                clip_id=clip_id,
                offset_samples=offset,
                values=read_f32(path),
            )
        )
    if not refs:
        raise DataError(f"no .spec files in {directory}")
    refs.sort(key=lambda r: (r.subject_id, r.clip_id, r.offset_samples))
    return refs


def prepare_inputs(
    examples: Sequence[LabeledExample], input_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Model inputs: block-average to input_size, min-max to [0,1], replicate x3."""
    if not examples:
        raise DataError("no examples to prepare")
    xs = []
    for ex in examples:
        values = np.asarray(ex.spectrogram.values, dtype=np.float64)
        h, w = values.shape
        if h % input_size or w % input_size:
            raise ValueError(
                f"input_size {input_size} must divide spectrogram shape {h}x{w}"
            )
        fh, fw = h // input_size, w // input_size
        if fh > 1 or fw > 1:
            values = values.reshape(input_size, fh, input_size, fw).mean(axis=(1, 3))
        xs.append(minmax_unit(values))
    grid = np.stack(xs)[:, None, :, :]
    x = np.repeat(grid, 3, axis=1)
    y = np.array([ex.label for ex in examples], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


class Metrics(NamedTuple):
    precision: float
    recall: float
    f1: float
    degenerate: bool


def counts_from_pairs(labels: np.ndarray, predictions: np.ndarray) -> ConfusionCounts:
    """Confusion counts with class 1 as the positive class."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    return ConfusionCounts(
        tp=int(np.sum((predictions == 1) & (labels == 1))),
        fp=int(np.sum((predictions == 1) & (labels == 0))),
        fn=int(np.sum((predictions == 0) & (labels == 1))),
        tn=int(np.sum((predictions == 0) & (labels == 0))),
    )


def compute_metrics(counts: ConfusionCounts) -> Metrics:
    """precision = tp/(tp+fp), recall = tp/(tp+fn), f1 = 2PR/(P+R); 0/0 -> 0 + flag."""
    degenerate = False
    if counts.tp + counts.fp > 0:
        precision = counts.tp / (counts.tp + counts.fp)
    else:
        precision, degenerate = 0.0, True
    if counts.tp + counts.fn > 0:
        recall = counts.tp / (counts.tp + counts.fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1, degenerate = 0.0, True
    return Metrics(precision=precision, recall=recall, f1=f1, degenerate=degenerate)


# ---------------------------------------------------------------------------
# Fold training


@dataclass(frozen=True)
class PredictionRecord:
    dimension: Dimension
    category: ClipCategory
    fold: int
    subject_id: int
    clip_id: int
    offset: int
    label: int
    prediction: int
    logit0: float
    logit1: float


@dataclass
class FoldOutcome:
    params: nn.Params
    counts: ConfusionCounts
    metrics: Metrics
    predictions: list[PredictionRecord]
    final_loss: float


@dataclass(frozen=True)
class RunConfig:
    dimension: Dimension
    category: ClipCategory
    window_config: str
    train: nn.TrainConfig
    folds: int = 10
    granularity: Granularity = Granularity.SEGMENT

    def describe(self) -> str:
        return (
            f"dimension={self.dimension.value} category={self.category.value} "
            f"config={self.window_config}"
        )


def _forward_batched(
    params: nn.Params, spec: nn.ModelSpec, x: np.ndarray, batch_size: int
) -> np.ndarray:
    # eval mode uses running statistics, so chunk size cannot change results
    chunk = max(batch_size, 64)
    chunks = [
        nn.forward(params, spec, x[i : i + chunk], mode="eval")[0]
        for i in range(0, x.shape[0], chunk)
    ]
    return np.concatenate(chunks, axis=0)


def train_fold(
    examples: Sequence[LabeledExample],
    fold: int,
    plan: FoldPlan,
    model_spec: nn.ModelSpec,
    config: nn.TrainConfig,
    prepared: tuple[np.ndarray, np.ndarray] | None = None,
    dimension: Dimension | None = None,
    category: ClipCategory | None = None,
) -> FoldOutcome:
    """Train on everything outside `fold`, evaluate on the fold's examples.

    Shuffling is reseeded per epoch from config.seed; the final partial
    batch is kept. Evaluation runs in eval mode (running batchnorm stats).
    `dimension`/`category` only tag the returned prediction records; direct
    callers that don't care may leave the ext/all defaults.
    """
    train_idx = plan.train_indices(fold)
    test_idx = plan.test_indices(fold)
    if train_idx.size == 0 or test_idx.size == 0:
        raise DataError(f"fold {fold}: empty train or test set")

    x, y = prepared if prepared is not None else prepare_inputs(examples, config.input_size)
    params = nn.init_params(model_spec, seed=mix64(config.seed, 0xC0))
    buffers = nn.init_momentum(params)
    shuffle_rng = np.random.default_rng(mix64(config.seed, 0x5F))

    final_loss = float("nan")
    with _single_thread_blas():
        for _ in range(config.epochs):
            perm = shuffle_rng.permutation(train_idx.size)
            for start in range(0, train_idx.size, config.batch_size):
                batch = train_idx[perm[start : start + config.batch_size]]
                logits, cache = nn.forward(params, model_spec, x[batch], mode="train")
                loss, dlogits = nn.softmax_cross_entropy(logits, y[batch])
                grads = nn.backward(params, model_spec, cache, dlogits)
                nn.sgd_step(params, grads, buffers, config)
                final_loss = loss

        logits = _forward_batched(params, model_spec, x[test_idx], config.batch_size)
    predictions = logits.argmax(axis=1)
    counts = counts_from_pairs(y[test_idx], predictions)
    records = []
    for row, idx in enumerate(test_idx):
        ex = examples[idx]
        records.append(
            PredictionRecord(
                dimension=dimension if dimension is not None else Dimension.EXTRAVERSION,
                category=category if category is not None else ClipCategory.ALL,
                fold=fold,
                subject_id=ex.subject_id,
                clip_id=ex.clip_id,
                offset=ex.offset_samples,
                label=int(y[idx]),
                prediction=int(predictions[row]),
                logit0=float(logits[row, 0]),
                logit1=float(logits[row, 1]),
            )
        )
    return FoldOutcome(
        params=params,
        counts=counts,
        metrics=compute_metrics(counts),
        predictions=records,
        final_loss=final_loss,
    )


# ---------------------------------------------------------------------------
# Experiment driver


@dataclass
class FoldMetrics:
    dimension: Dimension
    category: ClipCategory
    window_config: str
    fold: int
    counts: ConfusionCounts
    metrics: Metrics


@dataclass
class MetricsReport:
    folds: list[FoldMetrics] = field(default_factory=list)
    predictions: dict[str, list[PredictionRecord]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def configs(self) -> list[str]:
        present = {fm.window_config for fm in self.folds}
        return [c for c in CONFIG_ORDER if c in present] + sorted(
            present - set(CONFIG_ORDER)
        )

    def cells(self) -> list[tuple[Dimension, ClipCategory]]:
        present = {(fm.dimension, fm.category) for fm in self.folds}
        return [
            (d, c)
            for c in CATEGORY_ORDER
            for d in DIMENSION_ORDER
            if (d, c) in present
        ]

    def fold_metrics(
        self, dimension: Dimension, category: ClipCategory, window_config: str
    ) -> list[FoldMetrics]:
        return [
            fm
            for fm in self.folds
            if fm.dimension == dimension
            and fm.category == category
            and fm.window_config == window_config
        ]

    def mean_metrics(
        self, dimension: Dimension, category: ClipCategory, window_config: str
    ) -> Metrics | None:
        """Unweighted arithmetic mean of the per-fold metrics."""
        folds = self.fold_metrics(dimension, category, window_config)
        if not folds:
            return None
        return Metrics(
            precision=float(np.mean([fm.metrics.precision for fm in folds])),
            recall=float(np.mean([fm.metrics.recall for fm in folds])),
            f1=float(np.mean([fm.metrics.f1 for fm in folds])),
            degenerate=any(fm.metrics.degenerate for fm in folds),
        )


def _run_sort_key(run: RunConfig) -> tuple[int, int, int]:
    cfg = CONFIG_ORDER.index(run.window_config) if run.window_config in CONFIG_ORDER else 99
    return (
        cfg,
        DIMENSION_ORDER.index(run.dimension),
        CATEGORY_ORDER.index(run.category),
    )


def run_experiment(
    runs: Sequence[RunConfig],
    stores: Mapping[str, Sequence[SpectrogramRef]],
    scores: Mapping[int, BigFiveScores],
    model_spec: nn.ModelSpec | None = None,
    checkpoint_dir: Path | str | None = None,
    on_progress: Callable[[str], None] | None = None,
) -> MetricsReport:
    """Assemble, split, and train every run; deterministic given the seed.

    Fold-plan seeds derive from (master seed, dimension, category) so both
    window configs see the same splits; per-fold training seeds additionally
    fold in the config index and fold number.
    """
    if model_spec is None:
        model_spec = nn.mini_resnet(3)
    report = MetricsReport()
    for run in sorted(runs, key=_run_sort_key):
        try:
            _execute_run(run, stores, scores, model_spec, checkpoint_dir, report, on_progress)
        except Exception as exc:
            raise type(exc)(f"run ({run.describe()}): {exc}") from exc
    if runs:
        master = sorted(runs, key=_run_sort_key)[0].train
        report.meta = {
            "seed": master.seed,
            "epochs": master.epochs,
            "batch_size": master.batch_size,
            "learning_rate": master.learning_rate,
            "momentum": master.momentum,
            "weight_decay": master.weight_decay,
            "input_size": master.input_size,
            "folds": sorted(runs, key=_run_sort_key)[0].folds,
            "granularity": sorted(runs, key=_run_sort_key)[0].granularity.value,
            "aggregation": "unweighted mean over folds",
        }
    return report


_FOLD_CONTEXT: dict = {}


def _fold_worker(fold: int) -> tuple[int, FoldOutcome]:
    ctx = _FOLD_CONTEXT
    return fold, train_fold(
        ctx["examples"],
        fold,
        ctx["plan"],
        ctx["model_spec"],
        ctx["fold_configs"][fold],
        prepared=ctx["prepared"],
        dimension=ctx["dimension"],
        category=ctx["category"],
    )


def _run_folds(run: RunConfig, context: dict) -> list[FoldOutcome]:
    """Execute every fold of one run, in parallel processes when available.

    Folds are independent; results are merged in fold order, so the output
    is identical regardless of worker count. Fork shares the prepared
    feature tensors with workers at no serialization cost.
    """
    global _FOLD_CONTEXT
    workers = min(run.folds, worker_count())
    use_processes = workers > 1 and hasattr(os, "fork")
    _FOLD_CONTEXT = context
    try:
        if not use_processes:
            return [_fold_worker(fold)[1] for fold in range(run.folds)]
        import multiprocessing

        with ProcessPoolExecutor(
            max_workers=workers, mp_context=multiprocessing.get_context("fork")
        ) as pool:
            futures = [pool.submit(_fold_worker, fold) for fold in range(run.folds)]
            outcomes = [f.result()[1] for f in futures]
        return outcomes
    finally:
        _FOLD_CONTEXT = {}


def _execute_run(
    run: RunConfig,
    stores: Mapping[str, Sequence[SpectrogramRef]],
    scores: Mapping[int, BigFiveScores],
    model_spec: nn.ModelSpec,
    checkpoint_dir: Path | str | None,
    report: MetricsReport,
    on_progress: Callable[[str], None] | None,
) -> None:
    if run.window_config not in stores:
        raise DataError(f"no spectrogram store for config {run.window_config!r}")
    cfg_idx = CONFIG_ORDER.index(run.window_config)
    dim_idx = DIMENSION_ORDER.index(run.dimension)
    cat_idx = CATEGORY_ORDER.index(run.category)

    examples = assemble(stores[run.window_config], scores, run.dimension, run.category)
    plan = stratified_kfold(
        examples,
        run.folds,
        run.granularity,
        seed=mix64(run.train.seed, dim_idx, cat_idx),
    )
    prepared = prepare_inputs(examples, run.train.input_size)
    context = {
        "examples": examples,
        "plan": plan,
        "model_spec": model_spec,
        "prepared": prepared,
        "dimension": run.dimension,
        "category": run.category,
        "fold_configs": [
            replace(run.train, seed=mix64(run.train.seed, cfg_idx, dim_idx, cat_idx, fold))
            for fold in range(run.folds)
        ],
    }
    outcomes = _run_folds(run, context)

    records = report.predictions.setdefault(run.window_config, [])
    for fold, outcome in enumerate(outcomes):
        report.folds.append(
            FoldMetrics(
                dimension=run.dimension,
                category=run.category,
                window_config=run.window_config,
                fold=fold,
                counts=outcome.counts,
                metrics=outcome.metrics,
            )
        )
        records.extend(outcome.predictions)
        if checkpoint_dir is not None:
            directory = Path(checkpoint_dir)
            directory.mkdir(parents=True, exist_ok=True)
            name = (
                f"{run.window_config}_{run.dimension.value}_"
                f"{run.category.value}_fold{fold:02d}.mdlp"
            )
            nn.save_checkpoint(directory / name, model_spec, outcome.params)
        if on_progress is not None:
            on_progress(
                f"{run.describe()} fold {fold + 1}/{run.folds}: "
                f"f1={outcome.metrics.f1:.3f}"
            )


# ---------------------------------------------------------------------------
# Prediction persistence and the recount path


def write_predictions_csv(records: Sequence[PredictionRecord], path: Path | str) -> None:
    lines = [PREDICTIONS_HEADER]
    for r in records:
        lines.append(
            f"{r.dimension.value},{r.category.value},{r.fold},{r.subject_id},"
            f"{r.clip_id},{r.offset},{r.label},{r.prediction},"
            f"{r.logit0!r},{r.logit1!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions_csv(path: Path | str) -> list[PredictionRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"predictions file not found: {path}")
    records: list[PredictionRecord] = []
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != PREDICTIONS_HEADER:
            raise DataError(f"{path}: unexpected header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            cells = line.rstrip("\n").split(",")
            if len(cells) != 10:
                raise DataError(f"{path}: line {lineno}: expected 10 cells")
            try:
                records.append(
                    PredictionRecord(
                        dimension=Dimension(cells[0]),
                        category=ClipCategory(cells[1]),
                        fold=int(cells[2]),
                        subject_id=int(cells[3]),
                        clip_id=int(cells[4]),
                        offset=int(cells[5]),
                        label=int(cells[6]),
                        prediction=int(cells[7]),
                        logit0=float(cells[8]),
                        logit1=float(cells[9]),
                    )
                )
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    return records


def report_from_predictions(
    predictions: Mapping[str, Sequence[PredictionRecord]],
) -> MetricsReport:
    """Rebuild a MetricsReport by brute-force recount of persisted predictions."""
    report = MetricsReport(predictions={k: list(v) for k, v in predictions.items()})
    for config in sorted(predictions, key=lambda c: CONFIG_ORDER.index(c) if c in CONFIG_ORDER else 99):
        groups: dict[tuple[Dimension, ClipCategory, int], list[PredictionRecord]] = {}
        for record in predictions[config]:
            groups.setdefault(
                (record.dimension, record.category, record.fold), []
            ).append(record)
        for dimension, category, fold in sorted(
            groups,
            key=lambda key: (
                DIMENSION_ORDER.index(key[0]),
                CATEGORY_ORDER.index(key[1]),
                key[2],
            ),
        ):
            rows = groups[(dimension, category, fold)]
            counts = counts_from_pairs(
                np.array([r.label for r in rows]),
                np.array([r.prediction for r in rows]),
            )
            report.folds.append(
                FoldMetrics(
                    dimension=dimension,
                    category=category,
                    window_config=config,
                    fold=fold,
                    counts=counts,
                    metrics=compute_metrics(counts),
                )
            )
    report.meta = {"aggregation": "unweighted mean over folds (recounted)"}
    return report


# ---------------------------------------------------------------------------
# Rendering


def format2(x: float) -> str:
    """Two decimals, halves away from zero (metrics are non-negative)."""
    return f"{floor(x * 100 + 0.5) / 100:.2f}"


def _config_header(config: str) -> str:
    return CONFIG_TITLES.get(config, f"config {config}")


def render_report(report: MetricsReport, fmt: str = "markdown") -> str:
    if fmt == "markdown":
        return _render_markdown(report)
    if fmt == "csv":
        return _render_csv(report)
    raise ValueError(f"unknown report format {fmt!r}")


def _cell(metrics: Metrics | None) -> str:
    if metrics is None:
        return "-"
    text = f"{format2(metrics.precision)} {format2(metrics.recall)} {format2(metrics.f1)}"
    return text + " *" if metrics.degenerate else text


def _render_markdown(report: MetricsReport) -> str:
    configs = report.configs()
    lines = ["# Personality classification report", ""]
    if report.meta:
        for key in sorted(report.meta):
            lines.append(f"- {key}: {report.meta[key]}")
        lines.append("")

    lines.append("## Precision / recall / F1 by dimension (all clips)")
    lines.append("")
    dims = [
        d
        for d in DIMENSION_ORDER
        if any(report.mean_metrics(d, ClipCategory.ALL, c) is not None for c in configs)
    ]
    if not dims:
        lines.append("_no results for the all-clips category_")
        lines.append("")
    else:
        header = "| Dimension | " + " | ".join(
            f"{_config_header(c)} (P R F1)" for c in configs
        ) + " |"
        lines.append(header)
        lines.append("|" + "---|" * (len(configs) + 1))
        for d in dims:
            cells = [
                _cell(report.mean_metrics(d, ClipCategory.ALL, c)) for c in configs
            ]
            lines.append(f"| {DIMENSION_TITLES[d]} | " + " | ".join(cells) + " |")
        lines.append("")

    for config in configs:
        lines.append(f"## F1 by clip category ({_config_header(config)})")
        lines.append("")
        cats = [
            c
            for c in CATEGORY_ORDER
            if any(report.mean_metrics(d, c, config) is not None for d in DIMENSION_ORDER)
        ]
        if not cats:
            lines.append("_no category results for this config_")
            lines.append("")
            continue
        header = "| Category | " + " | ".join(
            DIMENSION_TITLES[d].split()[0] for d in DIMENSION_ORDER
        ) + " |"
        lines.append(header)
        lines.append("|" + "---|" * (len(DIMENSION_ORDER) + 1))
        for cat in cats:
            cells = []
            for d in DIMENSION_ORDER:
                m = report.mean_metrics(d, cat, config)
                if m is None:
                    cells.append("-")
                else:
                    cells.append(format2(m.f1) + (" *" if m.degenerate else ""))
            lines.append(f"| {cat.value.upper()} | " + " | ".join(cells) + " |")
        lines.append("")

    if any(fm.metrics.degenerate for fm in report.folds):
        lines.append("`*` includes degenerate 0/0 folds reported as 0")
        lines.append("")
    return "\n".join(lines)


def _render_csv(report: MetricsReport) -> str:
    configs = report.configs()
    columns = ["dimension", "category"]
    for config in configs:
        columns.extend(
            [
                f"{config}_precision",
                f"{config}_recall",
                f"{config}_f1",
                f"{config}_degenerate",
            ]
        )
    lines = [",".join(columns)]
    for dimension, category in report.cells():
        row = [dimension.value, category.value]
        for config in configs:
            metrics = report.mean_metrics(dimension, category, config)
            if metrics is None:
                row.extend(["", "", "", ""])
            else:
                row.extend(
                    [
                        format2(metrics.precision),
                        format2(metrics.recall),
                        format2(metrics.f1),
                        "1" if metrics.degenerate else "0",
                    ]
                )
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
