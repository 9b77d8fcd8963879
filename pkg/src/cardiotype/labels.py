"""Binary Big-Five labels, clip categories, and stratified fold plans.

Each personality dimension has a fixed threshold on the per-subject mean
questionnaire score; at-or-below maps to class 0, above maps to class 1.
Class display names are attached only at reporting time. Note the openness
naming runs opposite to the other four dimensions (class 0 is "open-minded",
class 1 "close-minded"); `class_names` takes a flag to swap them for
presentation without touching the stored bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .rng import mix64, shuffled
from .signal_io import SCORES_HEADER


class Dimension(str, Enum):
    EXTRAVERSION = "ext"
    AGREEABLENESS = "agr"
    CONSCIENTIOUSNESS = "con"
    EMOTIONAL_STABILITY = "ems"
    OPENNESS = "ope"


THRESHOLDS: dict[Dimension, float] = {
    Dimension.EXTRAVERSION: 4.31,
    Dimension.AGREEABLENESS: 5.09,
    Dimension.CONSCIENTIOUSNESS: 5.14,
    Dimension.EMOTIONAL_STABILITY: 4.14,
    Dimension.OPENNESS: 4.95,
}

DIMENSION_TITLES: dict[Dimension, str] = {
    Dimension.EXTRAVERSION: "Extraversion",
    Dimension.AGREEABLENESS: "Agreeableness",
    Dimension.CONSCIENTIOUSNESS: "Conscientiousness",
    Dimension.EMOTIONAL_STABILITY: "Emotional Stability",
    Dimension.OPENNESS: "Openness",
}

_CLASS_NAMES: dict[Dimension, tuple[str, str]] = {
    Dimension.EXTRAVERSION: ("introvert", "extrovert"),
    Dimension.AGREEABLENESS: ("non-agreeable", "agreeable"),
    Dimension.CONSCIENTIOUSNESS: ("non-conscientious", "conscientious"),
    Dimension.EMOTIONAL_STABILITY: ("emotionally unstable", "emotionally stable"),
    # Source wording: at-or-below 4.95 is "open-minded", above is "close-minded".
    Dimension.OPENNESS: ("open-minded", "close-minded"),
}


def class_names(dimension: Dimension, swap_openness: bool = False) -> tuple[str, str]:
    """Display names for (class 0, class 1) of a dimension."""
    names = _CLASS_NAMES[Dimension(dimension)]
    if swap_openness and dimension == Dimension.OPENNESS:
        return names[1], names[0]
    return names


class ClipCategory(str, Enum):
    HAHV = "hahv"
    LAHV = "lahv"
    LALV = "lalv"
    HALV = "halv"
    ALL = "all"


def clip_category(clip_id: int) -> ClipCategory:
    """Map clip 1-9 -> HAHV, 10-18 -> LAHV, 19-27 -> LALV, 28-36 -> HALV."""
    if not 1 <= clip_id <= 36:
        raise ValueError(f"clip_id must be in 1..36, got {clip_id}")
    return (ClipCategory.HAHV, ClipCategory.LAHV, ClipCategory.LALV, ClipCategory.HALV)[
        (clip_id - 1) // 9
    ]


@dataclass(frozen=True)
class BigFiveScores:
    subject_id: int
    extraversion: float
    agreeableness: float
    conscientiousness: float
    emotional_stability: float
    openness: float

    def __post_init__(self) -> None:
        for dim in Dimension:
            if not math.isfinite(self.score(dim)):
                raise ValueError(
                    f"subject {self.subject_id}: non-finite {dim.name.lower()} score"
                )

    def score(self, dimension: Dimension) -> float:
        return {
            Dimension.EXTRAVERSION: self.extraversion,
            Dimension.AGREEABLENESS: self.agreeableness,
            Dimension.CONSCIENTIOUSNESS: self.conscientiousness,
            Dimension.EMOTIONAL_STABILITY: self.emotional_stability,
            Dimension.OPENNESS: self.openness,
        }[Dimension(dimension)]


def classify(scores: BigFiveScores, dimension: Dimension) -> int:
    """0 when the score is at or below the dimension threshold, 1 when above."""
    dimension = Dimension(dimension)
    return 1 if scores.score(dimension) > THRESHOLDS[dimension] else 0


def load_scores(path: Path | str) -> dict[int, BigFiveScores]:
    """Parse scores.csv into a subject_id -> BigFiveScores map."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"scores file not found: {path}")
    out: dict[int, BigFiveScores] = {}
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != SCORES_HEADER:
            raise DataError(f"{path}: unexpected header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            cells = line.rstrip("\n").split(",")
            if len(cells) != 6:
                raise DataError(f"{path}: line {lineno}: expected 6 cells, got {len(cells)}")
            try:
                subject_id = int(cells[0])
                values = [float(c) for c in cells[1:]]
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric cell") from None
            if subject_id in out:
                raise DataError(f"{path}: line {lineno}: duplicate subject {subject_id}")
            out[subject_id] = BigFiveScores(subject_id, *values)
    return out


@dataclass(frozen=True)
class SpectrogramRef:
    """A spectrogram's log-power grid plus the provenance needed for labeling."""

    subject_id: int
    clip_id: int
    offset_samples: int
    values: np.ndarray


@dataclass(frozen=True)
class LabeledExample:
    spectrogram: SpectrogramRef
    subject_id: int
    clip_id: int
    category: ClipCategory
    label: int

    @property
    def offset_samples(self) -> int:
        return self.spectrogram.offset_samples


def assemble(
    specs: Sequence[SpectrogramRef],
    scores: Mapping[int, BigFiveScores],
    dimension: Dimension,
    category: ClipCategory = ClipCategory.ALL,
) -> list[LabeledExample]:
    """Join spectrograms to their subject's binary label for one dimension.

    Filtered to the requested clip category (ALL keeps everything); output
    order is (subject_id, clip_id, offset).
    """
    dimension = Dimension(dimension)
    category = ClipCategory(category)
    out: list[LabeledExample] = []
    ordered = sorted(specs, key=lambda s: (s.subject_id, s.clip_id, s.offset_samples))
    for spec in ordered:
        if spec.subject_id not in scores:
            raise DataError(f"no scores row for subject {spec.subject_id}")
        cat = clip_category(spec.clip_id)
        if category is not ClipCategory.ALL and cat is not category:
            continue
        out.append(
            LabeledExample(
                spectrogram=spec,
                subject_id=spec.subject_id,
                clip_id=spec.clip_id,
                category=cat,
                label=classify(scores[spec.subject_id], dimension),
            )
        )
    return out


class Granularity(str, Enum):
    SEGMENT = "segment"
    SUBJECT = "subject"


@dataclass
class FoldPlan:
    k: int
    granularity: Granularity
    assignments: np.ndarray  # example index -> fold index
    seed: int

    def test_indices(self, fold: int) -> np.ndarray:
        self._check_fold(fold)
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        self._check_fold(fold)
        return np.flatnonzero(self.assignments != fold)

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise ValueError(f"fold index {fold} out of range for k={self.k}")


def stratified_kfold(
    examples: Sequence[LabeledExample],
    k: int,
    granularity: Granularity = Granularity.SEGMENT,
    seed: int = 0,
) -> FoldPlan:
    """Seeded shuffle within each class, then round-robin fold assignment.

    Subject granularity assigns whole subjects to folds, so no subject ever
    spans train and test. Every class present must have at least k members
    at the chosen granularity.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    granularity = Granularity(granularity)
    if not examples:
        raise DataError("no examples to split")

    assignments = np.full(len(examples), -1, dtype=np.int64)
    if granularity is Granularity.SEGMENT:
        by_class: dict[int, list[int]] = {}
        for i, ex in enumerate(examples):
            by_class.setdefault(ex.label, []).append(i)
        for label in sorted(by_class):
            members = by_class[label]
            if len(members) < k:
                raise DataError(
                    f"class {label} has {len(members)} examples, need >= {k} for {k}-fold"
                )
            for j, idx in enumerate(shuffled(members, mix64(seed, label))):
                assignments[idx] = j % k
    else:
        subject_class: dict[int, int] = {}
        subject_examples: dict[int, list[int]] = {}
        for i, ex in enumerate(examples):
            prev = subject_class.setdefault(ex.subject_id, ex.label)
            if prev != ex.label:
                raise ValueError(
                    f"subject {ex.subject_id} has mixed labels; cannot split by subject"
                )
            subject_examples.setdefault(ex.subject_id, []).append(i)
        by_class_subj: dict[int, list[int]] = {}
        for subject_id in sorted(subject_class):
            by_class_subj.setdefault(subject_class[subject_id], []).append(subject_id)
        for label in sorted(by_class_subj):
            members = by_class_subj[label]
            if len(members) < k:
                raise DataError(
                    f"class {label} has {len(members)} subjects, need >= {k} for {k}-fold"
                )
            for j, subject_id in enumerate(shuffled(members, mix64(seed, label))):
                for idx in subject_examples[subject_id]:
                    assignments[idx] = j % k

    return FoldPlan(k=k, granularity=granularity, assignments=assignments, seed=seed)


def write_fold_plan(plan: FoldPlan, path: Path | str) -> None:
    """Serialize a plan to a fold,example_index CSV for audit."""
    lines = ["fold,example_index"]
    lines.extend(f"{int(f)},{i}" for i, f in enumerate(plan.assignments))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
