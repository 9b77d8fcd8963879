"""ECG data model, converted-dataset loading, and synthetic signal generation.

Datasets live on disk in a documented converted layout:

    root/manifest.json              {"sample_rate_hz": 256, "subjects": N,
                                     "clips": M, "channels": [...]}
    root/scores.csv                 one row of questionnaire means per subject
    root/signals/S{ss}_C{cc}.csv    header "left_arm,right_arm", one row per
                                    sample, decimal millivolt values

Sample values are written with `repr(float)` so a write/load round trip is
bit-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, UsageError


class Channel(str, Enum):
    LEFT_ARM = "left_arm"
    RIGHT_ARM = "right_arm"


MANIFEST_NAME = "manifest.json"
SCORES_NAME = "scores.csv"
SIGNALS_DIR = "signals"
SCORES_HEADER = (
    "subject_id,extraversion,agreeableness,conscientiousness,"
    "emotional_stability,openness"
)


def signal_filename(subject_id: int, clip_id: int) -> str:
    return f"S{subject_id:02d}_C{clip_id:02d}.csv"


@dataclass
class EcgRecord:
    """One subject/clip channel of raw ECG samples (millivolts)."""

    subject_id: int
    clip_id: int
    channel: Channel
    sample_rate_hz: int
    samples: np.ndarray

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise ValueError("EcgRecord requires non-empty samples")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if self.subject_id < 1 or self.clip_id < 1:
            raise ValueError(
                f"subject_id and clip_id must be >= 1, got ({self.subject_id}, {self.clip_id})"
            )

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class Segment:
    """A fixed-length analysis window cut from one record."""

    subject_id: int
    clip_id: int
    channel: Channel
    offset_samples: int
    samples: np.ndarray


@dataclass
class DatasetManifest:
    root: Path
    sample_rate_hz: int
    subjects: int
    clips: int
    channels: list[str]
    checksums: dict[str, str] = field(default_factory=dict)


def synth_ecg(
    duration_s: float,
    sample_rate_hz: int,
    heart_rate_bpm: float,
    noise_std: float,
    seed: int,
) -> np.ndarray:
    """Generate a deterministic ECG-like waveform.

    Each beat is a sharp positive R peak flanked by small negative Q and S
    deflections (Gaussian bumps), repeated at the requested heart rate, plus
    zero-mean Gaussian noise of std `noise_std`. Beat centers sit at
    (k + 1/2) * 60/heart_rate so no beat is clipped at the edges.
    """
    if heart_rate_bpm <= 0:
        raise ValueError(f"heart_rate_bpm must be positive, got {heart_rate_bpm}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be non-negative, got {noise_std}")
    if sample_rate_hz <= 0:
        raise ValueError(f"sample_rate_hz must be positive, got {sample_rate_hz}")
    n = int(duration_s * sample_rate_hz)
    if n < 1:
        raise ValueError("duration_s * sample_rate_hz must be at least 1")

    t = np.arange(n) / sample_rate_hz
    x = np.zeros(n)
    period = 60.0 / heart_rate_bpm
    # (amplitude mV, offset s from beat center, gaussian sigma s)
    waves = ((-0.15, -0.025, 0.008), (1.0, 0.0, 0.010), (-0.20, 0.025, 0.008))
    center = 0.5 * period
    while center < duration_s:
        lo = max(0, int((center - 0.1) * sample_rate_hz))
        hi = min(n, int((center + 0.1) * sample_rate_hz) + 1)
        for amp, off, sigma in waves:
            x[lo:hi] += amp * np.exp(-0.5 * ((t[lo:hi] - center - off) / sigma) ** 2)
        center += period

    if noise_std > 0:
        x += np.random.default_rng(seed).normal(0.0, noise_std, n)
    return x


def segment(record: EcgRecord, seg_len_s: float) -> list[Segment]:
    """Cut a record into consecutive non-overlapping fixed-length segments.

    Trailing samples shorter than one segment are dropped; a record shorter
    than one segment yields an empty list.
    """
    if seg_len_s <= 0:
        raise ValueError(f"seg_len_s must be positive, got {seg_len_s}")
    seg_len = int(round(seg_len_s * record.sample_rate_hz))
    count = record.samples.size // seg_len
    return [
        Segment(
            subject_id=record.subject_id,
            clip_id=record.clip_id,
            channel=record.channel,
            offset_samples=i * seg_len,
            samples=record.samples[i * seg_len : (i + 1) * seg_len].copy(),
        )
        for i in range(count)
    ]


def load_manifest(root: Path | str) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    try:
        manifest = DatasetManifest(
            root=root,
            sample_rate_hz=int(raw["sample_rate_hz"]),
            subjects=int(raw["subjects"]),
            clips=int(raw["clips"]),
            channels=list(raw["channels"]),
            checksums=dict(raw.get("checksums", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: missing or malformed manifest field: {exc}") from exc
    if manifest.sample_rate_hz <= 0 or manifest.subjects < 1 or manifest.clips < 1:
        raise DataError(f"{path}: non-positive sample_rate_hz/subjects/clips")
    return manifest


def _verify_checksum(path: Path, expected: str) -> None:
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if digest != expected:
        raise DataError(f"{path}: checksum mismatch (expected {expected}, got {digest})")


def _parse_signal_file(path: Path, column: int, n_columns: int) -> np.ndarray:
    values: list[float] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno == 1:
                continue  # header already validated
            cells = line.rstrip("\n").split(",")
            if len(cells) != n_columns:
                raise DataError(
                    f"{path}: line {lineno}: expected {n_columns} cells, got {len(cells)}"
                )
            try:
                row = [float(cell) for cell in cells]
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric cell") from None
            values.append(row[column])
    if not values:
        raise DataError(f"{path}: no sample rows")
    return np.array(values, dtype=np.float64)


def load_dataset(
    root: Path | str,
    channel: Channel = Channel.LEFT_ARM,
    expected_sample_rate_hz: int | None = None,
) -> list[EcgRecord]:
    """Load every (subject, clip) signal present on disk for one channel.

    Records come back ordered by (subject_id, clip_id). A sample-rate
    mismatch against `expected_sample_rate_hz` is fatal, as is a missing
    manifest; malformed signal rows fail with the file and line number.
    """
    channel = Channel(channel)
    manifest = load_manifest(root)
    if (
        expected_sample_rate_hz is not None
        and manifest.sample_rate_hz != expected_sample_rate_hz
    ):
        raise DataError(
            f"sample-rate mismatch: manifest declares {manifest.sample_rate_hz} Hz, "
            f"expected {expected_sample_rate_hz} Hz"
        )
    if channel.value not in manifest.channels:
        raise DataError(
            f"channel {channel.value!r} not in manifest channels {manifest.channels}"
        )

    records: list[EcgRecord] = []
    signals = manifest.root / SIGNALS_DIR
    for subject_id in range(1, manifest.subjects + 1):
        for clip_id in range(1, manifest.clips + 1):
            path = signals / signal_filename(subject_id, clip_id)
            if not path.is_file():
                continue
            rel = f"{SIGNALS_DIR}/{path.name}"
            if rel in manifest.checksums:
                _verify_checksum(path, manifest.checksums[rel])
            with path.open(encoding="utf-8") as fh:
                header = fh.readline().rstrip("\n").split(",")
            if channel.value not in header:
                raise DataError(f"{path}: missing channel column {channel.value!r}")
            samples = _parse_signal_file(path, header.index(channel.value), len(header))
            records.append(
                EcgRecord(
                    subject_id=subject_id,
                    clip_id=clip_id,
                    channel=channel,
                    sample_rate_hz=manifest.sample_rate_hz,
                    samples=samples,
                )
            )
    return records


def write_dataset(
    root: Path | str,
    sample_rate_hz: int,
    subjects: int,
    clips: int,
    signals: Iterable[tuple[int, int, np.ndarray, np.ndarray]],
    scores_rows: Sequence[tuple[int, float, float, float, float, float]],
    force: bool = False,
    checksums: bool = False,
) -> None:
    """Write a complete dataset tree (manifest, scores, signals).

    `signals` yields (subject_id, clip_id, left_arm, right_arm) arrays.
    Refuses to write into an existing non-empty directory unless `force`.
    """
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise UsageError(f"output directory {root} is not empty (use --force to overwrite)")
    (root / SIGNALS_DIR).mkdir(parents=True, exist_ok=True)

    digests: dict[str, str] = {}
    for subject_id, clip_id, left, right in signals:
        if left.shape != right.shape:
            raise ValueError("left/right channel lengths differ")
        name = signal_filename(subject_id, clip_id)
        lines = ["left_arm,right_arm"]
        lines.extend(f"{float(l)!r},{float(r)!r}" for l, r in zip(left, right))
        body = "\n".join(lines) + "\n"
        (root / SIGNALS_DIR / name).write_text(body, encoding="utf-8")
        if checksums:
            digests[f"{SIGNALS_DIR}/{name}"] = hashlib.sha256(body.encode()).hexdigest()

    lines = [SCORES_HEADER]
    for subject_id, *scores in scores_rows:
        lines.append(f"{subject_id}," + ",".join(f"{float(s)!r}" for s in scores))
    (root / SCORES_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")

    manifest: dict = {
        "sample_rate_hz": sample_rate_hz,
        "subjects": subjects,
        "clips": clips,
        "channels": [Channel.LEFT_ARM.value, Channel.RIGHT_ARM.value],
    }
    if checksums:
        manifest["checksums"] = digests
    (root / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )
