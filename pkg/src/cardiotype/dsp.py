"""Log-power spectrograms with fixed 224x224 geometry.

The recipe: slide a Blackman-windowed frame over a 10 s segment, zero-pad
each frame to 447 DFT points (one-sided spectrum = 224 bins), take the
squared magnitude, then the natural log with a small floor. The hop size is
derived from the target width, so every segment yields exactly 224 frames.

Two export containers, both bit-exact:
  * binary PGM (P5, maxval 255) of the min-max normalized grid, top row =
    highest frequency bin;
  * "SPEC" f32 container with the raw log values for lossless interchange.

Internal computation is double precision; f32 only at export. The DFT goes
through numpy's rfft, which the test suite holds to a naive O(N^2) DFT
oracle at 1e-9 relative error.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .signal_io import Channel, Segment

SPEC_MAGIC = b"SPEC"


def blackman_window(length: int) -> np.ndarray:
    """Symmetric Blackman window w(n) = 0.42 - 0.5 cos(2 pi n / (L-1)) + 0.08 cos(4 pi n / (L-1))."""
    if length < 2:
        raise ValueError(f"window length must be >= 2, got {length}")
    n = np.arange(length)
    phase = 2.0 * np.pi * n / (length - 1)
    return 0.42 - 0.5 * np.cos(phase) + 0.08 * np.cos(2.0 * phase)


def solve_hop(seg_len: int, window_len: int, target_width: int) -> int:
    """Largest hop whose frame count floor((seg_len - window_len)/hop) + 1 >= target_width."""
    if seg_len <= window_len:
        raise ValueError(f"segment length {seg_len} must exceed window length {window_len}")
    if target_width < 2:
        raise ValueError(f"target_width must be >= 2, got {target_width}")
    hop = (seg_len - window_len) // (target_width - 1)
    if hop < 1:
        raise ValueError(
            f"segment of {seg_len} samples too short for width {target_width} "
            f"with window {window_len}"
        )
    return hop


def one_sided_bins(dft_points: int) -> int:
    return dft_points // 2 + 1


@dataclass(frozen=True)
class SpectrogramConfig:
    window_len: int
    hop: int
    dft_points: int = 447
    target_height: int = 224
    target_width: int = 224
    log_floor_epsilon: float = 1e-12

    def __post_init__(self) -> None:
        if self.window_len < 2:
            raise ValueError(f"window_len must be >= 2, got {self.window_len}")
        if self.window_len > self.dft_points:
            raise ValueError(
                f"window_len {self.window_len} exceeds dft_points {self.dft_points}"
            )
        if self.hop < 1:
            raise ValueError(f"hop must be >= 1, got {self.hop}")
        if one_sided_bins(self.dft_points) != self.target_height:
            raise ValueError(
                f"dft_points {self.dft_points} yields {one_sided_bins(self.dft_points)} "
                f"one-sided bins, target_height is {self.target_height}"
            )
        if self.log_floor_epsilon <= 0:
            raise ValueError("log_floor_epsilon must be positive")

    def frame_count(self, n_samples: int) -> int:
        return (n_samples - self.window_len) // self.hop + 1


# The two production window lengths; hop comes from the target width.
WINDOW_CONFIG_A = 100
WINDOW_CONFIG_B = 327


def preset_config(choice: str, seg_len: int = 2560) -> SpectrogramConfig:
    """Config "a" (window 100, hop 11 at 2560 samples) or "b" (window 327, hop 10)."""
    windows = {"a": WINDOW_CONFIG_A, "b": WINDOW_CONFIG_B}
    if choice not in windows:
        raise ValueError(f"unknown config choice {choice!r}, expected 'a' or 'b'")
    window_len = windows[choice]
    return SpectrogramConfig(
        window_len=window_len, hop=solve_hop(seg_len, window_len, 224)
    )


@dataclass(frozen=True)
class SpectrogramSource:
    subject_id: int
    clip_id: int
    channel: Channel
    offset_samples: int


@dataclass
class Spectrogram:
    """target_height x target_width grid of log-power values (rows = frequency bins, row 0 = DC)."""

    values: np.ndarray
    config: SpectrogramConfig
    source: SpectrogramSource


def stft_power_frames(samples: np.ndarray, config: SpectrogramConfig) -> np.ndarray:
    """Squared-magnitude one-sided DFT of each Blackman-windowed frame.

    Frame m covers samples[m*hop : m*hop + window_len]; each frame is
    zero-padded to dft_points before the transform. Returns a
    (frame_count, one_sided_bins) float64 grid.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError(f"expected 1-D samples, got shape {samples.shape}")
    if samples.size < config.window_len:
        raise ValueError(
            f"need at least {config.window_len} samples, got {samples.size}"
        )
    frames = np.lib.stride_tricks.sliding_window_view(samples, config.window_len)
    frames = frames[:: config.hop] * blackman_window(config.window_len)
    spectrum = np.fft.rfft(frames, n=config.dft_points, axis=1)
    return spectrum.real**2 + spectrum.imag**2


def log_spectrogram(seg: Segment, config: SpectrogramConfig) -> Spectrogram:
    """Full pipeline for one segment: STFT power, log floor, fixed geometry.

    The power grid is mapped through ln(v + epsilon), transposed so rows are
    frequency bins and columns are time frames, and truncated to the first
    target_width frames. Errors out if the segment yields fewer frames than
    the target width.
    """
    power = stft_power_frames(seg.samples, config)
    if power.shape[0] < config.target_width:
        raise ValueError(
            f"segment yields {power.shape[0]} frames, need {config.target_width}; "
            f"window {config.window_len}, hop {config.hop}"
        )
    values = np.log(power + config.log_floor_epsilon).T[:, : config.target_width]
    return Spectrogram(
        values=values,
        config=config,
        source=SpectrogramSource(
            subject_id=seg.subject_id,
            clip_id=seg.clip_id,
            channel=seg.channel,
            offset_samples=seg.offset_samples,
        ),
    )


def batch_log_spectrograms(
    segments: Sequence[Segment],
    config: SpectrogramConfig,
    max_workers: int = 1,
) -> list[Spectrogram]:
    """Spectrograms for many segments, ordered by (subject, clip, offset)."""
    ordered = sorted(
        segments, key=lambda s: (s.subject_id, s.clip_id, s.offset_samples)
    )
    if max_workers <= 1 or len(ordered) < 2:
        return [log_spectrogram(s, config) for s in ordered]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda s: log_spectrogram(s, config), ordered))


def minmax_unit(values: np.ndarray) -> np.ndarray:
    """Min-max map to [0, 1]; a constant grid maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def normalize_unit(spec: Spectrogram) -> np.ndarray:
    return minmax_unit(spec.values)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, halves away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def export_pgm(spec: Spectrogram, path: Path | str) -> None:
    """Binary PGM (P5, maxval 255) of the normalized grid, top row = highest bin."""
    norm = normalize_unit(spec)
    pixels = round_half_away(np.flipud(norm) * 255.0).astype(np.uint8)
    height, width = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes(order="C"))


def read_pgm(path: Path | str) -> tuple[int, int, int, bytes]:
    """Parse a binary PGM written by export_pgm; returns (width, height, maxval, pixels)."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    width, height, maxval = (int(f) for f in fields[1:])
    pixels = data[pos + 1 :]
    if len(pixels) != width * height:
        raise DataError(
            f"{path}: expected {width * height} pixel bytes, got {len(pixels)}"
        )
    return width, height, maxval, pixels


def export_f32(spec: Spectrogram, path: Path | str) -> None:
    """Lossless-interchange container: b"SPEC", u32 height, u32 width, f32 LE row-major."""
    values = np.asarray(spec.values)
    height, width = values.shape
    with open(path, "wb") as fh:
        fh.write(SPEC_MAGIC)
        fh.write(struct.pack("<II", height, width))
        fh.write(values.astype("<f4").tobytes(order="C"))


def read_f32(path: Path | str) -> np.ndarray:
    """Read a "SPEC" container back as a float32 (height, width) array."""
    data = Path(path).read_bytes()
    if data[:4] != SPEC_MAGIC:
        raise DataError(
            f"{path}: bad magic {data[:4]!r}, expected {SPEC_MAGIC!r}"
        )
    if len(data) < 12:
        raise DataError(f"{path}: truncated header")
    height, width = struct.unpack("<II", data[4:12])
    expected = 12 + height * width * 4
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes, got {len(data)}")
    return np.frombuffer(data[12:], dtype="<f4").reshape(height, width).copy()
