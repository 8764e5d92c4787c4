"""Pitch shape processing for phrase-final words.

Raw f0 tracks are discrete and gappy (unvoiced frames carry no value).
This module turns them into continuous, smoothed contours and extracts
offset-perturbed shape segments for the last word of each phrase, so
downstream encoders see the *shape* of the contour rather than its
absolute register.

All f0 values are kept on a fixed dyadic grid (multiples of 2**-20 Hz,
~1e-6 Hz resolution).  Grid-aligned values below 512 Hz are closed under
float64 addition/subtraction, which makes offset perturbation preserve
the first-difference sequence bit-exactly instead of merely to rounding
error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # pragma: no cover - import only for annotations
    from .corpus import BreakAnnotation, Utterance

# Dyadic grid step for all stored f0 values, see module docstring.
PITCH_GRID = 2.0**-20

# Default uniform offset range for shape perturbation (Hz).  Spans typical
# speech f0 so the subtracted offset genuinely randomizes register.
F_MIN_DEFAULT = 50.0
F_MAX_DEFAULT = 300.0

SMOOTH_WINDOW_DEFAULT = 9


def snap_to_grid(values: np.ndarray | float) -> np.ndarray | float:
    """Round Hz values to the PITCH_GRID lattice."""
    return np.round(np.asarray(values, dtype=np.float64) / PITCH_GRID) * PITCH_GRID


@dataclass
class PitchContour:
    """Framewise f0 track with voiced flags.

    f0 is in Hz; unvoiced frames conventionally hold 0.0 until
    interpolation fills them.  Lengths of f0 and voiced always agree.
    """

    f0: np.ndarray
    voiced: np.ndarray
    frame_rate: float = 22050.0 / 256.0

    def __post_init__(self) -> None:
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.f0.shape != self.voiced.shape:
            raise ValueError(
                f"f0 and voiced lengths differ: {self.f0.shape} vs {self.voiced.shape}"
            )
        if self.f0.ndim != 1:
            raise ValueError("pitch contour must be one-dimensional")
        bad = self.voiced & ~(np.isfinite(self.f0) & (self.f0 > 0))
        if bad.any():
            raise ValueError(f"voiced frames must carry finite positive f0 (frame {int(np.argmax(bad))})")

    def __len__(self) -> int:
        return len(self.f0)


@dataclass
class PitchShapeSegment:
    """Contiguous pitch slice of one phrase-final word, offset-perturbed.

    Values may be negative after the offset subtraction; only their
    differences (the shape) are meaningful.
    """

    values: np.ndarray
    source_word: int
    frame_span: tuple[int, int] = field(default=(0, 0))  # [start, end)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.values) < 1:
            raise ValueError("pitch shape segment must contain at least one frame")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("pitch shape segment values must be finite")

    def __len__(self) -> int:
        return len(self.values)


def interpolate(contour: PitchContour) -> PitchContour:
    """Fill unvoiced gaps by linear interpolation between voiced neighbors.

    Leading/trailing unvoiced frames are set to the nearest voiced value
    (edge extension; no slope is invented).  The original voiced flags are
    preserved on the result so metrics can still tell which frames were
    actually voiced.

    Raises ValueError on an all-unvoiced contour.
    """
    voiced_idx = np.flatnonzero(contour.voiced)
    if len(voiced_idx) == 0:
        raise ValueError("cannot interpolate an all-unvoiced pitch contour")
    frames = np.arange(len(contour))
    filled = np.interp(frames, voiced_idx, contour.f0[voiced_idx])
    return PitchContour(snap_to_grid(filled), contour.voiced.copy(), contour.frame_rate)


def smooth(contour: PitchContour, window: int = SMOOTH_WINDOW_DEFAULT) -> PitchContour:
    """Centered moving average with edge replication.

    Expects a fully interpolated contour.  Window must be odd and >= 1;
    window 1 is the identity and constant contours are unchanged.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"smoothing window must be a positive odd integer, got {window}")
    if window == 1:
        return PitchContour(contour.f0.copy(), contour.voiced.copy(), contour.frame_rate)
    half = window // 2
    padded = np.pad(contour.f0, half, mode="edge")
    kernel = np.full(window, 1.0 / window)
    smoothed = np.convolve(padded, kernel, mode="valid")
    return PitchContour(snap_to_grid(smoothed), contour.voiced.copy(), contour.frame_rate)


def perturb(
    values: np.ndarray,
    rng: np.random.Generator,
    f_min: float = F_MIN_DEFAULT,
    f_max: float = F_MAX_DEFAULT,
    source_word: int = 0,
    frame_span: tuple[int, int] = (0, 0),
) -> PitchShapeSegment:
    """Subtract one uniform random offset from a whole segment.

    One offset o ~ Uniform[f_min, f_max] is drawn per segment and
    subtracted from every value, destroying absolute register while
    preserving the first-difference sequence.  The offset is snapped to
    PITCH_GRID so that, for grid-aligned inputs, differences survive
    bit-exactly.
    """
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ValueError("cannot perturb an empty segment")
    if f_min > f_max:
        raise ValueError(f"f_min must not exceed f_max ({f_min} > {f_max})")
    offset = snap_to_grid(rng.uniform(f_min, f_max))
    return PitchShapeSegment(values - offset, source_word=source_word, frame_span=frame_span)


def extract_last_word_segments(
    contour: PitchContour,
    utterance: "Utterance",
    breaks: "BreakAnnotation",
    rng: np.random.Generator,
    f_min: float = F_MIN_DEFAULT,
    f_max: float = F_MAX_DEFAULT,
) -> list[PitchShapeSegment]:
    """Slice and perturb the contour at every phrase-final word.

    One segment per break, in word order, covering exactly the frames
    assigned to that word by the utterance's frame/word alignment.  The
    contour is expected to be interpolated and smoothed already.
    """
    alignment = np.asarray(utterance.frame_word_alignment)
    if len(alignment) != len(contour):
        raise ValueError(
            f"frame alignment length {len(alignment)} does not match contour length {len(contour)}"
        )
    segments = []
    for word in breaks.last_word_indices:
        frames = np.flatnonzero(alignment == word)
        if len(frames) == 0:
            raise ValueError(f"phrase-final word {word} has an empty frame span")
        start, end = int(frames[0]), int(frames[-1]) + 1
        segments.append(
            perturb(
                contour.f0[start:end],
                rng,
                f_min=f_min,
                f_max=f_max,
                source_word=int(word),
                frame_span=(start, end),
            )
        )
    return segments
