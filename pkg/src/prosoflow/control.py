"""Prosody control surface.

Edits reference intonation segments (replace a last word's pitch shape
with a line of chosen slope) and break annotations (add/remove a phrase
break) before synthesis, so phrasing and terminal intonation can be
steered independently of the reference speech.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .corpus import BreakAnnotation, Utterance
from .model import ProsodyModel, SynthesisResult, prepare_reference, synthesize
from .pitch import PitchShapeSegment


def set_segment_slope(segment: PitchShapeSegment, k: float) -> PitchShapeSegment:
    """Replace the segment with the slope-k line through its mean.

    p'(i) = mean(p) + k * (i - (L-1)/2), with k in Hz per frame; k = 0
    yields a level tone at the segment mean, and the mean itself is
    preserved for every k.
    """
    n = len(segment.values)
    if n == 0:
        raise ValueError("cannot set the slope of an empty segment")
    center = (n - 1) / 2.0
    values = segment.values.mean() + k * (np.arange(n) - center)
    return PitchShapeSegment(values, segment.source_word, segment.frame_span)


def add_break(breaks: BreakAnnotation, word_idx: int) -> BreakAnnotation:
    """Insert a break after word_idx; adding an existing break warns and
    returns the annotation unchanged."""
    if word_idx in breaks.last_word_indices:
        warnings.warn(f"break after word {word_idx} already present; no-op", stacklevel=2)
        return BreakAnnotation(breaks.last_word_indices)
    return BreakAnnotation(tuple(sorted((*breaks.last_word_indices, word_idx))))


def remove_break(breaks: BreakAnnotation, word_idx: int) -> BreakAnnotation:
    """Delete the break after word_idx; removing an absent break raises."""
    if word_idx not in breaks.last_word_indices:
        raise ValueError(f"no break after word {word_idx} to remove")
    return BreakAnnotation(tuple(i for i in breaks.last_word_indices if i != word_idx))


@dataclass
class SlopeEdit:
    word_idx: int
    k: float


@dataclass
class BreakEdit:
    word_idx: int
    action: str  # "add" | "remove"

    def __post_init__(self) -> None:
        if self.action not in ("add", "remove"):
            raise ValueError(f"unknown break edit action {self.action!r}")


def apply_edits(
    breaks: BreakAnnotation,
    segments_by_word: dict[int, PitchShapeSegment],
    edits: list[SlopeEdit | BreakEdit],
) -> tuple[BreakAnnotation, dict[int, PitchShapeSegment]]:
    """Apply break edits then slope edits to reference-derived prosody."""
    segments = dict(segments_by_word)
    for edit in edits:
        if isinstance(edit, BreakEdit):
            if edit.action == "add":
                breaks = add_break(breaks, edit.word_idx)
            else:
                breaks = remove_break(breaks, edit.word_idx)
                segments.pop(edit.word_idx, None)
    for edit in edits:
        if isinstance(edit, SlopeEdit):
            if edit.word_idx not in segments:
                raise ValueError(
                    f"no pitch segment for word {edit.word_idx}; it is not a phrase-final word"
                )
            segments[edit.word_idx] = set_segment_slope(segments[edit.word_idx], edit.k)
    return breaks, segments


def synthesize_with_control(
    model: ProsodyModel,
    target_words: list[str],
    reference: Utterance,
    edits: list[SlopeEdit | BreakEdit],
    lexicon: dict[str, list[int]],
    seed: int = 0,
    n_steps: int = 10,
) -> SynthesisResult:
    """Parallel synthesis with edited phrasing/intonation.

    Breaks are derived from the reference (silence detector), edited, and
    used both as the target break annotation (BRK tokens) and to select
    the reference pitch segments.  A break added by an edit gets its
    segment sliced from the reference contour; removing the only break
    leaves zero reference segments and engages the learned fallback
    embedding.
    """
    if model.trained_steps == 0:
        warnings.warn("synthesizing with an untrained model", stacklevel=2)
    rng = np.random.default_rng(seed)
    breaks, segments = prepare_reference(reference, rng)
    segments_by_word = {s.source_word: s for s in segments}
    edited_breaks, segments_by_word = apply_edits(breaks, segments_by_word, edits)

    added = [w for w in edited_breaks.last_word_indices if w not in segments_by_word]
    if added:
        add_ann = BreakAnnotation(tuple(sorted(added)))
        _, new_segments = prepare_reference(reference, rng, breaks=add_ann)
        for seg in new_segments:
            segments_by_word[seg.source_word] = seg

    for w in edited_breaks.last_word_indices:
        if w >= len(target_words):
            raise ValueError(f"edited break index {w} outside the target text")
    ordered_segments = [segments_by_word[w] for w in edited_breaks.last_word_indices]
    return synthesize(
        model,
        target_words,
        lexicon,
        reference,
        target_breaks=edited_breaks,
        segments=ordered_segments,
        seed=seed,
        n_steps=n_steps,
    )
