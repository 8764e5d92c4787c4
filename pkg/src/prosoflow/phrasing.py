"""Phrase break handling.

Supplies break locations from reference speech at training time (silence
detector) and from plain text at inference time (rule-based or learned
predictor), and injects duration-bearing BRK tokens into the phone
sequence so the duration predictor can model pauses explicitly.

The detector and predictor are swappable callables: any checkpont-backed
model honoring the same contracts can stand behind them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import MIN_BREAK_FRAMES, SILENCE_ENERGY, BreakAnnotation, Utterance

# Sentinel token id for a phrase break in an extended phone sequence.
BRK_TOKEN = -1

# Rows of the break embedding table.
EMB_NONFINAL = 0
EMB_FINAL = 1
EMB_BRK = 2

BREAK_PUNCTUATION = (",", ".", ";", ":", "?", "!")


class BreakDetector(Protocol):
    def __call__(self, utterance: Utterance) -> BreakAnnotation: ...


class BreakPredictor(Protocol):
    def __call__(self, words: Sequence[str]) -> BreakAnnotation: ...


@dataclass
class ExtendedPhoneSequence:
    """Phone ids with BRK sentinels, plus a per-token origin map.

    origins[i] is ("phone", word_index) or ("break", word_index) where the
    break follows that word.  Length is always T_text + number of breaks.
    """

    tokens: list[int]
    origins: list[tuple[str, int]]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.origins):
            raise ValueError("tokens and origins must have equal length")

    def __len__(self) -> int:
        return len(self.tokens)

    def is_break(self) -> np.ndarray:
        return np.array([kind == "break" for kind, _ in self.origins], dtype=bool)

    def final_words(self) -> set[int]:
        return {word for kind, word in self.origins if kind == "break"}

    def phrase_indices(self) -> np.ndarray:
        """Phrase number per token; a BRK closes its own phrase."""
        out = np.empty(len(self.tokens), dtype=np.int64)
        phrase = 0
        for i, (kind, _) in enumerate(self.origins):
            out[i] = phrase
            if kind == "break":
                phrase += 1
        return out

    def n_phrases(self) -> int:
        return int(sum(1 for kind, _ in self.origins if kind == "break"))


def silence_mask(utterance) -> np.ndarray:
    """Frames that count as silence: low mel energy and unvoiced pitch.

    Works on anything exposing .mel (with frame_energy) and .pitch
    (with voiced flags) — corpus utterances and synthesis results alike.
    """
    energy = utterance.mel.frame_energy()
    return (energy < SILENCE_ENERGY) & ~utterance.pitch.voiced


def detect_breaks_silence(utterance, min_gap_frames: int = MIN_BREAK_FRAMES) -> BreakAnnotation:
    """Place a break after word w iff >= min_gap_frames of silence follow it.

    Deterministic scan over the frame/word alignment; an empty annotation
    is a valid result.
    """
    silent = silence_mask(utterance)
    align = np.asarray(utterance.frame_word_alignment)
    found: dict[int, int] = {}
    i = 0
    n = len(silent)
    while i < n:
        if not silent[i]:
            i += 1
            continue
        j = i
        while j < n and silent[j]:
            j += 1
        if j - i >= min_gap_frames and i > 0 and align[i - 1] >= 0:
            word = int(align[i - 1])
            if word not in found:
                found[word] = j - i
        i = j
    words = tuple(sorted(found))
    return BreakAnnotation(words, tuple(found[w] for w in words))


def predict_breaks_rule(words: Sequence[str]) -> BreakAnnotation:
    """Punctuation-based baseline: break after trailing punctuation, and
    always after the final word."""
    if len(words) == 0:
        raise ValueError("cannot predict breaks for an empty word list")
    idx = {i for i, w in enumerate(words) if w.rstrip().endswith(BREAK_PUNCTUATION)}
    idx.add(len(words) - 1)
    return BreakAnnotation(tuple(sorted(idx)))


# ---------------------------------------------------------------------------
# Learned per-word break tagger (stand-in for a fine-tuned text model).


class BreakTagger(nn.Module):
    """Per-word binary classifier: word embedding -> MLP -> break logit."""

    def __init__(self, vocab: dict[str, int], d_embed: int = 32):
        super().__init__()
        self.vocab = vocab
        self.unk_index = vocab["<unk>"]
        self.embed = nn.Embedding(len(vocab), d_embed)
        self.net = nn.Sequential(nn.Linear(d_embed, d_embed), nn.ReLU(), nn.Linear(d_embed, 1))

    def word_indices(self, words: Sequence[str]) -> torch.Tensor:
        return torch.tensor([self.vocab.get(w, self.unk_index) for w in words], dtype=torch.long)

    def forward(self, word_indices: torch.Tensor) -> torch.Tensor:
        return self.net(self.embed(word_indices)).squeeze(-1)

    @torch.no_grad()
    def predict(self, words: Sequence[str]) -> BreakAnnotation:
        if len(words) == 0:
            raise ValueError("cannot predict breaks for an empty word list")
        probs = torch.sigmoid(self.forward(self.word_indices(words)))
        idx = tuple(int(i) for i in range(len(words)) if probs[i].item() > 0.5)
        return BreakAnnotation(idx)


def build_word_vocab(corpus: Sequence[Utterance]) -> dict[str, int]:
    words = sorted({w for utt in corpus for w in utt.text})
    vocab = {"<unk>": 0}
    for w in words:
        vocab[w] = len(vocab)
    return vocab


def train_break_tagger(
    corpus: Sequence[Utterance],
    detector: BreakDetector = detect_breaks_silence,
    epochs: int = 400,
    lr: float = 0.05,
    seed: int = 0,
) -> BreakTagger:
    """Fit the tagger on detector-produced annotations.

    The silence detector supplies the training labels, mirroring how a
    frozen speech-side detector would label data for a text-side model.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train a break tagger on an empty corpus")
    torch.manual_seed(seed)
    tagger = BreakTagger(build_word_vocab(corpus))
    samples = []
    for utt in corpus:
        ann = detector(utt)
        labels = torch.zeros(len(utt.text))
        for w in ann.last_word_indices:
            labels[w] = 1.0
        samples.append((tagger.word_indices(utt.text), labels))
    opt = torch.optim.Adam(tagger.parameters(), lr=lr)
    loss_fn = nn.BCEWithLogitsLoss()
    for _ in range(epochs):
        opt.zero_grad()
        loss = sum(loss_fn(tagger(idx), lab) for idx, lab in samples) / len(samples)
        loss.backward()
        opt.step()
    tagger.eval()
    return tagger


def predict_breaks_learned(tagger: BreakTagger, words: Sequence[str]) -> BreakAnnotation:
    return tagger.predict(words)


def evaluate_break_predictor(
    predictor: Callable[[Sequence[str]], BreakAnnotation],
    corpus: Sequence[Utterance],
    detector: BreakDetector = detect_breaks_silence,
) -> dict[str, tuple[float, float, float]]:
    """Micro-averaged precision/recall/F1, with and without the
    sentence-final break (which every utterance trivially carries)."""
    stats = {"with_final": [0, 0, 0], "without_final": [0, 0, 0]}  # tp, n_pred, n_gt
    for utt in corpus:
        gt = set(detector(utt).last_word_indices)
        pred = set(predictor(utt.text).last_word_indices)
        final = len(utt.text) - 1
        for key, drop_final in (("with_final", False), ("without_final", True)):
            g = gt - {final} if drop_final else gt
            p = pred - {final} if drop_final else pred
            stats[key][0] += len(g & p)
            stats[key][1] += len(p)
            stats[key][2] += len(g)
    out = {}
    for key, (tp, n_pred, n_gt) in stats.items():
        precision = tp / n_pred if n_pred else (1.0 if n_gt == 0 else 0.0)
        recall = tp / n_gt if n_gt else (1.0 if n_pred == 0 else 0.0)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        out[key] = (precision, recall, f1)
    return out


def format_break_report(results: dict[str, tuple[float, float, float]]) -> str:
    lines = [f"{'':24s} {'Precision':>10s} {'Recall':>10s} {'F1':>10s}"]
    labels = {"with_final": "w final-break", "without_final": "w/o final-break"}
    for key, label in labels.items():
        p, r, f1 = results[key]
        lines.append(f"{label:24s} {p:10.4f} {r:10.4f} {f1:10.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Extended phone sequences and break embeddings.


def insert_break_tokens(
    phones: Sequence[int],
    word_spans: Sequence[tuple[int, int]],
    breaks: BreakAnnotation,
) -> ExtendedPhoneSequence:
    """Insert one BRK sentinel after the last phone of each phrase-final word."""
    for b in breaks.last_word_indices:
        if b < 0 or b >= len(word_spans):
            raise ValueError(f"break index {b} out of range for {len(word_spans)} words")
    break_set = set(breaks.last_word_indices)
    tokens: list[int] = []
    origins: list[tuple[str, int]] = []
    phone_cursor = 0
    for word, (start, end) in enumerate(word_spans):
        for p in range(start, end + 1):
            tokens.append(int(phones[p]))
            origins.append(("phone", word))
            phone_cursor += 1
        if word in break_set:
            tokens.append(BRK_TOKEN)
            origins.append(("break", word))
    return ExtendedPhoneSequence(tokens, origins)


class BreakEmbedder(nn.Module):
    """3-row embedding table: non-final word, phrase-final word, BRK slot."""

    def __init__(self, d_break: int = 32):
        super().__init__()
        self.table = nn.Embedding(3, d_break)

    def forward(self, extended: ExtendedPhoneSequence) -> torch.Tensor:
        final = extended.final_words()
        rows = []
        for kind, word in extended.origins:
            if kind == "break":
                rows.append(EMB_BRK)
            else:
                rows.append(EMB_FINAL if word in final else EMB_NONFINAL)
        return self.table(torch.tensor(rows, dtype=torch.long))


def embed_breaks(extended: ExtendedPhoneSequence, table: BreakEmbedder) -> torch.Tensor:
    """Per-token break embeddings; length equals the extended sequence."""
    return table(extended)
