"""Text-side last-word embeddings and the alignment loss.

Produces one 192-D embedding per phrase-final word from the text alone
(a trainable embedding table plus a two-layer encoder; any pretrained
word-embedding source can be plugged in through the same contract).  The
alignment loss pulls these toward the projected reference intonation
features so inference can query intonation without matched speech.
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .corpus import BreakAnnotation

D_TEXT_EMBED = 192


class LastWordTextEncoder(nn.Module):
    """Word embedding table + 2-layer feed-forward encoder, 192-D output.

    Context-free by design: the same word always maps to the same vector,
    and out-of-vocabulary words share a single UNK row.
    """

    def __init__(self, vocab: dict[str, int], d_word: int = 96, d_out: int = D_TEXT_EMBED):
        super().__init__()
        if "<unk>" not in vocab:
            raise ValueError("vocabulary must include an '<unk>' entry")
        self.vocab = dict(vocab)
        self.unk_index = self.vocab["<unk>"]
        self.d_out = d_out
        self.embed = nn.Embedding(len(self.vocab), d_word)
        self.net = nn.Sequential(nn.Linear(d_word, d_out), nn.ReLU(), nn.Linear(d_out, d_out))

    def forward(self, words: Sequence[str]) -> torch.Tensor:
        idx = torch.tensor(
            [self.vocab.get(w, self.unk_index) for w in words], dtype=torch.long
        )
        return self.net(self.embed(idx))

    def embed_last_words(self, words: Sequence[str], breaks: BreakAnnotation) -> torch.Tensor:
        """One embedding per phrase-final word, in word order.

        Returns an empty (0, d_out) tensor when there are no breaks.
        """
        if len(breaks) == 0:
            return torch.zeros(0, self.d_out)
        last_words = [words[i] for i in breaks.last_word_indices]
        return self.forward(last_words)


def embed_last_words(
    words: Sequence[str], breaks: BreakAnnotation, encoder: LastWordTextEncoder
) -> torch.Tensor:
    return encoder.embed_last_words(words, breaks)


def alignment_loss(e: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Sum over last words of the squared L2 distance ||e_k - r_k||^2.

    r is treated as a constant (detached here), so gradients reach only
    the text-side parameters.  Zero last words yield a zero loss.
    """
    if e.shape != r.shape:
        raise ValueError(f"embedding/reference shape mismatch: {tuple(e.shape)} vs {tuple(r.shape)}")
    if e.numel() == 0:
        return torch.zeros((), dtype=torch.float32)
    return ((e - r.detach()) ** 2).sum()
