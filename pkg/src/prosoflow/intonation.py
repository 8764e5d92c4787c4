"""Terminal intonation encoding.

A recurrent reference encoder compresses each last-word pitch shape
segment into a fixed 128-D feature; multi-head attention over a small
learnable bank of intonation shape tokens turns that feature into a
192-D last-word intonation embedding; scaled dot-product attention then
aligns reference embeddings to the target text's last words, so the
number of reference and target phrases may differ at inference.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .pitch import PitchShapeSegment

N_TOKENS = 6
D_TOKEN = 64
N_HEADS = 4
D_REF = 128
D_INTONATION = 192

# Reference-encoder input scales: segments are Hz-valued (roughly
# [-250, 350] after offset perturbation) and frame-to-frame deltas span
# a few Hz; the LSTM wants O(1) inputs on both channels.
VALUE_SCALE = 0.01
DELTA_SCALE = 0.25


class ReferenceEncoder(nn.Module):
    """Single-layer LSTM over (value, first-difference) frame pairs; the
    final hidden state is the feature.

    The explicit delta channel puts contour shape directly on the input,
    so slope information survives the offset perturbation by more than a
    trace.
    """

    def __init__(self, d_ref: int = D_REF):
        super().__init__()
        self.d_ref = d_ref
        self.lstm = nn.LSTM(input_size=2, hidden_size=d_ref, num_layers=1, batch_first=True)
        # default LSTM init leaves the final hidden state nearly blind to
        # the input at this width; boost the input weights so segment
        # differences survive the encoder from the first training step
        with torch.no_grad():
            for name, param in self.lstm.named_parameters():
                if "weight_ih" in name:
                    param.mul_(8.0)

    def forward(self, values: torch.Tensor | np.ndarray) -> torch.Tensor:
        values = torch.as_tensor(np.asarray(values), dtype=torch.float32)
        if values.numel() == 0:
            raise ValueError("cannot encode an empty pitch segment")
        values = values.reshape(-1)
        deltas = torch.zeros_like(values)
        deltas[1:] = values[1:] - values[:-1]
        x = torch.stack([values * VALUE_SCALE, deltas * DELTA_SCALE], dim=-1).unsqueeze(0)
        _, (h, _) = self.lstm(x)
        return h[-1, 0]

    def encode_segment(self, segment: PitchShapeSegment) -> torch.Tensor:
        return self.forward(segment.values)


class IntonationTokenLayer(nn.Module):
    """Multi-head attention of a reference feature over the token bank.

    Key/value/output maps are bias-free so that zeroing the bank provably
    zeroes the pre-projection output.  Returns the projected embedding and
    the per-head token weights.
    """

    def __init__(
        self,
        n_tokens: int = N_TOKENS,
        d_token: int = D_TOKEN,
        n_heads: int = N_HEADS,
        d_query: int = D_REF,
        d_out: int = D_INTONATION,
    ):
        super().__init__()
        if d_token % n_heads != 0:
            raise ValueError("d_token must be divisible by n_heads")
        self.n_tokens = n_tokens
        self.n_heads = n_heads
        self.d_head = d_token // n_heads
        self.tokens = nn.Parameter(torch.randn(n_tokens, d_token))
        self.w_query = nn.Linear(d_query, d_token, bias=False)
        self.w_key = nn.Linear(d_token, d_token, bias=False)
        self.w_value = nn.Linear(d_token, d_token, bias=False)
        self.w_out = nn.Linear(d_token, d_out, bias=False)
        # livelier-than-default scales: O(1) logits and an O(1) output
        # embedding from the start, so the intonation channel competes
        # with the text channel in the fusion concat before any training
        nn.init.normal_(self.w_query.weight, std=2.0 / math.sqrt(d_query))
        nn.init.normal_(self.w_key.weight, std=2.0 / math.sqrt(d_token))
        nn.init.normal_(self.w_value.weight, std=2.0 / math.sqrt(d_token))
        nn.init.normal_(self.w_out.weight, std=4.0 / math.sqrt(d_token))

    def forward(
        self, query: torch.Tensor, logit_bias: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """logit_bias, shape (n_tokens,), lets callers force a token."""
        q = self.w_query(query).reshape(self.n_heads, self.d_head)
        k = self.w_key(self.tokens).reshape(self.n_tokens, self.n_heads, self.d_head)
        v = self.w_value(self.tokens).reshape(self.n_tokens, self.n_heads, self.d_head)
        logits = torch.einsum("hd,nhd->hn", q, k) / math.sqrt(self.d_head)
        if logit_bias is not None:
            logits = logits + logit_bias.reshape(1, self.n_tokens)
        weights = torch.softmax(logits, dim=-1)
        summed = torch.einsum("hn,nhd->hd", weights, v)
        return self.w_out(summed.reshape(-1)), weights


def token_attention(
    query: torch.Tensor, layer: IntonationTokenLayer, logit_bias: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Last-word intonation embedding plus per-head token weights."""
    return layer(query, logit_bias=logit_bias)


def align_attention(
    target_queries: torch.Tensor,
    ref_keys: torch.Tensor,
    ref_values: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scaled dot-product attention from target last words to reference ones.

    Queries are target-side last-word text embeddings; keys are the
    projected reference intonation features (the space the text
    embeddings are trained toward, so matching phrases attract their own
    reference); values are the last-word intonation embeddings.  When
    ref_values is omitted the keys double as values.  Each output row is
    a convex combination of the values.  Raises on zero reference rows
    (synthesis falls back to a learned default).
    """
    if ref_values is None:
        ref_values = ref_keys
    if ref_keys.ndim != 2 or ref_keys.shape[0] == 0:
        raise ValueError("align_attention requires at least one reference last word")
    if ref_values.shape[0] != ref_keys.shape[0]:
        raise ValueError("reference keys and values must pair up")
    if target_queries.ndim != 2 or target_queries.shape[1] != ref_keys.shape[1]:
        raise ValueError(
            f"query dim {tuple(target_queries.shape)} does not match "
            f"key dim {tuple(ref_keys.shape)}"
        )
    d = target_queries.shape[1]
    logits = target_queries @ ref_keys.T / math.sqrt(d)
    weights = torch.softmax(logits, dim=-1)
    return weights @ ref_values


class IntonationEncoder(nn.Module):
    """Bundles the reference encoder, token bank, the projection of
    reference features into the 192-D alignment space, and the fallback
    embedding used when the reference speech has no phrase-final word."""

    def __init__(
        self,
        n_tokens: int = N_TOKENS,
        d_token: int = D_TOKEN,
        n_heads: int = N_HEADS,
        d_ref: int = D_REF,
        d_out: int = D_INTONATION,
    ):
        super().__init__()
        self.reference_encoder = ReferenceEncoder(d_ref)
        self.token_layer = IntonationTokenLayer(n_tokens, d_token, n_heads, d_ref, d_out)
        self.ref_projection = nn.Linear(d_ref, d_out, bias=False)
        self.default_embedding = nn.Parameter(torch.zeros(d_out))

    def encode_segments(
        self, segments: list[PitchShapeSegment]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Reference features (K, 128) and intonation embeddings (K, 192)."""
        if not segments:
            d_ref = self.reference_encoder.d_ref
            d_out = self.default_embedding.shape[0]
            return torch.zeros(0, d_ref), torch.zeros(0, d_out)
        feats = torch.stack([self.reference_encoder.encode_segment(s) for s in segments])
        embs = torch.stack([self.token_layer(f)[0] for f in feats])
        return feats, embs

    def project_reference(self, features: torch.Tensor) -> torch.Tensor:
        """Map 128-D reference features into the 192-D alignment space."""
        return self.ref_projection(features)
