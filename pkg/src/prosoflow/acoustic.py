"""Generative core: condition encoders, monotonic alignment, durations,
flow-matching losses, and ODE-based mel decoding.

Conventions used throughout:

* sequences are unbatched — (T, dim) tensors; training loops over the
  batch elements;
* the conditional path is x_t = (1 - (1 - sigma_min) t) x0 + t x1 with
  sigma_min^2 I noise, and the regression target for the vector field is
  x1 - (1 - sigma_min) x0;
* alignment likelihoods use unit covariance Gaussians everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .phrasing import BRK_TOKEN, ExtendedPhoneSequence

LOG_2PI = math.log(2.0 * math.pi)

D_HIDDEN = 192
D_BREAK = 32
D_SPEAKER = 64
DECODER_CHANNELS = 128
SIGMA_MIN_DEFAULT = 1e-4

# Typical log-mel level of the corpus; centering the prior head here
# saves the optimizer from crawling the output range at toy learning rates.
MU_BIAS_INIT = -6.0


@dataclass
class PriorStats:
    """Per-token Gaussian means (identity covariance is implied)."""

    mu: torch.Tensor  # (T_tokens, n_mels)

    def __post_init__(self) -> None:
        if self.mu.ndim != 2:
            raise ValueError("prior means must be a (tokens, n_mels) matrix")

    @property
    def n_tokens(self) -> int:
        return self.mu.shape[0]


@dataclass
class AlignmentMatrix:
    """Monotonic surjective frame-to-token assignment."""

    frame_tokens: np.ndarray  # (T_mel,) token index per frame
    n_tokens: int

    def __post_init__(self) -> None:
        self.frame_tokens = np.asarray(self.frame_tokens, dtype=np.int64)
        a = self.frame_tokens
        if len(a) == 0:
            raise ValueError("alignment must cover at least one frame")
        steps = np.diff(a)
        if a[0] != 0 or a[-1] != self.n_tokens - 1 or ((steps < 0) | (steps > 1)).any():
            raise ValueError("alignment must be monotone, start at token 0, end at the last token")

    def __len__(self) -> int:
        return len(self.frame_tokens)

    def durations(self) -> np.ndarray:
        return np.bincount(self.frame_tokens, minlength=self.n_tokens)


@dataclass
class FlowSample:
    """One draw from the conditional probability path."""

    x0: torch.Tensor
    x1: torch.Tensor
    t: float
    x_t: torch.Tensor
    sigma_min: float


def sinusoidal_embedding(position: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding; position may be a scalar or (T,)."""
    position = position.reshape(-1, 1)
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    angles = position * freq
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class SelfAttentionBlock(nn.Module):
    """Pre-norm transformer block (self-attention + feed-forward)."""

    def __init__(self, d_model: int, n_heads: int = 2, d_ff: int | None = None):
        super().__init__()
        d_ff = d_ff or 2 * d_model
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.SiLU(), nn.Linear(d_ff, d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x).unsqueeze(0)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        x = x + attn_out.squeeze(0)
        return x + self.ff(self.ln2(x))


class TextEncoder(nn.Module):
    """Phone/BRK embedding + positional encoding + self-attention stack."""

    def __init__(self, n_phones: int, d_model: int = D_HIDDEN, n_blocks: int = 2):
        super().__init__()
        self.n_phones = n_phones
        self.d_model = d_model
        self.embed = nn.Embedding(n_phones + 1, d_model)  # last row is BRK
        self.blocks = nn.ModuleList(SelfAttentionBlock(d_model) for _ in range(n_blocks))

    def token_ids(self, extended: ExtendedPhoneSequence) -> torch.Tensor:
        ids = [self.n_phones if t == BRK_TOKEN else int(t) for t in extended.tokens]
        if any(i < 0 or i > self.n_phones for i in ids):
            raise ValueError("phone id out of range for the text encoder")
        return torch.tensor(ids, dtype=torch.long)

    def forward(self, extended: ExtendedPhoneSequence) -> torch.Tensor:
        if len(extended) == 0:
            raise ValueError("cannot encode an empty token sequence")
        x = self.embed(self.token_ids(extended))
        pos = sinusoidal_embedding(torch.arange(len(extended), dtype=torch.float32), self.d_model)
        x = x + pos
        for block in self.blocks:
            x = block(x)
        return x


def encode_text(extended: ExtendedPhoneSequence, encoder: TextEncoder) -> torch.Tensor:
    return encoder(extended)


class SpeakerEncoder(nn.Module):
    """Id-lookup table for corpus speakers; an external 512-D vector path
    (two feed-forward layers down to 64-D) covers foreign embeddings."""

    def __init__(self, n_speakers: int, d_out: int = D_SPEAKER, d_external: int = 512):
        super().__init__()
        self.n_speakers = n_speakers
        self.table = nn.Embedding(n_speakers, d_out)
        self.external = nn.Sequential(
            nn.Linear(d_external, 128), nn.ReLU(), nn.Linear(128, d_out)
        )

    def forward(self, speaker_id: int) -> torch.Tensor:
        if not 0 <= speaker_id < self.n_speakers:
            raise ValueError(f"unknown speaker id {speaker_id} (have {self.n_speakers})")
        return self.table(torch.tensor(speaker_id, dtype=torch.long))

    def forward_external(self, vector: torch.Tensor) -> torch.Tensor:
        if vector.shape != (self.external[0].in_features,):
            raise ValueError(f"external speaker vector must be ({self.external[0].in_features},)")
        return self.external(vector)


def speaker_embed(encoder: SpeakerEncoder, speaker: int | torch.Tensor) -> torch.Tensor:
    if isinstance(speaker, torch.Tensor):
        return encoder.forward_external(speaker)
    return encoder(speaker)


class FusionEncoder(nn.Module):
    """Concatenate per-token channels, project, attend, emit prior means."""

    def __init__(
        self,
        n_mels: int,
        d_text: int = D_HIDDEN,
        d_break: int = D_BREAK,
        d_intonation: int = D_HIDDEN,
        d_speaker: int = D_SPEAKER,
        n_blocks: int = 2,
    ):
        super().__init__()
        d_in = d_text + d_break + d_intonation + d_speaker
        self.in_proj = nn.Linear(d_in, d_text)
        self.blocks = nn.ModuleList(SelfAttentionBlock(d_text) for _ in range(n_blocks))
        self.mu_head = nn.Linear(d_text, n_mels)
        nn.init.constant_(self.mu_head.bias, MU_BIAS_INIT)

    def forward(
        self,
        text_hidden: torch.Tensor,
        break_emb: torch.Tensor,
        intonation: torch.Tensor,
        speaker: torch.Tensor,
    ) -> tuple[torch.Tensor, PriorStats]:
        n = text_hidden.shape[0]
        if break_emb.shape[0] != n or intonation.shape[0] != n:
            raise ValueError("per-token channel lengths disagree")
        if speaker.ndim == 1:
            speaker = speaker.unsqueeze(0).expand(n, -1)
        if speaker.shape[0] != n:
            raise ValueError("speaker channel length disagrees")
        x = self.in_proj(torch.cat([text_hidden, break_emb, intonation, speaker], dim=-1))
        for block in self.blocks:
            x = block(x)
        return x, PriorStats(self.mu_head(x))


def fuse(
    fusion: FusionEncoder,
    text_hidden: torch.Tensor,
    break_emb: torch.Tensor,
    intonation: torch.Tensor,
    speaker: torch.Tensor,
) -> tuple[torch.Tensor, PriorStats]:
    return fusion(text_hidden, break_emb, intonation, speaker)


# ---------------------------------------------------------------------------
# Monotonic alignment search.


def gaussian_log_likelihood_matrix(z: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """value[i, j] = log N(z_j; mu_i, I), computed in float64."""
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    n = z.shape[1]
    sq = (mu**2).sum(axis=1)[:, None] - 2.0 * mu @ z.T + (z**2).sum(axis=1)[None, :]
    return -0.5 * sq - 0.5 * n * LOG_2PI


def mas_align(z: np.ndarray | torch.Tensor, mu: np.ndarray | torch.Tensor) -> AlignmentMatrix:
    """Most probable monotonic surjective alignment of frames to tokens.

    Dynamic program over log N(z_j; mu_i, I); every token receives at
    least one frame.  Backtracking ties break toward the later token
    transition (the lower token keeps the frame), which is deterministic;
    oracle comparisons should therefore check scores, not paths.
    """
    if isinstance(z, torch.Tensor):
        z = z.detach().cpu().numpy()
    if isinstance(mu, torch.Tensor):
        mu = mu.detach().cpu().numpy()
    n_tokens, n_frames = mu.shape[0], z.shape[0]
    if n_frames < n_tokens:
        raise ValueError(
            f"infeasible alignment: {n_frames} frames cannot cover {n_tokens} tokens"
        )
    value = gaussian_log_likelihood_matrix(z, mu)
    q = np.full((n_tokens, n_frames), -np.inf)
    q[0, 0] = value[0, 0]
    for j in range(1, n_frames):
        stay = q[:, j - 1]
        advance = np.concatenate(([-np.inf], q[:-1, j - 1]))
        q[:, j] = np.maximum(stay, advance) + value[:, j]
    alignment = np.empty(n_frames, dtype=np.int64)
    alignment[-1] = n_tokens - 1
    for j in range(n_frames - 2, -1, -1):
        i = alignment[j + 1]
        if i > 0 and q[i - 1, j] >= q[i, j]:
            alignment[j] = i - 1
        else:
            alignment[j] = i
    return AlignmentMatrix(alignment, n_tokens)


def mas_score(z: np.ndarray, mu: np.ndarray, alignment: AlignmentMatrix) -> float:
    """Total log-likelihood of an alignment (float64)."""
    value = gaussian_log_likelihood_matrix(z, mu)
    return float(value[alignment.frame_tokens, np.arange(len(alignment))].sum())


def durations_from_alignment(alignment: AlignmentMatrix) -> np.ndarray:
    """d_i = number of frames assigned to token i; sums to T_mel."""
    return alignment.durations()


# ---------------------------------------------------------------------------
# Duration prediction.


class DurationPredictor(nn.Module):
    """Two conv layers + linear head over (detached) fused hidden states;
    outputs per-token log-durations."""

    def __init__(self, d_model: int = D_HIDDEN, channels: int = 128):
        super().__init__()
        self.conv1 = nn.Conv1d(d_model, channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size=3, padding=1)
        self.act = nn.SiLU()
        self.proj = nn.Linear(channels, 1)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        h = hidden.T.unsqueeze(0)
        h = self.act(self.conv1(h))
        h = self.act(self.conv2(h))
        return self.proj(h.squeeze(0).T).squeeze(-1)


def predict_durations(fused_hidden: torch.Tensor, predictor: DurationPredictor) -> torch.Tensor:
    """Log-durations from detached hidden states (no gradient reaches the
    fusion/text encoders through this path)."""
    return predictor(fused_hidden.detach())


def durations_to_frames(log_durations: torch.Tensor) -> np.ndarray:
    """Inference rounding: max(1, round(exp(log_d))) per token."""
    d = np.exp(log_durations.detach().cpu().numpy())
    return np.maximum(1, np.round(d)).astype(np.int64)


def duration_loss(pred_log_d: torch.Tensor, alignment: AlignmentMatrix) -> torch.Tensor:
    """MSE in the log domain against MAS durations."""
    d = alignment.durations()
    if pred_log_d.shape[0] != len(d):
        raise ValueError(f"predicted {pred_log_d.shape[0]} durations for {len(d)} tokens")
    target = torch.log(torch.tensor(d, dtype=pred_log_d.dtype))
    return ((pred_log_d - target) ** 2).mean()


# ---------------------------------------------------------------------------
# Conditional flow matching.


def sample_xt(
    x0: torch.Tensor,
    x1: torch.Tensor,
    t: float | torch.Tensor,
    sigma_min: float = SIGMA_MIN_DEFAULT,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Draw x_t from the conditional path N((1-(1-s)t) x0 + t x1, s^2 I).

    Pass noise explicitly (e.g. zeros) to pin the mean; otherwise standard
    normal noise is drawn.
    """
    if x0.shape != x1.shape:
        raise ValueError(f"x0/x1 shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    t_val = float(t)
    if not 0.0 <= t_val <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t_val}")
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    mean = (1.0 - (1.0 - sigma_min) * t_val) * x0 + t_val * x1
    return mean + sigma_min * noise


def sample_flow(
    x0: torch.Tensor,
    x1: torch.Tensor,
    t: float,
    sigma_min: float = SIGMA_MIN_DEFAULT,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> FlowSample:
    x_t = sample_xt(x0, x1, t, sigma_min, noise=noise, generator=generator)
    return FlowSample(x0=x0, x1=x1, t=float(t), x_t=x_t, sigma_min=sigma_min)


def cfm_target(x0: torch.Tensor, x1: torch.Tensor, sigma_min: float) -> torch.Tensor:
    """The regression target vector field x1 - (1 - sigma_min) x0."""
    return x1 - (1.0 - sigma_min) * x0


def cfm_loss(
    u_pred: torch.Tensor, x0: torch.Tensor, x1: torch.Tensor, sigma_min: float = SIGMA_MIN_DEFAULT
) -> torch.Tensor:
    """Mean squared error against the conditional vector field."""
    if u_pred.shape != x0.shape or x0.shape != x1.shape:
        raise ValueError("u_pred/x0/x1 shapes must agree")
    return ((u_pred - cfm_target(x0, x1, sigma_min)) ** 2).mean()


def prior_loss(
    z: torch.Tensor, prior: PriorStats, alignment: AlignmentMatrix
) -> torch.Tensor:
    """Negative log-likelihood of the frames under aligned unit Gaussians:
    sum_j (n/2 log 2pi + 1/2 ||z_j - mu_{A(j)}||^2)."""
    mu_aligned = prior.mu[torch.from_numpy(alignment.frame_tokens)]
    if mu_aligned.shape != z.shape:
        raise ValueError("aligned prior means do not match frame matrix")
    n = z.shape[1]
    const = z.shape[0] * 0.5 * n * LOG_2PI
    return const + 0.5 * ((z - mu_aligned) ** 2).sum()


# ---------------------------------------------------------------------------
# Flow prediction decoder and ODE sampling.


class FlowDecoder(nn.Module):
    """Conv stack predicting the vector field from (x_t, c, t).

    Frames are the conv axis.  The sinusoidal time embedding drives a
    per-channel scale and shift (FiLM) on the hidden states and a pair of
    global gates on linear x_t/c skip paths: the optimal conditional field
    is dominated by a t-dependent linear mix of x_t and c, which the skips
    capture cheaply while the conv stack fits the remainder.  The output
    conv is zero-initialized so the field starts at zero.
    """

    def __init__(self, n_mels: int, channels: int = DECODER_CHANNELS, d_time: int = 64):
        super().__init__()
        self.d_time = d_time
        self.conv_in = nn.Conv1d(2 * n_mels, channels, kernel_size=5, padding=2)
        self.time_mlp = nn.Sequential(
            nn.Linear(d_time, channels), nn.SiLU(), nn.Linear(channels, channels)
        )
        self.film1 = nn.Linear(channels, 2 * channels)
        self.film2 = nn.Linear(channels, 2 * channels)
        self.block1 = nn.Sequential(
            nn.Conv1d(channels, channels, kernel_size=5, padding=2), nn.GroupNorm(8, channels), nn.SiLU()
        )
        self.block2 = nn.Sequential(
            nn.Conv1d(channels, channels, kernel_size=5, padding=2), nn.GroupNorm(8, channels), nn.SiLU()
        )
        self.conv_out = nn.Conv1d(channels, n_mels, kernel_size=3, padding=1)
        self.skip_gates = nn.Linear(channels, 2)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        nn.init.zeros_(self.skip_gates.weight)
        nn.init.zeros_(self.skip_gates.bias)

    def forward(self, x_t: torch.Tensor, c: torch.Tensor, t: float | torch.Tensor) -> torch.Tensor:
        if x_t.shape != c.shape:
            raise ValueError(f"x_t/c shape mismatch: {tuple(x_t.shape)} vs {tuple(c.shape)}")
        t_emb = self.time_mlp(sinusoidal_embedding(torch.as_tensor(float(t)), self.d_time)).squeeze(0)
        h = self.conv_in(torch.cat([x_t, c], dim=-1).T.unsqueeze(0))
        scale1, shift1 = self.film1(t_emb).reshape(2, -1, 1)
        h = h * (1.0 + scale1) + shift1
        h = h + self.block1(h)
        scale2, shift2 = self.film2(t_emb).reshape(2, -1, 1)
        h = h * (1.0 + scale2) + shift2
        h = h + self.block2(h)
        out = self.conv_out(h).squeeze(0).T
        gate_x, gate_c = self.skip_gates(t_emb)
        return out + gate_x * x_t + gate_c * c


def decode_ode(c: torch.Tensor, x0: torch.Tensor, n_steps: int, field) -> torch.Tensor:
    """Euler integration of dx/dt = field(x, c, t) from t=0 to t=1.

    `field` is any callable (x, c, t) -> velocity, typically a
    FlowDecoder.  Deterministic given its inputs.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if c.shape != x0.shape:
        raise ValueError(f"condition/x0 shape mismatch: {tuple(c.shape)} vs {tuple(x0.shape)}")
    x = x0
    dt = 1.0 / n_steps
    for k in range(n_steps):
        x = x + dt * field(x, c, k * dt)
    return x
