"""Composite model and the synthesis pipeline.

Wires the text/speaker/fusion encoders, break embedder, intonation
encoder, text aligner, duration predictor, and flow decoder into one
module, and provides the text+reference -> mel inference path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import acoustic, corpus, phrasing
from .acoustic import (
    DurationPredictor,
    FlowDecoder,
    FusionEncoder,
    PriorStats,
    SpeakerEncoder,
    TextEncoder,
    decode_ode,
    durations_to_frames,
    predict_durations,
)
from .corpus import N_MELS, BreakAnnotation, MelSpectrogram, Utterance
from .intonation import IntonationEncoder, align_attention
from .phrasing import BreakEmbedder, ExtendedPhoneSequence, detect_breaks_silence, insert_break_tokens
from .pitch import PitchContour, PitchShapeSegment, extract_last_word_segments, interpolate, smooth
from .text_aligner import LastWordTextEncoder


@dataclass
class ModelConfig:
    n_phones: int = corpus.N_PHONES
    n_speakers: int = corpus.N_SPEAKERS
    n_mels: int = N_MELS
    d_text: int = acoustic.D_HIDDEN
    d_break: int = acoustic.D_BREAK
    d_speaker: int = acoustic.D_SPEAKER
    n_tokens: int = 6
    d_token: int = 64
    n_heads: int = 4
    d_ref: int = 128
    decoder_channels: int = acoustic.DECODER_CHANNELS
    sigma_min: float = acoustic.SIGMA_MIN_DEFAULT
    word_vocab: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]


def word_vocab_from_corpus(utterances: list[Utterance]) -> list[str]:
    return sorted({w for utt in utterances for w in utt.text})


@dataclass
class ConditionOutputs:
    """Everything the condition side of one utterance produces."""

    extended: ExtendedPhoneSequence
    fused_hidden: torch.Tensor  # (T_tokens, d_text)
    prior: PriorStats  # mu, (T_tokens, n_mels)
    ref_features: torch.Tensor  # (K_ref, d_ref)
    ref_embeddings: torch.Tensor  # (K_ref, d_text)
    text_embeddings: torch.Tensor  # (K_target, d_text)
    aligned: torch.Tensor  # (K_target, d_text)


class ProsodyModel(nn.Module):
    """All learnable components behind one state_dict.

    Checkpoint sections map onto the child modules: break_embedder ->
    "phrasing", intonation -> "intonation", text_aligner ->
    "text_aligner", everything else -> "acoustic".
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        vocab = {"<unk>": 0}
        for w in config.word_vocab:
            vocab.setdefault(w, len(vocab))
        self.text_encoder = TextEncoder(config.n_phones, config.d_text)
        self.speaker_encoder = SpeakerEncoder(config.n_speakers, config.d_speaker)
        self.break_embedder = BreakEmbedder(config.d_break)
        self.intonation = IntonationEncoder(
            config.n_tokens, config.d_token, config.n_heads, config.d_ref, config.d_text
        )
        self.text_aligner = LastWordTextEncoder(vocab, d_out=config.d_text)
        self.fusion = FusionEncoder(
            config.n_mels, config.d_text, config.d_break, config.d_text, config.d_speaker
        )
        self.duration_predictor = DurationPredictor(config.d_text)
        self.decoder = FlowDecoder(config.n_mels, config.decoder_channels)
        self.trained_steps = 0

    def broadcast_intonation(
        self, extended: ExtendedPhoneSequence, aligned: torch.Tensor
    ) -> torch.Tensor:
        """Give every token its phrase's aligned intonation embedding.

        Tokens past the last break (no enclosing phrase) receive the
        learned default embedding, as does everything when there are no
        aligned embeddings at all.
        """
        phrases = extended.phrase_indices()
        rows = []
        for p in phrases:
            if p < aligned.shape[0]:
                rows.append(aligned[p])
            else:
                rows.append(self.intonation.default_embedding)
        return torch.stack(rows)

    def encode_condition(
        self,
        extended: ExtendedPhoneSequence,
        target_words: list[str],
        target_breaks: BreakAnnotation,
        speaker_id: int,
        segments: list[PitchShapeSegment],
    ) -> ConditionOutputs:
        """Text + reference prosody -> fused hidden states and prior means."""
        text_hidden = self.text_encoder(extended)
        break_emb = self.break_embedder(extended)
        ref_features, ref_embeddings = self.intonation.encode_segments(segments)
        text_embeddings = self.text_aligner.embed_last_words(target_words, target_breaks)
        if ref_embeddings.shape[0] > 0 and text_embeddings.shape[0] > 0:
            ref_keys = self.intonation.project_reference(ref_features)
            aligned = align_attention(text_embeddings, ref_keys, ref_embeddings)
        else:
            aligned = torch.zeros(0, self.config.d_text)
        intonation_tokens = self.broadcast_intonation(extended, aligned)
        speaker = self.speaker_encoder(speaker_id)
        fused_hidden, prior = self.fusion(text_hidden, break_emb, intonation_tokens, speaker)
        return ConditionOutputs(
            extended=extended,
            fused_hidden=fused_hidden,
            prior=prior,
            ref_features=ref_features,
            ref_embeddings=ref_embeddings,
            text_embeddings=text_embeddings,
            aligned=aligned,
        )


SECTION_PREFIXES = {
    "break_embedder.": "phrasing",
    "intonation.": "intonation",
    "text_aligner.": "text_aligner",
}


def section_for_parameter(name: str) -> str:
    for prefix, section in SECTION_PREFIXES.items():
        if name.startswith(prefix):
            return section
    return "acoustic"


# ---------------------------------------------------------------------------
# Inference.


@dataclass
class SynthesisResult:
    """Synthesized mel plus the bookkeeping eval and control need."""

    mel: MelSpectrogram
    frame_word_alignment: np.ndarray
    durations: np.ndarray
    extended: ExtendedPhoneSequence
    pitch: PitchContour

    @property
    def n_frames(self) -> int:
        return self.mel.n_frames


def mel_to_pitch(mel: MelSpectrogram) -> PitchContour:
    """Read the pitch proxy back out of a (synthesized) mel."""
    band = mel.data[:, corpus.PITCH_BAND].astype(np.float64)
    energy = mel.frame_energy()
    voiced = (band >= corpus.PITCH_BAND_VOICED_THRESHOLD) & (energy >= corpus.SILENCE_ENERGY)
    f0 = np.where(voiced, [corpus.band_to_pitch(v) for v in band], 0.0)
    return PitchContour(f0, voiced)


def prepare_reference(
    reference: Utterance,
    rng: np.random.Generator,
    breaks: BreakAnnotation | None = None,
) -> tuple[BreakAnnotation, list[PitchShapeSegment]]:
    """Reference-side prosody extraction: detected breaks and processed
    last-word pitch shape segments."""
    if breaks is None:
        breaks = detect_breaks_silence(reference)
    contour = smooth(interpolate(reference.pitch))
    segments = extract_last_word_segments(contour, reference, breaks, rng)
    return breaks, segments


def phones_for_words(words: list[str], lexicon: dict[str, list[int]]) -> tuple[list[int], list[tuple[int, int]]]:
    phones: list[int] = []
    spans: list[tuple[int, int]] = []
    for w in words:
        if w not in lexicon:
            raise KeyError(f"word {w!r} is not in the lexicon")
        seq = lexicon[w]
        spans.append((len(phones), len(phones) + len(seq) - 1))
        phones.extend(seq)
    return phones, spans


@torch.no_grad()
def synthesize(
    model: ProsodyModel,
    words: list[str],
    lexicon: dict[str, list[int]],
    reference: Utterance,
    target_breaks: BreakAnnotation | None = None,
    segments: list[PitchShapeSegment] | None = None,
    seed: int = 0,
    n_steps: int = 10,
) -> SynthesisResult:
    """Text + reference speech -> mel.

    Target breaks default to the punctuation rule predictor; reference
    segments default to the processed reference contour (perturbation
    offsets drawn from a generator seeded by `seed`, so the whole call is
    deterministic in (words, reference, seed, n_steps)).
    """
    rng = np.random.default_rng(seed)
    if segments is None:
        _, segments = prepare_reference(reference, rng)
    if target_breaks is None:
        target_breaks = phrasing.predict_breaks_rule(words)
    phones, spans = phones_for_words(words, lexicon)
    extended = insert_break_tokens(phones, spans, target_breaks)
    cond = model.encode_condition(extended, words, target_breaks, reference.speaker_id, segments)

    log_d = predict_durations(cond.fused_hidden, model.duration_predictor)
    durations = durations_to_frames(log_d)
    frame_tokens = np.repeat(np.arange(len(extended)), durations)
    c = cond.prior.mu[torch.from_numpy(frame_tokens)]

    gen = torch.Generator().manual_seed(seed)
    x0 = torch.randn(c.shape, generator=gen)
    mel_data = decode_ode(c, x0, n_steps, model.decoder)
    mel = MelSpectrogram(mel_data.numpy())

    word_of_token = np.array(
        [w if kind == "phone" else -1 for kind, w in extended.origins], dtype=np.int64
    )
    alignment = word_of_token[frame_tokens]
    return SynthesisResult(
        mel=mel,
        frame_word_alignment=alignment,
        durations=durations,
        extended=extended,
        pitch=mel_to_pitch(mel),
    )
