"""Synthetic pseudo-speech corpus: data model, generator, and file IO.

The corpus is the test bed for the whole pipeline.  Real speech would
reintroduce the labeling problems the model is meant to solve, so the
generator builds pseudo-speech whose ground truth is exact:

* every word maps to a fixed 2-4 phone sequence (an onset phone that only
  occurs word-initially, followed by body phones);
* every phone renders as a fixed number of mel frames carrying a
  distinctive band pattern;
* one dedicated mel band mirrors the (normalized) pitch value, so
  synthesized mels expose a measurable pitch proxy;
* phrase breaks render as runs of silence frames whose log energy sits
  below SILENCE_ENERGY, with unvoiced pitch.

Because phone patterns are distinctive and onsets mark word starts, a
generated (or well-synthesized) mel can be transcribed back to words,
which gives the evaluation stack an intelligibility proxy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pitch import PitchContour, snap_to_grid

# ---------------------------------------------------------------------------
# Frame-level constants of the pseudo-speech renderer.

N_MELS = 80
SAMPLE_RATE = 22050
HOP_LENGTH = 256
WIN_LENGTH = 1024
N_FFT = 1024
FRAME_RATE = SAMPLE_RATE / HOP_LENGTH

N_PHONES = 30
N_ONSET_PHONES = 10  # phone ids [0, 10) appear only word-initially
N_SPEAKERS = 4

SILENCE_VALUE = -12.0  # every band of a silence frame
SPEECH_FLOOR = -4.0  # inactive bands of a speech frame
PATTERN_VALUE = 1.5  # active pattern bands
SILENCE_ENERGY = -10.0  # frames with mean energy below this count as silence
MIN_BREAK_FRAMES = 5
MAX_BREAK_FRAMES = 20

PITCH_BAND = N_MELS - 1  # band 79 mirrors the pitch contour
F0_FLOOR = 70.0
F0_CEIL = 320.0
PITCH_BAND_LOW = 1.0
PITCH_BAND_HIGH = 7.0
PITCH_BAND_VOICED_THRESHOLD = -1.0  # between unvoiced floor and the voiced range

MANIFEST_VERSION = "1"


def _build_phone_bands() -> list[tuple[int, ...]]:
    """Assign each phone a unique set of three pattern bands.

    Fixed internal seed: the table is a renderer constant, independent of
    any corpus seed.  Bands stay clear of the pitch band.
    """
    rng = np.random.default_rng(1203)
    seen: set[frozenset[int]] = set()
    table: list[tuple[int, ...]] = []
    while len(table) < N_PHONES:
        bands = tuple(sorted(rng.choice(np.arange(2, 76), size=3, replace=False).tolist()))
        if frozenset(bands) in seen:
            continue
        seen.add(frozenset(bands))
        table.append(bands)
    return table


PHONE_BANDS = _build_phone_bands()


def phone_duration(phone: int) -> int:
    """Frames a phone always occupies (4..8, fixed per phone id)."""
    return 4 + phone % 5


def phone_is_voiced(phone: int) -> bool:
    """A fixed subset of phones is unvoiced, to exercise f0 gap filling."""
    return phone % 5 != 2


def pitch_to_band(f0: float) -> float:
    """Map f0 in Hz to the dedicated mel band's value."""
    norm = min(max((f0 - F0_FLOOR) / (F0_CEIL - F0_FLOOR), 0.0), 1.0)
    return PITCH_BAND_LOW + norm * (PITCH_BAND_HIGH - PITCH_BAND_LOW)


def band_to_pitch(value: float) -> float:
    """Inverse of pitch_to_band, clamped to the encodable range."""
    norm = (value - PITCH_BAND_LOW) / (PITCH_BAND_HIGH - PITCH_BAND_LOW)
    norm = min(max(norm, 0.0), 1.0)
    return F0_FLOOR + norm * (F0_CEIL - F0_FLOOR)


# ---------------------------------------------------------------------------
# Domain types.


class CorpusError(Exception):
    """Invariant violation or missing data while loading a corpus."""


class TensorFormatError(Exception):
    """Malformed tensor file (bad magic, truncation, garbage dims)."""


@dataclass
class MelSpectrogram:
    """T_mel x n_mels matrix of log-scale values."""

    data: np.ndarray
    n_mels: int = N_MELS
    sample_rate: int = SAMPLE_RATE
    hop_length: int = HOP_LENGTH
    win_length: int = WIN_LENGTH
    n_fft: int = N_FFT

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[1] != self.n_mels:
            raise ValueError(f"mel must be (T, {self.n_mels}), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ValueError("mel must contain at least one frame")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("mel values must be finite")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def frame_energy(self) -> np.ndarray:
        """Per-frame mean over bands; the silence criterion."""
        return self.data.mean(axis=1)


@dataclass
class BreakAnnotation:
    """Phrase-final word indices, optionally with break durations."""

    last_word_indices: tuple[int, ...]
    break_durations: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.last_word_indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"break indices must be strictly increasing, got {idx}")
        if any(i < 0 for i in idx):
            raise ValueError(f"break indices must be nonnegative, got {idx}")
        self.last_word_indices = idx
        if self.break_durations is not None:
            dur = tuple(int(d) for d in self.break_durations)
            if len(dur) != len(idx):
                raise ValueError("break_durations length must match last_word_indices")
            if any(d < 1 for d in dur):
                raise ValueError("break durations must be >= 1 frame")
            self.break_durations = dur

    def __contains__(self, word: int) -> bool:
        return word in self.last_word_indices

    def __len__(self) -> int:
        return len(self.last_word_indices)


@dataclass
class Utterance:
    """One corpus unit: text, phones, alignment, mel, pitch, breaks."""

    id: str
    text: list[str]
    phones: list[int]
    word_spans: list[tuple[int, int]]  # per word, [first_phone, last_phone] inclusive
    speaker_id: int
    mel: MelSpectrogram
    pitch: PitchContour
    breaks: BreakAnnotation
    frame_word_alignment: np.ndarray  # per frame: word index, -1 for silence

    def __post_init__(self) -> None:
        self.frame_word_alignment = np.asarray(self.frame_word_alignment, dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        if len(self.text) != len(self.word_spans):
            raise CorpusError(f"{self.id}: word count does not match span count")
        cursor = 0
        for w, (start, end) in enumerate(self.word_spans):
            if start != cursor or end < start:
                raise CorpusError(
                    f"{self.id}: word_spans must partition phones in order (word {w})"
                )
            cursor = end + 1
        if cursor != len(self.phones):
            raise CorpusError(f"{self.id}: word_spans do not cover the phone sequence")
        for b in self.breaks.last_word_indices:
            if b >= len(self.text):
                raise CorpusError(f"{self.id}: break index {b} out of range")
        if len(self.frame_word_alignment) != self.mel.n_frames:
            raise CorpusError(
                f"{self.id}: frame alignment length {len(self.frame_word_alignment)} "
                f"!= mel frames {self.mel.n_frames}"
            )
        if len(self.pitch) != self.mel.n_frames:
            raise CorpusError(f"{self.id}: pitch length != mel frames")

    @property
    def n_words(self) -> int:
        return len(self.text)


@dataclass
class CorpusManifest:
    """Index of a corpus directory (JSON-lines file on disk)."""

    version: str
    root: Path
    entries: list[dict]
    lexicon_path: str = "lexicon.json"

    def entry_ids(self) -> list[str]:
        return [e["id"] for e in self.entries]


# ---------------------------------------------------------------------------
# Tensor file format: magic "PFM1", u32 LE ndim, ndim x u32 LE dims,
# float32 LE row-major payload.

TENSOR_MAGIC = b"PFM1"


def write_tensor(path: str | Path, matrix: np.ndarray) -> None:
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    return tensor_from_bytes(raw, name=str(path))


def tensor_to_bytes(matrix: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    header += b"".join(struct.pack("<I", d) for d in arr.shape)
    return header + arr.tobytes(order="C")


def tensor_from_bytes(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(raw) < 8 or raw[:4] != TENSOR_MAGIC:
        raise TensorFormatError(f"{name}: bad magic, not a PFM1 tensor")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    if ndim > 8:
        raise TensorFormatError(f"{name}: implausible ndim {ndim}")
    offset = 8
    if len(raw) < offset + 4 * ndim:
        raise TensorFormatError(f"{name}: truncated dimension header")
    dims = struct.unpack_from(f"<{ndim}I", raw, offset) if ndim else ()
    offset += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = offset + 4 * count
    if len(raw) != expected:
        raise TensorFormatError(f"{name}: payload size {len(raw) - offset}, expected {4 * count}")
    flat = np.frombuffer(raw, dtype="<f4", offset=offset, count=count)
    return flat.reshape(dims).copy()


# ---------------------------------------------------------------------------
# Generator.


def _build_word_table(vocab_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Fixed phone sequence per word: onset phone + 1..3 body phones.

    Sequences are unique across the vocabulary and never repeat a phone
    in adjacent positions, so frame-level decoding is unambiguous.
    """
    seen: set[tuple[int, ...]] = set()
    table: list[list[int]] = []
    while len(table) < vocab_size:
        length = int(rng.integers(2, 5))
        seq = [int(rng.integers(0, N_ONSET_PHONES))]
        while len(seq) < length:
            body = int(rng.integers(N_ONSET_PHONES, N_PHONES))
            if body == seq[-1]:
                continue
            seq.append(body)
        key = tuple(seq)
        if key in seen:
            continue
        seen.add(key)
        table.append(seq)
    return table


def _render_utterance(
    word_ids: list[int],
    word_table: list[list[int]],
    speaker_id: int,
    break_words: list[int],
    break_durations: list[int],
    plan_slopes: dict[int, int],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Render mel, f0, voiced flags, and frame/word alignment."""
    base_f0 = 140.0 + 36.0 * speaker_id
    break_set = dict(zip(break_words, break_durations))

    mel_rows: list[np.ndarray] = []
    f0s: list[float] = []
    voiced: list[bool] = []
    align: list[int] = []

    frame_clock = 0
    for word_pos, word_id in enumerate(word_ids):
        phones = word_table[word_id]
        word_frames = sum(phone_duration(p) for p in phones)
        frame_in_word = 0
        for phone in phones:
            bands = PHONE_BANDS[phone]
            for _ in range(phone_duration(phone)):
                if word_pos in plan_slopes:
                    center = (word_frames - 1) / 2.0
                    f0 = base_f0 + plan_slopes[word_pos] * (frame_in_word - center)
                else:
                    f0 = base_f0 + 15.0 * np.sin(2.0 * np.pi * frame_clock / 60.0)
                f0 = float(snap_to_grid(min(max(f0, F0_FLOOR + 5.0), F0_CEIL - 5.0)))

                row = np.full(N_MELS, SPEECH_FLOOR, dtype=np.float32)
                row[list(bands)] = PATTERN_VALUE
                if phone_is_voiced(phone):
                    row[PITCH_BAND] = pitch_to_band(f0)
                    f0s.append(f0)
                    voiced.append(True)
                else:
                    row[PITCH_BAND] = SPEECH_FLOOR
                    f0s.append(0.0)
                    voiced.append(False)
                mel_rows.append(row)
                align.append(word_pos)
                frame_in_word += 1
                frame_clock += 1
        if word_pos in break_set:
            for _ in range(break_set[word_pos]):
                mel_rows.append(np.full(N_MELS, SILENCE_VALUE, dtype=np.float32))
                f0s.append(0.0)
                voiced.append(False)
                align.append(-1)
                frame_clock += 1

    mel = np.stack(mel_rows)
    return mel, np.array(f0s), np.array(voiced, dtype=bool), np.array(align, dtype=np.int64)


def _dump_json(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def generate_toy_corpus(
    out_dir: str | Path,
    n_utts: int,
    vocab_size: int,
    seed: int,
) -> Path:
    """Write a deterministic corpus under out_dir; returns the manifest path.

    Identical arguments produce byte-identical files.  Word sequences are
    drawn from a pool of roughly n_utts/2 sentences, so most transcripts
    occur twice with independently sampled breaks, speakers, and pitch
    plans: text alone cannot predict prosody, which keeps the reference
    pathway load-bearing.
    """
    if n_utts < 1:
        raise ValueError(f"n_utts must be >= 1, got {n_utts}")
    if vocab_size < 4:
        raise ValueError(f"vocab_size must be >= 4, got {vocab_size}")

    out_dir = Path(out_dir)
    (out_dir / "utts").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.PCG64(seed))

    word_table = _build_word_table(vocab_size, rng)
    words = [f"w{i:03d}" for i in range(vocab_size)]
    lexicon = {"words": words, "phones": {w: word_table[i] for i, w in enumerate(words)}}
    (out_dir / "lexicon.json").write_text(_dump_json(lexicon), encoding="utf-8")

    n_sentences = max(1, (n_utts + 1) // 2)
    sentence_pool = []
    for _ in range(n_sentences):
        word_ids = [int(rng.integers(0, vocab_size)) for _ in range(int(rng.integers(4, 9)))]
        speaker_id = int(rng.integers(0, N_SPEAKERS))
        break_words = [w for w in range(len(word_ids) - 1) if rng.random() < 0.3]
        break_words.append(len(word_ids) - 1)  # a sentence always ends with a break
        sentence_pool.append((word_ids, speaker_id, break_words))

    manifest_lines = [
        _dump_json(
            {
                "version": MANIFEST_VERSION,
                "lexicon": "lexicon.json",
                "n_phones": N_PHONES,
                "n_speakers": N_SPEAKERS,
            }
        )
    ]
    first_plans: dict[int, dict[int, int]] = {}
    for utt_idx in range(n_utts):
        utt_id = f"utt_{utt_idx:04d}"
        # Paired utterances (same slot) share text, speaker, and break
        # positions; pitch plans and break durations are drawn fresh — and
        # a repeat instance is forced to a *different* plan on every
        # phrase-final word — so terminal intonation is only knowable from
        # the reference side.
        slot = utt_idx % n_sentences
        word_ids, speaker_id, break_words = sentence_pool[slot]
        n_words = len(word_ids)
        break_durations = [
            int(rng.integers(MIN_BREAK_FRAMES, MAX_BREAK_FRAMES + 1)) for _ in break_words
        ]
        plan_slopes = {}
        for w in break_words:
            slope = int(rng.integers(-3, 4))
            while slot in first_plans and slope == first_plans[slot][w]:
                slope = int(rng.integers(-3, 4))
            plan_slopes[w] = slope
        first_plans.setdefault(slot, plan_slopes)

        mel, f0, voiced, align = _render_utterance(
            word_ids, word_table, speaker_id, break_words, break_durations, plan_slopes
        )

        spans = []
        cursor = 0
        for wid in word_ids:
            n = len(word_table[wid])
            spans.append([cursor, cursor + n - 1])
            cursor += n
        phones = [p for wid in word_ids for p in word_table[wid]]

        def plan_label(slope: int) -> str:
            return "level" if slope == 0 else ("rising" if slope > 0 else "falling")

        ann = {
            "words": [words[w] for w in word_ids],
            "phones": phones,
            "word_spans": spans,
            "speaker_id": speaker_id,
            "breaks": break_words,
            "break_durations": break_durations,
            "pitch_plans": [
                {"word": w, "slope": plan_slopes[w], "label": plan_label(plan_slopes[w])}
                for w in break_words
            ],
            "frame_word_alignment": align.tolist(),
        }
        pitch_payload = [{"f0": float(v), "voiced": bool(b)} for v, b in zip(f0, voiced)]

        mel_rel = f"utts/{utt_id}.mel.pfm"
        pitch_rel = f"utts/{utt_id}.pitch.json"
        ann_rel = f"utts/{utt_id}.ann.json"
        write_tensor(out_dir / mel_rel, mel)
        (out_dir / pitch_rel).write_text(_dump_json({"frames": pitch_payload}), encoding="utf-8")
        (out_dir / ann_rel).write_text(_dump_json(ann), encoding="utf-8")
        manifest_lines.append(
            _dump_json(
                {
                    "id": utt_id,
                    "speaker_id": speaker_id,
                    "text": " ".join(words[w] for w in word_ids),
                    "mel": mel_rel,
                    "pitch": pitch_rel,
                    "ann": ann_rel,
                }
            )
        )

    manifest_path = out_dir / "manifest.jsonl"
    manifest_path.write_text("".join(manifest_lines), encoding="utf-8")
    return manifest_path


# ---------------------------------------------------------------------------
# Loading.


def read_manifest(manifest_path: str | Path) -> CorpusManifest:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise CorpusError(f"manifest not found: {manifest_path}")
    lines = [ln for ln in manifest_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise CorpusError(f"manifest is empty: {manifest_path}")
    header = json.loads(lines[0])
    entries = [json.loads(ln) for ln in lines[1:]]
    ids = [e["id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise CorpusError("manifest contains duplicate utterance ids")
    return CorpusManifest(
        version=str(header.get("version", "?")),
        root=manifest_path.parent,
        entries=entries,
        lexicon_path=header.get("lexicon", "lexicon.json"),
    )


def load_lexicon(manifest: CorpusManifest) -> dict[str, list[int]]:
    path = manifest.root / manifest.lexicon_path
    if not path.exists():
        raise CorpusError(f"lexicon not found: {path}")
    raw = json.loads(path.read_text(encoding="utf-8"))
    return {w: [int(p) for p in seq] for w, seq in raw["phones"].items()}


def _load_entry(root: Path, entry: dict) -> Utterance:
    utt_id = entry["id"]
    for key in ("mel", "pitch", "ann"):
        if not (root / entry[key]).exists():
            raise CorpusError(f"{utt_id}: missing {key} file {entry[key]}")
    try:
        mel = MelSpectrogram(read_tensor(root / entry["mel"]))
    except (TensorFormatError, ValueError) as exc:
        raise CorpusError(f"{utt_id}: bad mel file: {exc}") from exc
    pitch_raw = json.loads((root / entry["pitch"]).read_text(encoding="utf-8"))["frames"]
    pitch = PitchContour(
        np.array([fr["f0"] for fr in pitch_raw]),
        np.array([fr["voiced"] for fr in pitch_raw], dtype=bool),
    )
    ann = json.loads((root / entry["ann"]).read_text(encoding="utf-8"))
    try:
        return Utterance(
            id=utt_id,
            text=list(ann["words"]),
            phones=[int(p) for p in ann["phones"]],
            word_spans=[(int(a), int(b)) for a, b in ann["word_spans"]],
            speaker_id=int(ann["speaker_id"]),
            mel=mel,
            pitch=pitch,
            breaks=BreakAnnotation(tuple(ann["breaks"]), tuple(ann["break_durations"])),
            frame_word_alignment=np.array(ann["frame_word_alignment"]),
        )
    except (ValueError, KeyError) as exc:
        raise CorpusError(f"{utt_id}: invalid annotation: {exc}") from exc


def load_corpus(manifest_path: str | Path) -> list[Utterance]:
    """Load and validate every utterance, sorted by id."""
    manifest = read_manifest(manifest_path)
    utts = [_load_entry(manifest.root, e) for e in manifest.entries]
    return sorted(utts, key=lambda u: u.id)


# ---------------------------------------------------------------------------
# Frame-level decoding (evaluation support).


def classify_frames(mel: MelSpectrogram) -> np.ndarray:
    """Per-frame phone id, or -1 for silence, by nearest band pattern."""
    energy = mel.frame_energy()
    scores = np.stack([mel.data[:, list(PHONE_BANDS[p])].mean(axis=1) for p in range(N_PHONES)])
    labels = scores.argmax(axis=0)
    labels[energy < SILENCE_ENERGY] = -1
    return labels


def transcribe_mel(
    mel: MelSpectrogram, lexicon: dict[str, list[int]], min_run: int = 2
) -> list[str]:
    """Decode a mel back to words via phone patterns and onset boundaries.

    Collapses per-frame phone labels into runs (discarding runs shorter
    than min_run frames, which on this renderer can only be decode
    noise — every real phone spans at least 4 frames), splits the phone
    stream at word-onset phones, and looks the resulting sequences up in
    the lexicon.  Unknown sequences decode to "<unk>".
    """
    labels = classify_frames(mel)
    runs: list[tuple[int, int]] = []  # (label, length), silence breaks runs
    for lab in labels:
        lab = int(lab)
        if runs and runs[-1][0] == lab:
            runs[-1] = (lab, runs[-1][1] + 1)
        else:
            runs.append((lab, 1))
    phone_stream: list[int] = []
    prev = None
    for lab, length in runs:
        if lab == -1:
            prev = None
            continue
        if length < min_run:
            continue
        if lab != prev:
            phone_stream.append(lab)
            prev = lab
    groups: list[list[int]] = []
    for p in phone_stream:
        if p < N_ONSET_PHONES or not groups:
            groups.append([p])
        else:
            groups[-1].append(p)
    inverse = {tuple(seq): w for w, seq in lexicon.items()}
    return [inverse.get(tuple(g), "<unk>") for g in groups]
