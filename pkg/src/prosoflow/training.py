"""Training orchestration: per-batch step, total loss, epoch loop,
checkpointing, and exact resume.

One training step, per utterance: encode the condition, search the
monotonic alignment, compute the prior/duration/text-pitch losses, draw
(t, x0, x_t) from the conditional path, regress the vector field, and
take one optimizer step on the summed loss.  Everything is seeded;
resuming from a checkpoint reproduces the uninterrupted trajectory
bitwise on the same machine (single-threaded numerics).
"""

from __future__ import annotations

import base64
import csv
import dataclasses
import hashlib
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .acoustic import (
    cfm_loss,
    duration_loss,
    mas_align,
    predict_durations,
    prior_loss,
    sample_xt,
)
from .corpus import Utterance, load_corpus, tensor_from_bytes, tensor_to_bytes
from .model import ModelConfig, ProsodyModel, section_for_parameter, word_vocab_from_corpus
from .phrasing import detect_breaks_silence, insert_break_tokens
from .pitch import extract_last_word_segments, interpolate, smooth
from .text_aligner import alignment_loss

CHECKPOINT_FORMAT = "pfm-checkpoint-1"
LOSS_TERMS = ("cfm", "prior", "dur", "tp_align")


@dataclass
class TrainConfig:
    corpus_manifest: str = ""
    out_dir: str = "train_out"
    batch_size: int = 8
    learning_rate: float = 1e-3
    epochs: int = 100
    sigma_min: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 100
    weight_cfm: float = 1.0
    weight_prior: float = 1.0
    weight_dur: float = 1.0
    weight_tp_align: float = 1.0

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.learning_rate <= 0 or self.sigma_min <= 0:
            raise ValueError("learning_rate and sigma_min must be positive")

    def weights(self) -> tuple[float, float, float, float]:
        return (self.weight_cfm, self.weight_prior, self.weight_dur, self.weight_tp_align)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        """Parse a key=value config file (unknown keys are an error)."""
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        casts = {"str": str, "int": int, "float": float}
        for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ValueError(f"{path}:{line_no}: unknown config key {key!r}")
            kwargs[key] = casts[types[key]](value)
        return cls(**kwargs)


@dataclass
class TrainState:
    model: ProsodyModel
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    corpus: list[Utterance]
    rng: np.random.Generator
    step: int = 0
    batch_queue: list[list[int]] = field(default_factory=list)
    loss_history: list[dict] = field(default_factory=list)
    running: dict = field(default_factory=dict)


def total_loss(
    l_cfm: torch.Tensor,
    l_prior: torch.Tensor,
    l_dur: torch.Tensor,
    l_tp: torch.Tensor,
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0),
) -> torch.Tensor:
    """Weighted sum of the four terms; the default is the plain sum."""
    w = weights
    return w[0] * l_cfm + w[1] * l_prior + w[2] * l_dur + w[3] * l_tp


def utterance_losses(
    model: ProsodyModel, utt: Utterance, rng: np.random.Generator, sigma_min: float
) -> dict[str, torch.Tensor]:
    """All four loss terms for one parallel utterance."""
    if utt.mel is None:
        raise ValueError(f"{utt.id}: training requires a reference mel (parallel batch)")
    breaks = detect_breaks_silence(utt)
    extended = insert_break_tokens(utt.phones, utt.word_spans, breaks)
    contour = smooth(interpolate(utt.pitch))
    segments = extract_last_word_segments(contour, utt, breaks, rng)
    cond = model.encode_condition(extended, utt.text, breaks, utt.speaker_id, segments)

    z = torch.from_numpy(utt.mel.data.astype(np.float32))
    alignment = mas_align(z, cond.prior.mu)
    l_prior = prior_loss(z, cond.prior, alignment)

    log_d = predict_durations(cond.fused_hidden, model.duration_predictor)
    l_dur = duration_loss(log_d, alignment)

    r_proj = model.intonation.project_reference(cond.ref_features)
    l_tp = alignment_loss(cond.text_embeddings, r_proj)

    t = torch.rand(()).item()
    x0 = torch.randn_like(z)
    x_t = sample_xt(x0, z, t, sigma_min)
    c1 = cond.prior.mu[torch.from_numpy(alignment.frame_tokens)]
    u_pred = model.decoder(x_t, c1, t)
    l_cfm = cfm_loss(u_pred, x0, z, sigma_min)

    return {"cfm": l_cfm, "prior": l_prior, "dur": l_dur, "tp_align": l_tp}


def train_step(batch: list[Utterance], state: TrainState) -> dict[str, float]:
    """One optimizer step; returns the four loss terms and their total."""
    if len(batch) == 0:
        raise ValueError("empty training batch")
    state.model.train()
    sums = {name: torch.zeros(()) for name in LOSS_TERMS}
    for utt in batch:
        terms = utterance_losses(state.model, utt, state.rng, state.config.sigma_min)
        for name in LOSS_TERMS:
            sums[name] = sums[name] + terms[name]
    means = {name: sums[name] / len(batch) for name in LOSS_TERMS}
    total = total_loss(
        means["cfm"], means["prior"], means["dur"], means["tp_align"], state.config.weights()
    )
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.step += 1
    state.model.trained_steps = state.step

    out = {name: float(means[name].detach()) for name in LOSS_TERMS}
    out["total"] = float(total.detach())
    for name, value in out.items():
        prev = state.running.get(name, value)
        state.running[name] = 0.9 * prev + 0.1 * value
    return out


# ---------------------------------------------------------------------------
# Epoch loop.


def steps_per_epoch(n_utterances: int, batch_size: int) -> int:
    return math.ceil(n_utterances / batch_size)


def _epoch_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[list[int]]:
    order = rng.permutation(n)
    return [order[i : i + batch_size].tolist() for i in range(0, n, batch_size)]


def _append_loss_row(out_dir: Path, step: int, losses: dict[str, float]) -> None:
    path = out_dir / "loss_log.csv"
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", *LOSS_TERMS, "total"])
        writer.writerow([step] + [repr(losses[k]) for k in (*LOSS_TERMS, "total")])


def run(state: TrainState) -> TrainState:
    """Train until the configured number of epochs is exhausted."""
    torch.set_num_threads(1)
    config = state.config
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(state.corpus)
    total_steps = config.epochs * steps_per_epoch(n, config.batch_size)
    while state.step < total_steps:
        if not state.batch_queue:
            state.batch_queue = _epoch_batches(state.rng, n, config.batch_size)
        indices = state.batch_queue.pop(0)
        batch = [state.corpus[i] for i in indices]
        losses = train_step(batch, state)
        state.loss_history.append({"step": state.step, **losses})
        _append_loss_row(out_dir, state.step, losses)
        if config.checkpoint_every > 0 and state.step % config.checkpoint_every == 0:
            save_checkpoint(state, out_dir / f"ckpt_step{state.step:06d}.ckpt")
    final = out_dir / f"ckpt_step{state.step:06d}.ckpt"
    if not final.exists():
        save_checkpoint(state, final)
    return state


def fit(config: TrainConfig, utterances: list[Utterance] | None = None) -> TrainState:
    """Build a fresh model from the config's corpus and train it."""
    torch.set_num_threads(1)
    utts = utterances if utterances is not None else load_corpus(config.corpus_manifest)
    torch.manual_seed(config.seed)
    model_config = ModelConfig(
        sigma_min=config.sigma_min, word_vocab=word_vocab_from_corpus(utts)
    )
    model = ProsodyModel(model_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    state = TrainState(
        model=model,
        optimizer=optimizer,
        config=config,
        corpus=utts,
        rng=np.random.default_rng(config.seed),
    )
    return run(state)


# ---------------------------------------------------------------------------
# Checkpoint container: a zip holding one PFM1 tensor per parameter under
# named per-module sections, plus header.json with config, step count, and
# the RNG/optimizer bookkeeping exact resume needs.


def config_hash(train_config: TrainConfig, model_config: ModelConfig) -> str:
    payload = json.dumps(
        {"train": dataclasses.asdict(train_config), "model": dataclasses.asdict(model_config)},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    model = state.model
    opt_state = state.optimizer.state_dict()["state"]
    header = {
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "train_config": dataclasses.asdict(state.config),
        "model_config": dataclasses.asdict(model.config),
        "config_hash": config_hash(state.config, model.config),
        "torch_rng": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii"),
        "np_rng": state.rng.bit_generator.state,
        "batch_queue": state.batch_queue,
        "adam_steps": {str(i): float(s["step"]) for i, s in opt_state.items()},
        "running": state.running,
    }
    entries: list[tuple[str, bytes]] = [
        ("header.json", json.dumps(header, sort_keys=True).encode("utf-8"))
    ]
    for name, tensor in model.state_dict().items():
        section = section_for_parameter(name)
        entries.append((f"{section}/{name}.pfm", tensor_to_bytes(tensor.detach().numpy())))
    for i, slot_state in opt_state.items():
        for slot in ("exp_avg", "exp_avg_sq"):
            entries.append(
                (f"optimizer/p{i}.{slot}.pfm", tensor_to_bytes(slot_state[slot].detach().numpy()))
            )
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)


def load_checkpoint(path: str | Path) -> tuple[ProsodyModel, dict]:
    """Rebuild the model from a checkpoint; returns (model, header)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
            tensors = {}
            for name in zf.namelist():
                if name == "header.json" or not name.endswith(".pfm"):
                    continue
                section, _, param = name.partition("/")
                tensors[(section, param[: -len(".pfm")])] = tensor_from_bytes(
                    zf.read(name), name=name
                )
    except zipfile.BadZipFile as exc:
        raise ValueError(f"{path}: corrupt checkpoint container: {exc}") from exc
    model = ProsodyModel(ModelConfig.from_dict(header["model_config"]))
    state_dict = {}
    for (section, param), arr in tensors.items():
        if section == "optimizer":
            continue
        state_dict[param] = torch.from_numpy(arr)
    model.load_state_dict(state_dict, strict=True)
    model.trained_steps = int(header["step"])
    return model, header


def resume(path: str | Path, utterances: list[Utterance] | None = None) -> TrainState:
    """Restore a TrainState from a checkpoint and finish the run."""
    torch.set_num_threads(1)
    model, header = load_checkpoint(path)
    config = TrainConfig(**header["train_config"])
    utts = utterances if utterances is not None else load_corpus(config.corpus_manifest)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    opt_sd = optimizer.state_dict()
    restored = {}
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            if not name.startswith("optimizer/"):
                continue
            stem = name[len("optimizer/") : -len(".pfm")]  # p{i}.{slot}
            idx_part, _, slot = stem.partition(".")
            idx = int(idx_part[1:])
            entry = restored.setdefault(idx, {})
            entry[slot] = torch.from_numpy(tensor_from_bytes(zf.read(name), name=name))
    for idx_str, step_value in header["adam_steps"].items():
        restored[int(idx_str)]["step"] = torch.tensor(float(step_value))
    opt_sd["state"] = restored
    optimizer.load_state_dict(opt_sd)

    rng_bytes = base64.b64decode(header["torch_rng"])
    torch.set_rng_state(torch.from_numpy(np.frombuffer(rng_bytes, dtype=np.uint8).copy()))
    rng = np.random.default_rng()
    rng.bit_generator.state = header["np_rng"]

    state = TrainState(
        model=model,
        optimizer=optimizer,
        config=config,
        corpus=utts,
        rng=rng,
        step=int(header["step"]),
        batch_queue=[list(b) for b in header["batch_queue"]],
        running=dict(header.get("running", {})),
    )
    return run(state)
