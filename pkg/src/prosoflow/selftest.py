"""Self-contained oracle checks behind the `selftest` CLI subcommand.

Each check recomputes its expected answer with an independent method
(brute-force enumeration, hand convolution, finite differences) and
compares the package's fast path against it.  No training happens here;
everything finishes in seconds.
"""

from __future__ import annotations

import itertools
import math
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import acoustic, control, corpus, metrics, phrasing, pitch
from .intonation import IntonationTokenLayer, align_attention


def _brute_force_mas_score(value: np.ndarray) -> float:
    """Max alignment score by enumerating all monotone surjective paths."""
    n_tokens, n_frames = value.shape
    best = -np.inf
    for cuts in itertools.combinations(range(1, n_frames), n_tokens - 1):
        bounds = (0, *cuts, n_frames)
        score = sum(
            value[i, j]
            for i in range(n_tokens)
            for j in range(bounds[i], bounds[i + 1])
        )
        best = max(best, score)
    return float(best)


def _recursive_edit_distance(a: tuple, b: tuple, memo=None) -> int:
    if memo is None:
        memo = {}
    key = (len(a), len(b))
    if key in memo:
        return memo[key]
    if not a:
        return len(b)
    if not b:
        return len(a)
    cost = 0 if a[0] == b[0] else 1
    result = min(
        _recursive_edit_distance(a[1:], b[1:], memo) + cost,
        _recursive_edit_distance(a[1:], b, memo) + 1,
        _recursive_edit_distance(a, b[1:], memo) + 1,
    )
    memo[key] = result
    return result


def check_mas_oracle() -> None:
    rng = np.random.default_rng(11)
    for _ in range(20):
        n_tokens = int(rng.integers(1, 5))
        n_frames = int(rng.integers(n_tokens, 9))
        z = rng.normal(size=(n_frames, 3))
        mu = rng.normal(size=(n_tokens, 3))
        alignment = acoustic.mas_align(z, mu)
        dp_score = acoustic.mas_score(z, mu, alignment)
        brute = _brute_force_mas_score(acoustic.gaussian_log_likelihood_matrix(z, mu))
        assert abs(dp_score - brute) < 1e-9, f"MAS {dp_score} != brute force {brute}"


def check_alignment_laws() -> None:
    rng = np.random.default_rng(12)
    for _ in range(100):
        n_tokens = int(rng.integers(1, 8))
        n_frames = int(rng.integers(n_tokens, 40))
        alignment = acoustic.mas_align(
            rng.normal(size=(n_frames, 4)), rng.normal(size=(n_tokens, 4))
        )
        d = alignment.durations()
        assert d.sum() == n_frames and (d >= 1).all()


def check_wer_oracle() -> None:
    rng = np.random.default_rng(13)
    alphabet = ["a", "b", "c", "d"]
    for _ in range(30):
        ref = [alphabet[i] for i in rng.integers(0, 4, size=rng.integers(1, 7))]
        hyp = [alphabet[i] for i in rng.integers(0, 4, size=rng.integers(0, 7))]
        expected = _recursive_edit_distance(tuple(ref), tuple(hyp)) / len(ref)
        got = metrics.wer(ref, hyp)
        assert abs(got - expected) < 1e-12, f"wer {got} != {expected} for {ref} vs {hyp}"


def check_f0_metric() -> None:
    all_voiced = np.ones(4, dtype=bool)
    gt = pitch.PitchContour(np.array([100.0, 150.0, 200.0, 180.0]), all_voiced)
    assert metrics.rmse_f0(gt, gt) == 0.0
    doubled = pitch.PitchContour(gt.f0 * 2.0, all_voiced)
    assert abs(metrics.rmse_f0(gt, doubled) - math.log(2.0)) < 1e-9
    tempo_gt = pitch.PitchContour(np.array([100.0, 200.0]), np.ones(2, dtype=bool))
    tempo_syn = pitch.PitchContour(np.array([100.0, 100.0, 200.0]), np.ones(3, dtype=bool))
    assert metrics.rmse_f0(tempo_gt, tempo_syn) == 0.0


def check_break_f1() -> None:
    ann = corpus.BreakAnnotation
    assert metrics.break_f1(ann((2, 5)), ann((2, 5)))[2] == 1.0
    p, r, f1 = metrics.break_f1(ann((2, 5)), ann((2,)))
    assert (p, r) == (1.0, 0.5) and abs(f1 - 2.0 / 3.0) < 1e-12
    assert metrics.break_f1(ann(()), ann(()))[2] == 1.0


def check_pitch_ops() -> None:
    contour = pitch.PitchContour(
        np.array([110.0, 0.0, 0.0, 140.0]), np.array([True, False, False, True])
    )
    filled = pitch.interpolate(contour)
    assert np.allclose(filled.f0, [110.0, 120.0, 130.0, 140.0])
    bumpy = pitch.PitchContour(np.array([100.0, 100.0, 130.0, 100.0, 100.0]), np.ones(5, bool))
    smoothed = pitch.smooth(bumpy, window=3)
    assert np.allclose(smoothed.f0, [100.0, 110.0, 110.0, 110.0, 100.0])
    rng = np.random.default_rng(14)
    for _ in range(100):
        values = pitch.snap_to_grid(rng.uniform(80, 400, size=int(rng.integers(2, 40))))
        seg = pitch.perturb(values, rng)
        assert np.array_equal(np.diff(seg.values), np.diff(values))


def check_flow_identities() -> None:
    x0 = torch.tensor([[1.0, -2.0], [0.5, 3.0]], dtype=torch.float64)
    x1 = torch.tensor([[3.0, 1.0], [-1.0, 0.0]], dtype=torch.float64)
    zeros = torch.zeros_like(x0)
    assert torch.equal(acoustic.sample_xt(x0, x1, 0.0, 0.1, noise=zeros), x0)
    at_one = acoustic.sample_xt(x0, x1, 1.0, 0.1, noise=zeros)
    assert torch.allclose(at_one, 0.1 * x0 + x1, atol=1e-15)
    u_star = acoustic.cfm_target(x0, x1, 0.1)
    assert float(acoustic.cfm_loss(u_star, x0, x1, 0.1)) == 0.0
    v = torch.tensor([[0.25, -1.0], [2.0, 0.0]], dtype=torch.float64)
    out = acoustic.decode_ode(zeros, x0, 7, lambda x, c, t: v)
    assert torch.allclose(out, x0 + v, atol=1e-12)
    # linear-in-t field: global Euler error must shrink with the step count
    field = lambda x, c, t: torch.full_like(x, 2.0 * t)
    exact = x0 + 1.0  # integral of 2t over [0, 1]
    errs = [float((acoustic.decode_ode(zeros, x0, n, field) - exact).abs().max()) for n in (2, 8, 32)]
    assert errs[0] > errs[1] > errs[2]


def check_break_tokens() -> None:
    rng = np.random.default_rng(15)
    for _ in range(50):
        n_words = int(rng.integers(1, 7))
        spans, cursor, phones = [], 0, []
        for _ in range(n_words):
            n = int(rng.integers(2, 5))
            spans.append((cursor, cursor + n - 1))
            phones.extend(int(p) for p in rng.integers(0, 30, size=n))
            cursor += n
        breaks = corpus.BreakAnnotation(
            tuple(sorted(rng.choice(n_words, size=int(rng.integers(0, n_words + 1)), replace=False)))
        )
        ext = phrasing.insert_break_tokens(phones, spans, breaks)
        assert len(ext) == len(phones) + len(breaks)


def check_corpus_roundtrip() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp) / "a", Path(tmp) / "b"
        corpus.generate_toy_corpus(a, n_utts=2, vocab_size=6, seed=3)
        corpus.generate_toy_corpus(b, n_utts=2, vocab_size=6, seed=3)
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), f"{rel} differs"
        for utt in corpus.load_corpus(a / "manifest.jsonl"):
            detected = phrasing.detect_breaks_silence(utt)
            assert detected.last_word_indices == utt.breaks.last_word_indices


@torch.no_grad()
def check_attention() -> None:
    torch.manual_seed(16)
    layer = IntonationTokenLayer()
    query = torch.randn(128)
    _, weights = layer(query)
    assert torch.allclose(weights.sum(dim=-1), torch.ones(4), atol=1e-6)
    bias = torch.zeros(6)
    bias[2] = 1e3
    forced, _ = layer(query, logit_bias=bias)
    direct = layer.w_out(layer.w_value(layer.tokens[2]))
    assert float((forced - direct).abs().max()) < 1e-3
    refs = torch.randn(1, 192)
    out = align_attention(torch.randn(3, 192), refs)
    assert torch.allclose(out, refs.expand(3, -1), atol=1e-6)


def check_slope_edit() -> None:
    seg = pitch.PitchShapeSegment(np.array([100.0, 120.0, 140.0]), 0)
    level = control.set_segment_slope(seg, 0.0)
    assert np.allclose(level.values, [120.0, 120.0, 120.0])
    rising = control.set_segment_slope(seg, 2.0)
    assert np.allclose(rising.values, [118.0, 120.0, 122.0])


def check_gradients() -> None:
    torch.manual_seed(17)
    # tiny float64 decoder: u = W2 tanh(W1 [x; c]) checked against central differences
    w1 = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    w2 = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
    x0 = torch.randn(3, 2, dtype=torch.float64)
    x1 = torch.randn(3, 2, dtype=torch.float64)
    c = torch.randn(3, 2, dtype=torch.float64)
    x_t = acoustic.sample_xt(x0, x1, 0.3, 1e-4, noise=torch.zeros_like(x0))

    def loss_fn() -> torch.Tensor:
        u = torch.tanh(torch.cat([x_t, c], dim=1) @ w1.T) @ w2.T
        return acoustic.cfm_loss(u, x0, x1, 1e-4)

    loss = loss_fn()
    loss.backward()
    for param in (w1, w2):
        analytic = param.grad.clone()
        flat = param.detach().reshape(-1)
        for idx in range(0, flat.numel(), 3):
            eps = 1e-6
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                up = float(loss_fn())
                flat[idx] = orig - eps
                down = float(loss_fn())
                flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = analytic.reshape(-1)[idx].item()
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            assert rel < 1e-4, f"gradient mismatch: {an} vs {fd}"


CHECKS = [
    ("mas-brute-force-equivalence", check_mas_oracle),
    ("alignment-laws", check_alignment_laws),
    ("wer-brute-force", check_wer_oracle),
    ("f0-rmse-identities", check_f0_metric),
    ("break-f1-conventions", check_break_f1),
    ("pitch-processing", check_pitch_ops),
    ("flow-path-identities", check_flow_identities),
    ("break-token-length-law", check_break_tokens),
    ("corpus-determinism", check_corpus_roundtrip),
    ("attention-invariants", check_attention),
    ("slope-edit", check_slope_edit),
    ("cfm-gradient-fd", check_gradients),
]


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, fn in CHECKS:
        try:
            fn()
            status = "PASS"
        except AssertionError as exc:
            status = f"FAIL ({exc})"
            ok = False
        if verbose:
            print(f"[{status.split(' ')[0]:4s}] {name}" + ("" if status == "PASS" else f": {status}"))
    return ok
