"""Scoring math at the representation interface.

A token's upstream signal is the cross-entropy gradient with respect to the
final hidden state: the output projection applied to (probabilities minus the
one-hot target). Averaging those signals over a span gives a direction proxy
for the span's parameter-space update; steps are scored by cosine alignment
of their proxy with a target proxy and with a weighted history reference.

All inner products accumulate with ``math.fsum`` (exactly rounded), so scores
are bit-reproducible across platforms regardless of segment length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .types import (
    HistoryScheme,
    MatchingError,
    ReasoningSample,
    ScoreReport,
    ScoringConfig,
    SignalRecord,
    StepScore,
    ZeroVectorError,
)


@dataclass(frozen=True)
class OutputProjection:
    """Fixed output projection mapping hidden states to logits.

    ``matrix`` has shape (hidden dim, vocabulary size); logits for a hidden
    state h are ``matrix.T @ h``.
    """

    matrix: np.ndarray

    def __post_init__(self) -> None:
        mat = np.asarray(self.matrix, dtype=np.float64)
        if mat.ndim != 2:
            raise ValueError(f"projection must be 2-d, got shape {mat.shape}")
        d, vocab = mat.shape
        if d < 1 or vocab < 2:
            raise ValueError(f"projection needs d >= 1 and V >= 2, got {mat.shape}")
        if not np.isfinite(mat).all():
            raise ValueError("projection contains non-finite entries")
        mat = np.ascontiguousarray(mat)
        mat.flags.writeable = False
        object.__setattr__(self, "matrix", mat)

    @property
    def hidden_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class HistoryWeights:
    """Normalized weights over the steps strictly before ``step_index``."""

    step_index: int
    weights: np.ndarray  # entry j (0-based) weights step j+1

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if self.step_index < 2:
            raise ValueError("history weights exist only for step index >= 2")
        if w.shape != (self.step_index - 1,):
            raise ValueError(
                f"expected {self.step_index - 1} weights, got shape {w.shape}")
        if (w < 0.0).any():
            raise ValueError("history weights must be non-negative")
        total = math.fsum(w.tolist())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"history weights sum to {total!r}, expected 1")
        w = np.ascontiguousarray(w)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)


def _fsum_dot(a: np.ndarray, b: np.ndarray) -> float:
    return math.fsum((a * b).tolist())


def upstream_signal(probs: Sequence[float] | np.ndarray, target_id: int,
                    projection: OutputProjection, strict: bool = True) -> np.ndarray:
    """Token-level gradient at the hidden-state interface.

    Returns ``matrix @ (probs - onehot(target_id))``, a vector of length d.
    In strict mode the probability vector must be non-negative and sum to
    one within 1e-6 (full-softmax output, not truncated or re-tempered).
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] != projection.vocab_size:
        raise ValueError(
            f"probability vector has shape {p.shape}, expected "
            f"({projection.vocab_size},)")
    if not 0 <= target_id < projection.vocab_size:
        raise ValueError(
            f"target id {target_id} outside vocabulary of size {projection.vocab_size}")
    if strict:
        if (p < 0.0).any():
            raise ValueError("probabilities must be non-negative")
        total = math.fsum(p.tolist())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {total!r}, expected 1 within 1e-6")
    residual = p.copy()
    residual[target_id] -= 1.0
    return projection.matrix @ residual


def segment_proxy(signals: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Componentwise mean of the token signals in a span.

    Sums are exactly rounded, so duplicating the input list leaves the
    result bit-identical.
    """
    block = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    if block.size == 0 or block.shape[0] == 0:
        raise ValueError("segment proxy of an empty token set is undefined")
    count = block.shape[0]
    return np.array([math.fsum(block[:, c].tolist()) / count
                     for c in range(block.shape[1])])


def cosine(a: np.ndarray, b: np.ndarray, policy: str = "error") -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    A zero-norm input either raises (policy ``error``) or scores a neutral
    0.0 (policy ``score_zero``): a degenerate direction carries no evidence.
    """
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape or va.ndim != 1:
        raise ValueError(f"cosine needs equal-length vectors, got {va.shape} and {vb.shape}")
    sq_a = _fsum_dot(va, va)
    sq_b = _fsum_dot(vb, vb)
    if sq_a == 0.0 or sq_b == 0.0:
        if policy == "score_zero":
            return 0.0
        raise ZeroVectorError("cosine with a zero-norm vector")
    value = _fsum_dot(va, vb) / math.sqrt(sq_a * sq_b)
    return min(1.0, max(-1.0, value))


def materialize_weights(step_index: int, scheme: HistoryScheme) -> HistoryWeights:
    """Spell out the weights a scheme assigns to steps 1..step_index-1.

    uniform: 1/(k-1) everywhere. window: uniform mass on the last
    min(W, k-1) steps. ema: beta^(k-1-j), normalized; beta = 0 keeps only
    the immediately preceding step.
    """
    if step_index < 2:
        raise ValueError("history weights exist only for step index >= 2")
    count = step_index - 1
    if scheme.kind == "uniform":
        weights = np.full(count, 1.0 / count)
    elif scheme.kind == "window":
        active = min(scheme.window, count)
        weights = np.zeros(count)
        weights[count - active:] = 1.0 / active
    elif scheme.kind == "ema":
        exponents = np.arange(count - 1, -1, -1, dtype=np.float64)
        raw = np.power(scheme.beta, exponents)
        weights = raw / math.fsum(raw.tolist())
    else:  # pragma: no cover - HistoryScheme validates kinds
        raise ValueError(f"unknown history scheme {scheme.kind!r}")
    return HistoryWeights(step_index=step_index, weights=weights)


def history_reference(step_proxies: np.ndarray, weights: HistoryWeights,
                      policy: str = "error") -> np.ndarray:
    """Unit direction of the weighted sum of the preceding step proxies.

    Under policy ``score_zero`` a degenerate (zero) weighted sum returns the
    zero vector, which downstream cosines score as neutral 0.
    """
    block = np.atleast_2d(np.asarray(step_proxies, dtype=np.float64))
    count = weights.step_index - 1
    if block.shape[0] < count:
        raise ValueError(
            f"need {count} preceding proxies for step {weights.step_index}, "
            f"got {block.shape[0]}")
    combo = np.array([
        math.fsum((weights.weights * block[:count, c]).tolist())
        for c in range(block.shape[1])
    ])
    norm_sq = _fsum_dot(combo, combo)
    if norm_sq == 0.0:
        if policy == "score_zero":
            return np.zeros_like(combo)
        raise ZeroVectorError(
            f"history reference for step {weights.step_index} is the zero vector")
    return combo / math.sqrt(norm_sq)


def _weighted_segment_mean(proxies: Sequence[np.ndarray],
                           counts: Sequence[int]) -> np.ndarray:
    total = sum(counts)
    dim = len(proxies[0])
    return np.array([
        math.fsum(count * vec[c] for count, vec in zip(counts, proxies)) / total
        for c in range(dim)
    ])


def target_proxy(record: SignalRecord, sample: ReasoningSample, mode: str,
                 current_step: int | None = None) -> np.ndarray:
    """Direction proxy of the optimization target for one step.

    ``answer`` returns the answer proxy verbatim. ``full_trace`` returns the
    token-count-weighted mean over all steps plus the answer, which equals
    the mean upstream signal over the union span. ``suffix`` does the same
    over the segments strictly after ``current_step``.
    """
    if record.num_steps != sample.num_steps:
        raise MatchingError(
            f"{sample.sample_id}: sample has {sample.num_steps} steps, "
            f"signal record has {record.num_steps}")
    if mode == "answer":
        return np.asarray(record.answer_proxy, dtype=np.float64)
    counts = sample.step_token_counts
    if mode == "full_trace":
        proxies = [record.step_proxies[k] for k in range(record.num_steps)]
        proxies.append(np.asarray(record.answer_proxy))
        return _weighted_segment_mean(proxies, list(counts) + [sample.answer_token_count])
    if mode == "suffix":
        if current_step is None or not 1 <= current_step <= sample.num_steps:
            raise ValueError(
                f"suffix target needs a current step in [1, {sample.num_steps}], "
                f"got {current_step}")
        if current_step == sample.num_steps:
            return np.asarray(record.answer_proxy, dtype=np.float64)
        proxies = [record.step_proxies[k] for k in range(current_step, record.num_steps)]
        proxies.append(np.asarray(record.answer_proxy))
        tail_counts = list(counts[current_step:]) + [sample.answer_token_count]
        return _weighted_segment_mean(proxies, tail_counts)
    raise ValueError(f"unknown target mode {mode!r}")


def step_score(step_vec: np.ndarray, target_vec: np.ndarray,
               history_ref: np.ndarray | None, alpha: float, step_index: int,
               policy: str = "error") -> StepScore:
    """Score one step: target alignment blended with history alignment.

    The first step has no history, so its score is the target alignment
    alone. For later steps the convex combination is clamped into the
    [min, max] of its two terms so the bound survives rounding.
    """
    if step_index == 1:
        if history_ref is not None:
            raise ValueError("step 1 has no preceding steps; no history reference applies")
        ans = cosine(step_vec, target_vec, policy)
        return StepScore(index=1, answer_alignment=ans, history_alignment=None,
                         combined=ans)
    if history_ref is None:
        raise ValueError(f"step {step_index} requires a history reference")
    ans = cosine(step_vec, target_vec, policy)
    hist = cosine(step_vec, history_ref, policy)
    if alpha == 1.0:
        combined = ans
    elif alpha == 0.0:
        combined = hist
    else:
        combined = alpha * ans + (1.0 - alpha) * hist
        combined = min(max(combined, min(ans, hist)), max(ans, hist))
    return StepScore(index=step_index, answer_alignment=ans,
                     history_alignment=hist, combined=combined)


def score_sample(sample: ReasoningSample, record: SignalRecord,
                 config: ScoringConfig) -> ScoreReport:
    """Score every step of one sample and average into its value.

    Pure function of its inputs; safe to call concurrently.
    """
    if sample.sample_id != record.sample_id:
        raise MatchingError(
            f"sample {sample.sample_id!r} paired with record {record.sample_id!r}")
    if sample.num_steps != record.num_steps:
        raise MatchingError(
            f"{sample.sample_id}: sample has {sample.num_steps} steps, "
            f"signal record has {record.num_steps}")
    if config.ablation == "history_only" and sample.num_steps < 2:
        raise MatchingError(
            f"{sample.sample_id}: history-only scoring needs at least two steps")

    policy = config.zero_vector_policy
    num_steps = sample.num_steps
    proxies = np.asarray(record.step_proxies, dtype=np.float64)

    shared_target: np.ndarray | None = None
    if config.target_mode != "suffix":
        shared_target = target_proxy(record, sample, config.target_mode)

    steps: list[StepScore] = []
    for k in range(1, num_steps + 1):
        step_vec = proxies[k - 1]
        target = shared_target if shared_target is not None else target_proxy(
            record, sample, config.target_mode, current_step=k)
        if config.ablation == "answer_only":
            ans = cosine(step_vec, target, policy)
            steps.append(StepScore(index=k, answer_alignment=ans,
                                   history_alignment=None, combined=ans))
            continue
        reference: np.ndarray | None = None
        if k >= 2:
            weights = materialize_weights(k, config.history)
            reference = history_reference(proxies[:k - 1], weights, policy)
        if config.ablation == "history_only":
            if k == 1:
                continue  # no history exists at the first step; it is omitted
            ans = cosine(step_vec, target, policy)
            hist = cosine(step_vec, reference, policy)
            steps.append(StepScore(index=k, answer_alignment=ans,
                                   history_alignment=hist, combined=hist))
        else:
            steps.append(step_score(step_vec, target, reference,
                                    config.alpha, k, policy))

    value = math.fsum(s.combined for s in steps) / len(steps)
    return ScoreReport(
        sample_id=sample.sample_id,
        checkpoint_id=record.checkpoint_id,
        steps=tuple(steps),
        value=value,
        config_hash=config.config_hash(),
    )
