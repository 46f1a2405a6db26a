"""Synthetic end-to-end harness with planted good and bad traces.

Aligned samples get step proxies drawn around their answer direction;
misaligned samples point away from it. Scoring must separate the classes,
and a toy student trained on the selected subset must beat the heuristic
baselines on a held-out target set.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .proxy import score_sample
from .stats import rank_auc
from .types import ReasoningSample, ScoringConfig, SignalRecord
from .valuation import (
    baseline_longest,
    baseline_random,
    baseline_stepmax,
    select_top,
)

HEURISTIC_METHODS = ("grace", "random", "longest", "stepmax")


@dataclass(frozen=True)
class SynthSpec:
    """Generator knobs for one planted dataset."""

    num_samples: int = 500
    aligned_fraction: float = 0.3
    alignment_strength: float = 0.8
    noise_scale: float = 0.5
    hidden_dim: int = 16
    min_steps: int = 4
    max_steps: int = 10
    min_segment_tokens: int = 3
    max_segment_tokens: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_samples < 2:
            raise ValueError("need at least two samples")
        if not 0.0 < self.aligned_fraction < 1.0:
            raise ValueError("aligned fraction must lie in (0, 1)")
        if not 0.0 <= self.alignment_strength <= 1.0:
            raise ValueError("alignment strength must lie in [0, 1]")
        if self.noise_scale < 0.0:
            # zero is allowed: the noiseless corner is a useful exactness probe
            raise ValueError("noise scale must be non-negative")
        if self.min_steps < 1 or self.max_steps < self.min_steps:
            raise ValueError("invalid step-count range")
        if self.min_segment_tokens < 1 or self.max_segment_tokens < self.min_segment_tokens:
            raise ValueError("invalid segment token range")
        if self.aligned_fraction * self.num_samples < 1.0:
            raise ValueError("degenerate spec: expected aligned count below one")


def generate(spec: SynthSpec) -> tuple[list[ReasoningSample], list[SignalRecord],
                                       dict[str, bool]]:
    """Build planted samples, their signal records, and the class labels.

    Aligned step proxies are strength * (unit answer direction) plus noise;
    misaligned ones flip the sign of the planted component. Proxies pass
    through float32 so on-disk round trips are lossless. Fully determined
    by ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.num_samples
    n_aligned = int(round(spec.aligned_fraction * n))
    n_aligned = min(max(n_aligned, 1), n - 1)
    aligned_idx = set(rng.permutation(n)[:n_aligned].tolist())

    samples: list[ReasoningSample] = []
    records: list[SignalRecord] = []
    labels: dict[str, bool] = {}
    for i in range(n):
        sample_id = f"synth-{i:06d}"
        aligned = i in aligned_idx
        num_steps = int(rng.integers(spec.min_steps, spec.max_steps + 1))
        counts = rng.integers(spec.min_segment_tokens, spec.max_segment_tokens + 1,
                              size=num_steps + 1)
        spans = []
        cursor = 0
        for c in counts:
            spans.append((cursor, cursor + int(c)))
            cursor += int(c)
        answer_dir = rng.normal(size=spec.hidden_dim)
        answer_dir /= np.linalg.norm(answer_dir)
        noise = rng.normal(size=(num_steps, spec.hidden_dim)) / math.sqrt(spec.hidden_dim)
        sign = 1.0 if aligned else -1.0
        steps = (sign * spec.alignment_strength) * answer_dir[None, :] \
            + spec.noise_scale * noise
        samples.append(ReasoningSample(
            sample_id=sample_id,
            step_spans=tuple(spans[:-1]),
            answer_span=spans[-1],
        ))
        records.append(SignalRecord(
            sample_id=sample_id,
            step_proxies=steps.astype(np.float32).astype(np.float64),
            answer_proxy=answer_dir.astype(np.float32).astype(np.float64),
            checkpoint_id="synth",
        ))
        labels[sample_id] = aligned
    return samples, records, labels


def default_config() -> ScoringConfig:
    return ScoringConfig(checkpoints=("synth",), zero_vector_policy="score_zero")


# ---------------------------------------------------------------------------
# separation


@dataclass(frozen=True)
class SeparationReport:
    auc: float
    precision_at_budget: float
    budget: int
    n_samples: int
    rho: float
    seed: int
    config_hash: str

    def to_mapping(self) -> dict[str, Any]:
        return {
            "auc": self.auc,
            "precision_at_budget": self.precision_at_budget,
            "budget": self.budget,
            "n_samples": self.n_samples,
            "rho": self.rho,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }


def score_values(samples: Sequence[ReasoningSample],
                 records: Sequence[SignalRecord],
                 config: ScoringConfig) -> dict[str, float]:
    by_id = {r.sample_id: r for r in records}
    return {s.sample_id: score_sample(s, by_id[s.sample_id], config).value
            for s in samples}


def separation_experiment(spec: SynthSpec, config: ScoringConfig | None = None,
                          rho: float = 0.2) -> SeparationReport:
    """Score a planted dataset and measure how well the ranking recovers
    the planted classes: ranking AUC plus precision inside the budget."""
    config = config or default_config()
    samples, records, labels = generate(spec)
    values = score_values(samples, records, config)
    ids = sorted(values)
    auc = rank_auc([values[i] for i in ids], [labels[i] for i in ids])
    selection = select_top(values, rho)
    hits = sum(1 for sid in selection.selected_ids if labels[sid])
    return SeparationReport(
        auc=auc,
        precision_at_budget=hits / selection.budget,
        budget=selection.budget,
        n_samples=len(ids),
        rho=rho,
        seed=spec.seed,
        config_hash=config.config_hash(),
    )


def separation_sweep(spec: SynthSpec, strengths: Sequence[float],
                     seeds: Sequence[int], config: ScoringConfig | None = None,
                     rho: float = 0.2) -> list[SeparationReport]:
    """One separation run per (strength, seed), for null and monotonicity checks."""
    reports = []
    for strength in strengths:
        for seed in seeds:
            probe = replace(spec, alignment_strength=strength, seed=seed)
            reports.append(separation_experiment(probe, config, rho))
    return reports


def write_separation_csv(reports: Sequence[SeparationReport],
                         strengths: Sequence[float], path: str | Path) -> None:
    """One row per run; ``strength`` repeats over the seed block."""
    per_strength = len(reports) // len(strengths)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["strength", "seed", "n", "rho", "auc", "precision_at_budget"])
        for i, report in enumerate(reports):
            writer.writerow([
                repr(strengths[i // per_strength]), report.seed, report.n_samples,
                repr(report.rho), repr(report.auc), repr(report.precision_at_budget),
            ])


# ---------------------------------------------------------------------------
# downstream toy training


@dataclass(frozen=True)
class ToyTask:
    """Linear-softmax student plus a held-out target token set.

    The target loss plays the role of downstream performance; training
    runs a fixed number of optimizer steps so subset size changes data
    diversity, never compute.
    """

    input_dim: int = 8
    hidden_dim: int = 12
    vocab_size: int = 10
    target_tokens: int = 256
    train_steps: int = 300
    batch_size: int = 64
    learning_rate: float = 0.5

    def __post_init__(self) -> None:
        if min(self.input_dim, self.hidden_dim) < 1 or self.vocab_size < 2:
            raise ValueError("invalid student dimensions")
        if min(self.target_tokens, self.train_steps, self.batch_size) < 1:
            raise ValueError("invalid training sizes")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _mean_ce(rep: np.ndarray, head: np.ndarray, xs: np.ndarray,
             ys: np.ndarray) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        logits = (xs @ rep.T) @ head
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return float(-log_probs[np.arange(len(ys)), ys].mean())


def train_student(pool_x: np.ndarray, pool_y: np.ndarray, task: ToyTask,
                  init_rep: np.ndarray, init_head: np.ndarray,
                  batch_rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Plain SGD on the token-mean objective for a fixed step budget.

    Overflow is tolerated here; divergence surfaces as a non-finite final
    loss and is reported by the experiment rather than raised.
    """
    rep = init_rep.copy()
    head = init_head.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(task.train_steps):
            idx = batch_rng.integers(0, len(pool_x), size=task.batch_size)
            xs, ys = pool_x[idx], pool_y[idx]
            hidden = xs @ rep.T                      # (b, h)
            probs = _softmax_rows(hidden @ head)     # (b, V)
            residual = probs
            residual[np.arange(len(ys)), ys] -= 1.0
            residual /= len(ys)
            grad_head = hidden.T @ residual          # (h, V)
            grad_hidden = residual @ head.T          # (b, h)
            grad_rep = grad_hidden.T @ xs            # (h, m)
            rep -= task.learning_rate * grad_rep
            head -= task.learning_rate * grad_head
    return rep, head


@dataclass(frozen=True)
class MethodOutcome:
    method: str
    losses: tuple[float, ...]
    diverged: tuple[bool, ...]

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses))

    @property
    def sd_loss(self) -> float:
        return float(np.std(self.losses, ddof=1)) if len(self.losses) > 1 else 0.0


@dataclass(frozen=True)
class DownstreamReport:
    seeds: tuple[int, ...]
    outcomes: dict[str, MethodOutcome]
    relative_averages: dict[str, float]

    def wins(self, method: str, over: str) -> int:
        a = self.outcomes[method].losses
        b = self.outcomes[over].losses
        return sum(1 for x, y in zip(a, b) if x < y)


Selector = Callable[[Sequence[ReasoningSample], Mapping[str, float], float, int],
                    Sequence[str]]


def _builtin_selector(method: str) -> Selector:
    def pick(samples: Sequence[ReasoningSample], values: Mapping[str, float],
             rho: float, seed: int) -> Sequence[str]:
        if method == "grace":
            return select_top(values, rho).selected_ids
        if method == "random":
            return baseline_random(samples, rho, seed).selected_ids
        if method == "longest":
            return baseline_longest(samples, rho).selected_ids
        if method == "stepmax":
            return baseline_stepmax(samples, rho).selected_ids
        raise ValueError(f"unknown method {method!r}")
    return pick


def _assert_disjoint(train_x: np.ndarray, target_x: np.ndarray) -> None:
    target_rows = {row.tobytes() for row in target_x}
    for row in train_x:
        if row.tobytes() in target_rows:
            raise RuntimeError("training pool overlaps the held-out target set")


def downstream_experiment(spec: SynthSpec, task: ToyTask | None = None,
                          methods: Sequence[str | tuple[str, Selector]] = HEURISTIC_METHODS,
                          seeds: Sequence[int] = tuple(range(10)),
                          rho: float = 0.2,
                          config: ScoringConfig | None = None) -> DownstreamReport:
    """Train the toy student on each method's subset and compare target losses.

    Aligned samples carry teacher-consistent token labels; misaligned ones
    carry corrupted labels, so selections that recover the planted class
    train better. A full-data run is always included as the reference for
    the relative-average summary. Divergence is recorded, not raised.
    """
    if not methods:
        raise ValueError("at least one method required")
    if len(seeds) < 3:
        raise ValueError("at least three seeds required")
    task = task or ToyTask()
    config = config or default_config()

    selectors: list[tuple[str, Selector]] = []
    for method in methods:
        if isinstance(method, str):
            selectors.append((method, _builtin_selector(method)))
        else:
            selectors.append(method)

    losses: dict[str, list[float]] = {name: [] for name, _ in selectors}
    losses["full"] = []
    diverged: dict[str, list[bool]] = {name: [] for name in losses}

    for seed in seeds:
        samples, records, labels = generate(replace(spec, seed=spec.seed + seed))
        values = score_values(samples, records, config)
        world = np.random.default_rng([spec.seed, seed, 1])
        teacher_rep = world.normal(size=(task.hidden_dim, task.input_dim))
        teacher_head = world.normal(size=(task.hidden_dim, task.vocab_size))

        def teacher_labels(xs: np.ndarray) -> np.ndarray:
            return ((xs @ teacher_rep.T) @ teacher_head).argmax(axis=1)

        token_x: dict[str, np.ndarray] = {}
        token_y: dict[str, np.ndarray] = {}
        for sample in samples:
            xs = world.normal(size=(sample.total_supervised_tokens, task.input_dim))
            clean = teacher_labels(xs)
            if labels[sample.sample_id]:
                ys = clean
            else:
                shift = world.integers(1, task.vocab_size, size=len(clean))
                ys = (clean + shift) % task.vocab_size  # anything but the clean label
            token_x[sample.sample_id] = xs
            token_y[sample.sample_id] = ys

        target_x = world.normal(size=(task.target_tokens, task.input_dim))
        target_y = teacher_labels(target_x)
        _assert_disjoint(np.concatenate(list(token_x.values())), target_x)

        init_rep = world.normal(size=(task.hidden_dim, task.input_dim)) * 0.1
        init_head = world.normal(size=(task.hidden_dim, task.vocab_size)) * 0.1

        runs = list(selectors) + [("full", None)]
        for name, selector in runs:
            if selector is None:
                chosen = sorted(token_x)
            else:
                chosen = sorted(selector(samples, values, rho, seed))
            pool_x = np.concatenate([token_x[i] for i in chosen])
            pool_y = np.concatenate([token_y[i] for i in chosen])
            batch_rng = np.random.default_rng([spec.seed, seed, 2])
            rep, head = train_student(pool_x, pool_y, task, init_rep, init_head,
                                      batch_rng)
            loss = _mean_ce(rep, head, target_x, target_y)
            bad = not math.isfinite(loss)
            losses[name].append(math.inf if bad else loss)
            diverged[name].append(bad)

    outcomes = {
        name: MethodOutcome(method=name, losses=tuple(vals),
                            diverged=tuple(diverged[name]))
        for name, vals in losses.items()
    }
    rel = {
        name: relative_average(outcome.losses, outcomes["full"].losses)
        for name, outcome in outcomes.items()
    }
    return DownstreamReport(seeds=tuple(seeds), outcomes=outcomes,
                            relative_averages=rel)


def write_downstream_csv(report: DownstreamReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method", "seed", "target_loss", "diverged"])
        for name, outcome in sorted(report.outcomes.items()):
            for seed, loss, bad in zip(report.seeds, outcome.losses, outcome.diverged):
                writer.writerow([name, seed, repr(loss), int(bad)])


def write_downstream_summary_csv(report: DownstreamReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method", "mean_target_loss", "sd_target_loss",
                         "relative_average_vs_full"])
        for name, outcome in sorted(report.outcomes.items()):
            writer.writerow([name, repr(outcome.mean_loss), repr(outcome.sd_loss),
                             repr(report.relative_averages[name])])


# ---------------------------------------------------------------------------
# relative average


def relative_average(subset_values: Sequence[float],
                     full_values: Sequence[float]) -> float:
    """Mean over entries of 100 * subset / full.

    Entries pair positionally (benchmarks, seeds, or any other unit); every
    full-data value must be nonzero.
    """
    if len(subset_values) != len(full_values):
        raise ValueError("entry lists must have equal length")
    if len(subset_values) == 0:
        raise ValueError("at least one entry required")
    ratios = []
    for sub, full in zip(subset_values, full_values):
        if full == 0.0:
            raise ValueError("full-data metric of zero admits no relative score")
        ratios.append(100.0 * sub / full)
    return math.fsum(ratios) / len(ratios)
