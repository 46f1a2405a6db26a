"""Domain types shared across the curation pipeline.

Everything here is immutable after construction and safe to share across
threads. Vector payloads are float64 in memory; the on-disk signal format
quantizes to float32 (see formats.py).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

Span = tuple[int, int]

TARGET_MODES = ("answer", "full_trace", "suffix")
ZERO_VECTOR_POLICIES = ("error", "score_zero")
ABLATIONS = ("none", "answer_only", "history_only")


class TraceDataError(ValueError):
    """Malformed trace data: bad spans, bad files, or broken invariants."""


class SignalFormatError(TraceDataError):
    """Malformed or internally inconsistent binary signal dump."""


class MatchingError(TraceDataError):
    """Samples and signal records that cannot be paired one-to-one."""


class ZeroVectorError(ValueError):
    """A direction was requested for a vector with zero norm."""


def _as_span(raw: Any, label: str) -> Span:
    try:
        start, end = raw
        start, end = int(start), int(end)
    except (TypeError, ValueError) as exc:
        raise TraceDataError(f"{label}: expected [start, end) pair, got {raw!r}") from exc
    if start < 0:
        raise TraceDataError(f"{label}: negative start index {start}")
    if end <= start:
        raise TraceDataError(f"{label}: empty span [{start}, {end})")
    return (start, end)


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ReasoningSample:
    """One reasoning trace: ordered step spans followed by an answer span.

    Spans are half-open ``[start, end)`` intervals over supervised-token
    indices. Prompt tokens are never indexed. Steps must be non-empty,
    non-overlapping, in order, and entirely before the answer span.
    """

    sample_id: str
    step_spans: tuple[Span, ...]
    answer_span: Span
    source_meta: Mapping[str, Any] | None = None

    def __post_init__(self) -> None:
        if not self.sample_id:
            raise TraceDataError("sample_id must be a non-empty string")
        spans = tuple(_as_span(s, f"{self.sample_id}: step {i + 1}")
                      for i, s in enumerate(self.step_spans))
        if not spans:
            raise TraceDataError(f"{self.sample_id}: at least one step span required")
        answer = _as_span(self.answer_span, f"{self.sample_id}: answer span")
        prev_end = None
        for i, (start, end) in enumerate(spans):
            if prev_end is not None and start < prev_end:
                raise TraceDataError(
                    f"{self.sample_id}: step {i + 1} starts at {start}, "
                    f"before previous step ends at {prev_end}")
            prev_end = end
        if answer[0] < spans[-1][1]:
            raise TraceDataError(
                f"{self.sample_id}: answer span starts at {answer[0]}, "
                f"before last step ends at {spans[-1][1]}")
        object.__setattr__(self, "step_spans", spans)
        object.__setattr__(self, "answer_span", answer)

    @property
    def num_steps(self) -> int:
        return len(self.step_spans)

    @property
    def step_token_counts(self) -> tuple[int, ...]:
        return tuple(end - start for start, end in self.step_spans)

    @property
    def answer_token_count(self) -> int:
        return self.answer_span[1] - self.answer_span[0]

    @property
    def total_supervised_tokens(self) -> int:
        return sum(self.step_token_counts) + self.answer_token_count


@dataclass(frozen=True, eq=False)
class SignalRecord:
    """Per-sample gradient proxies: one vector per step plus one for the answer.

    ``token_level`` optionally carries the per-token upstream signals the
    proxies were averaged from, as ``(supervised_token_index, vector)`` pairs.
    """

    sample_id: str
    step_proxies: np.ndarray  # (K, d)
    answer_proxy: np.ndarray  # (d,)
    checkpoint_id: str = ""
    token_level: tuple[tuple[int, np.ndarray], ...] | None = None

    def __post_init__(self) -> None:
        if not self.sample_id:
            raise TraceDataError("sample_id must be a non-empty string")
        steps = np.atleast_2d(np.asarray(self.step_proxies, dtype=np.float64))
        answer = np.asarray(self.answer_proxy, dtype=np.float64)
        if answer.ndim != 1:
            raise TraceDataError(f"{self.sample_id}: answer proxy must be a vector")
        if steps.shape[0] < 1:
            raise TraceDataError(f"{self.sample_id}: at least one step proxy required")
        if steps.shape[1] != answer.shape[0]:
            raise TraceDataError(
                f"{self.sample_id}: step proxies have dim {steps.shape[1]}, "
                f"answer proxy has dim {answer.shape[0]}")
        if answer.shape[0] < 1:
            raise TraceDataError(f"{self.sample_id}: hidden dim must be positive")
        if not np.isfinite(steps).all() or not np.isfinite(answer).all():
            raise TraceDataError(f"{self.sample_id}: non-finite signal component")
        object.__setattr__(self, "step_proxies", _readonly(steps))
        object.__setattr__(self, "answer_proxy", _readonly(answer))
        if self.token_level is not None:
            frozen = []
            for idx, vec in self.token_level:
                vec = np.asarray(vec, dtype=np.float64)
                if vec.shape != (answer.shape[0],):
                    raise TraceDataError(
                        f"{self.sample_id}: token-level vector at index {idx} "
                        f"has shape {vec.shape}, expected ({answer.shape[0]},)")
                if not np.isfinite(vec).all():
                    raise TraceDataError(
                        f"{self.sample_id}: non-finite token-level component at index {idx}")
                frozen.append((int(idx), _readonly(vec)))
            object.__setattr__(self, "token_level", tuple(frozen))

    @property
    def num_steps(self) -> int:
        return self.step_proxies.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.answer_proxy.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SignalRecord):
            return NotImplemented
        if (self.sample_id, self.checkpoint_id) != (other.sample_id, other.checkpoint_id):
            return False
        if not np.array_equal(self.step_proxies, other.step_proxies):
            return False
        if not np.array_equal(self.answer_proxy, other.answer_proxy):
            return False
        if (self.token_level is None) != (other.token_level is None):
            return False
        if self.token_level is not None:
            if len(self.token_level) != len(other.token_level):
                return False
            for (i, v), (j, w) in zip(self.token_level, other.token_level):
                if i != j or not np.array_equal(v, w):
                    return False
        return True

    def scaled(self, factor: float) -> "SignalRecord":
        """Return a copy with every vector multiplied by ``factor``."""
        token_level = None
        if self.token_level is not None:
            token_level = tuple((i, v * factor) for i, v in self.token_level)
        return SignalRecord(
            sample_id=self.sample_id,
            step_proxies=self.step_proxies * factor,
            answer_proxy=self.answer_proxy * factor,
            checkpoint_id=self.checkpoint_id,
            token_level=token_level,
        )


@dataclass(frozen=True)
class HistoryScheme:
    """How earlier steps are weighted into the history reference direction.

    ``uniform`` spreads mass evenly over all earlier steps, ``window`` over
    the last ``window`` of them, ``ema`` decays geometrically with ``beta``.
    """

    kind: str = "uniform"
    window: int | None = None
    beta: float | None = None

    def __post_init__(self) -> None:
        if self.kind == "uniform":
            if self.window is not None or self.beta is not None:
                raise ValueError("uniform history takes no parameters")
        elif self.kind == "window":
            if self.window is None or int(self.window) < 1:
                raise ValueError(f"window size must be >= 1, got {self.window}")
            object.__setattr__(self, "window", int(self.window))
        elif self.kind == "ema":
            if self.beta is None or not (0.0 <= float(self.beta) < 1.0):
                raise ValueError(f"ema decay must lie in [0, 1), got {self.beta}")
            object.__setattr__(self, "beta", float(self.beta))
        else:
            raise ValueError(f"unknown history scheme {self.kind!r}")

    @classmethod
    def uniform(cls) -> "HistoryScheme":
        return cls("uniform")

    @classmethod
    def windowed(cls, window: int) -> "HistoryScheme":
        return cls("window", window=window)

    @classmethod
    def ema(cls, beta: float) -> "HistoryScheme":
        return cls("ema", beta=beta)

    @classmethod
    def parse(cls, text: str) -> "HistoryScheme":
        """Parse CLI syntax: ``uniform``, ``window:W``, or ``ema:BETA``."""
        head, _, arg = text.partition(":")
        head = head.strip().lower()
        if head == "uniform":
            if arg:
                raise ValueError("uniform history takes no parameter")
            return cls.uniform()
        if head == "window":
            return cls.windowed(int(arg))
        if head == "ema":
            return cls.ema(float(arg))
        raise ValueError(f"unknown history scheme {text!r}")

    def spec(self) -> str:
        if self.kind == "window":
            return f"window:{self.window}"
        if self.kind == "ema":
            return f"ema:{self.beta!r}"
        return "uniform"


@dataclass(frozen=True)
class ScoringConfig:
    """Knobs for step scoring: answer/history balance, history weighting,
    target choice, checkpoint set, and degenerate-vector handling."""

    alpha: float = 0.7
    history: HistoryScheme = field(default_factory=HistoryScheme.uniform)
    target_mode: str = "answer"
    checkpoints: tuple[str, ...] = ("ckpt0",)
    zero_vector_policy: str = "error"
    ablation: str = "none"

    def __post_init__(self) -> None:
        if not (0.0 <= float(self.alpha) <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")
        checkpoints = tuple(str(c) for c in self.checkpoints)
        if not checkpoints:
            raise ValueError("at least one checkpoint id required")
        if len(set(checkpoints)) != len(checkpoints):
            raise ValueError(f"duplicate checkpoint ids: {checkpoints}")
        object.__setattr__(self, "checkpoints", checkpoints)
        if self.zero_vector_policy not in ZERO_VECTOR_POLICIES:
            raise ValueError(
                f"zero_vector_policy must be one of {ZERO_VECTOR_POLICIES}, "
                f"got {self.zero_vector_policy!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    def to_mapping(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "history": self.history.spec(),
            "target_mode": self.target_mode,
            "checkpoints": list(self.checkpoints),
            "zero_vector_policy": self.zero_vector_policy,
            "ablation": self.ablation,
        }

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> "ScoringConfig":
        return cls(
            alpha=float(raw["alpha"]),
            history=HistoryScheme.parse(raw["history"]),
            target_mode=raw["target_mode"],
            checkpoints=tuple(raw["checkpoints"]),
            zero_vector_policy=raw["zero_vector_policy"],
            ablation=raw.get("ablation", "none"),
        )

    def config_hash(self) -> str:
        payload = json.dumps(self.to_mapping(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class StepScore:
    """Scored step: alignment with the target, alignment with the history
    reference (absent for the first step), and their convex combination."""

    index: int  # 1-based step position
    answer_alignment: float
    history_alignment: float | None
    combined: float

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError(f"step index must be >= 1, got {self.index}")
        for label, value in (("answer_alignment", self.answer_alignment),
                             ("combined", self.combined)):
            if not -1.0 <= value <= 1.0:
                raise ValueError(f"{label} outside [-1, 1]: {value}")
        if self.history_alignment is not None and not -1.0 <= self.history_alignment <= 1.0:
            raise ValueError(f"history_alignment outside [-1, 1]: {self.history_alignment}")


@dataclass(frozen=True)
class ScoreReport:
    """Per-sample scoring output for one checkpoint: step utilities and
    their mean, stamped with the config hash that produced them."""

    sample_id: str
    checkpoint_id: str
    steps: tuple[StepScore, ...]
    value: float
    config_hash: str

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError(f"{self.sample_id}: report must carry at least one step score")
        mean = math.fsum(s.combined for s in self.steps) / len(self.steps)
        if not math.isclose(self.value, mean, rel_tol=0.0, abs_tol=1e-12):
            raise ValueError(
                f"{self.sample_id}: value {self.value} is not the mean of "
                f"step scores ({mean})")

    def to_mapping(self) -> dict[str, Any]:
        return {
            "kind": "report",
            "sample_id": self.sample_id,
            "checkpoint_id": self.checkpoint_id,
            "steps": [
                {
                    "k": s.index,
                    "answer_alignment": s.answer_alignment,
                    "history_alignment": s.history_alignment,
                    "combined": s.combined,
                }
                for s in self.steps
            ],
            "value": self.value,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> "ScoreReport":
        steps = tuple(
            StepScore(
                index=int(s["k"]),
                answer_alignment=float(s["answer_alignment"]),
                history_alignment=(None if s["history_alignment"] is None
                                   else float(s["history_alignment"])),
                combined=float(s["combined"]),
            )
            for s in raw["steps"]
        )
        return cls(
            sample_id=raw["sample_id"],
            checkpoint_id=raw["checkpoint_id"],
            steps=steps,
            value=float(raw["value"]),
            config_hash=raw["config_hash"],
        )


@dataclass(frozen=True)
class SelectionResult:
    """Ranked ids with the retained top slice under budget ceil(rho * N)."""

    rho: float
    budget: int
    ranked_ids: tuple[str, ...]
    ranked_values: tuple[float, ...]
    selected_ids: tuple[str, ...]
    tie_break: str = "by_id_ascending"

    def __post_init__(self) -> None:
        if len(self.ranked_ids) != len(self.ranked_values):
            raise ValueError("ranked_ids and ranked_values must align")
        if len(self.selected_ids) != self.budget:
            raise ValueError(
                f"selected {len(self.selected_ids)} ids, budget is {self.budget}")
        for earlier, later in zip(self.ranked_values, self.ranked_values[1:]):
            if later > earlier:
                raise ValueError("ranked values must be non-increasing")
        if self.tie_break != "by_id_ascending":
            raise ValueError(f"unsupported tie break {self.tie_break!r}")

    def to_mappings(self) -> list[dict[str, Any]]:
        selected = set(self.selected_ids)
        return [
            {
                "kind": "row",
                "rank": rank,
                "sample_id": sid,
                "value": value,
                "selected": sid in selected,
            }
            for rank, (sid, value) in enumerate(
                zip(self.ranked_ids, self.ranked_values), start=1)
        ]
