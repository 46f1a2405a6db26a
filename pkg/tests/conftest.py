from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from gracekit.types import ReasoningSample, SignalRecord

GOLDEN_DIR = Path(__file__).resolve().parent / "golden"

ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for name, passed in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}")


@pytest.fixture
def golden_dir() -> Path:
    return GOLDEN_DIR


def random_sample(rng: np.random.Generator, sample_id: str,
                  max_steps: int = 6, max_tokens: int = 5) -> ReasoningSample:
    num_steps = int(rng.integers(1, max_steps + 1))
    spans, cursor = [], 0
    for _ in range(num_steps + 1):
        cursor += int(rng.integers(0, 3))  # optional gap between spans
        length = int(rng.integers(1, max_tokens + 1))
        spans.append((cursor, cursor + length))
        cursor += length
    return ReasoningSample(sample_id=sample_id,
                           step_spans=tuple(spans[:-1]),
                           answer_span=spans[-1])


def random_record(rng: np.random.Generator, sample: ReasoningSample,
                  hidden_dim: int = 4, checkpoint_id: str = "ck",
                  token_level: bool = False) -> SignalRecord:
    """Record with float32-representable vectors; token-level vectors, when
    present, average exactly to the stored proxies."""
    dim = hidden_dim
    if not token_level:
        steps = rng.normal(size=(sample.num_steps, dim)).astype(np.float32)
        answer = rng.normal(size=dim).astype(np.float32)
        return SignalRecord(sample_id=sample.sample_id,
                            step_proxies=steps.astype(np.float64),
                            answer_proxy=answer.astype(np.float64),
                            checkpoint_id=checkpoint_id)
    tokens: list[tuple[int, np.ndarray]] = []
    proxies: list[np.ndarray] = []
    spans = list(sample.step_spans) + [sample.answer_span]
    for start, end in spans:
        vecs = rng.normal(size=(end - start, dim)).astype(np.float32).astype(np.float64)
        for offset, vec in enumerate(vecs):
            tokens.append((start + offset, vec))
        proxies.append(vecs.mean(axis=0).astype(np.float32).astype(np.float64))
    return SignalRecord(sample_id=sample.sample_id,
                        step_proxies=np.stack(proxies[:-1]),
                        answer_proxy=proxies[-1],
                        checkpoint_id=checkpoint_id,
                        token_level=tuple(tokens))
