from __future__ import annotations

import numpy as np
import pytest
import torch
from torch import nn

from grace_extract.signals import ModelHandle

ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("extractor acceptance")
        for name, passed in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}")


class WhitespaceTokenizer:
    """Word-level toy tokenizer; id 0 is reserved for padding/unknown."""

    def __init__(self, corpus: list[str]):
        words = sorted({w for text in corpus for w in text.split()})
        self.vocab = {w: i + 1 for i, w in enumerate(words)}

    def encode(self, text: str) -> list[int]:
        return [self.vocab.get(w, 0) for w in text.split()]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 1


class TinyGRULM(nn.Module):
    """Two-layer recurrent causal LM, small enough for exact recomputation."""

    def __init__(self, vocab_size: int, hidden_dim: int = 16, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.embed = nn.Embedding(vocab_size, hidden_dim)
        self.rnn = nn.GRU(hidden_dim, hidden_dim, num_layers=2, batch_first=True)
        self.head = nn.Linear(hidden_dim, vocab_size, bias=False)

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        hidden, _ = self.rnn(self.embed(input_ids))
        return self.head(hidden)


def gru_handle(vocab_size: int, hidden_dim: int = 16, seed: int = 0) -> ModelHandle:
    model = TinyGRULM(vocab_size, hidden_dim, seed=seed).eval()
    return ModelHandle(
        name="tiny-gru",
        forward_logits=lambda ids: model(ids),
        head_weight=model.head.weight.detach(),
    )


def gpt2_handle(vocab_size: int = 97, seed: int = 1) -> ModelHandle:
    """Randomly initialized two-layer instance of a public architecture;
    built entirely offline from its config."""
    from transformers import GPT2Config, GPT2LMHeadModel

    from grace_extract.signals import handle_from_hf

    torch.manual_seed(seed)
    config = GPT2Config(
        vocab_size=vocab_size, n_positions=128, n_embd=32, n_layer=2, n_head=2)
    model = GPT2LMHeadModel(config).eval()
    return handle_from_hf(model, name="gpt2-2layer-random")


TRACES = [
    ("Add the tens first .",
     "Step 1: split 40 and 7 from 47 .\nStep 2: add 40 to 30 giving 70 .\n"
     "Step 3: add the leftover 7 and 5 giving 12 .\nAnswer: 82 ."),
    ("Compare the two fractions .",
     "Step 1: scale both to a common base .\nStep 2: compare the scaled tops .\n"
     "Answer: the second one is larger ."),
    ("Count the marbles .",
     "Step 1: three bags of four marbles give twelve .\n"
     "Step 2: remove the two broken ones .\nStep 3: check the total twice .\n"
     "Answer: ten marbles ."),
]


def text_rows() -> list[dict]:
    return [{"sample_id": f"trace-{i:02d}", "prompt": prompt, "trace": trace}
            for i, (prompt, trace) in enumerate(TRACES)]


def corpus_tokenizer() -> WhitespaceTokenizer:
    texts = [p for p, _ in TRACES] + [t for _, t in TRACES]
    return WhitespaceTokenizer(texts)


def span_rows(rng: np.random.Generator, count: int, vocab_size: int,
              max_steps: int = 5) -> list[dict]:
    """Hand-shaped pre-tokenized rows with explicit span annotations."""
    rows = []
    for i in range(count):
        prompt = rng.integers(1, vocab_size, size=int(rng.integers(2, 6))).tolist()
        num_steps = int(rng.integers(1, max_steps + 1))
        spans, cursor = [], 0
        for _ in range(num_steps + 1):
            length = int(rng.integers(2, 5))
            spans.append([cursor, cursor + length])
            cursor += length
        ids = rng.integers(1, vocab_size, size=cursor).tolist()
        rows.append({
            "sample_id": f"span-{i:02d}",
            "prompt_ids": prompt,
            "ids": ids,
            "steps": spans[:-1],
            "answer": spans[-1],
        })
    return rows


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(99)
