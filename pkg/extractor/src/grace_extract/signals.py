"""Forward-only upstream-signal computation.

For each supervised token t with next-token distribution p_t and target id
y_t, the signal is head_weight.T applied to (p_t - onehot(y_t)), i.e. the
token-loss gradient at the final hidden state. Everything runs under
inference mode; building a gradient graph anywhere in this path is a bug
and is asserted against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
import torch


class ForwardOnlyViolation(AssertionError):
    """A gradient graph appeared where only inference is allowed."""


@dataclass
class ModelHandle:
    """Minimal surface the extractor needs from a causal LM.

    ``forward_logits`` maps int64 input ids (batch, length) to logits
    (batch, length, vocab); ``head_weight`` is the output head of shape
    (vocab, hidden), so hidden-state signals are ``residual @ head_weight``.
    """

    name: str
    forward_logits: Callable[[torch.Tensor], torch.Tensor]
    head_weight: torch.Tensor

    @property
    def hidden_dim(self) -> int:
        return int(self.head_weight.shape[1])

    @property
    def vocab_size(self) -> int:
        return int(self.head_weight.shape[0])


def handle_from_hf(model, name: str | None = None) -> ModelHandle:
    """Wrap a Hugging Face causal LM (anything with .logits outputs and an
    output-embedding weight of shape (vocab, hidden))."""
    model.eval()
    head = model.get_output_embeddings().weight.detach()

    def forward_logits(input_ids: torch.Tensor) -> torch.Tensor:
        return model(input_ids=input_ids).logits

    return ModelHandle(
        name=name or getattr(model.config, "name_or_path", "") or "hf-model",
        forward_logits=forward_logits,
        head_weight=head,
    )


def load_hf_model(model_id: str) -> ModelHandle:
    from transformers import AutoModelForCausalLM

    model = AutoModelForCausalLM.from_pretrained(model_id)
    return handle_from_hf(model, name=model_id)


def batch_logits(handle: ModelHandle, sequences: Sequence[Sequence[int]],
                 pad_id: int = 0) -> list[torch.Tensor]:
    """One padded forward pass; returns per-sequence logit slices (f32).

    Right padding is safe without masks for causal models: positions before
    a sequence's end never attend to the padding after it.
    """
    max_len = max(len(seq) for seq in sequences)
    batch = torch.full((len(sequences), max_len), pad_id, dtype=torch.int64)
    for row, seq in enumerate(sequences):
        batch[row, :len(seq)] = torch.as_tensor(seq, dtype=torch.int64)
    try:
        with torch.inference_mode():
            logits = handle.forward_logits(batch)
    except RuntimeError as exc:  # pragma: no cover - only reachable on GPU hosts
        if "out of memory" in str(exc).lower():
            raise RuntimeError(
                f"forward pass ran out of memory at batch size {len(sequences)}; "
                f"reduce the batch size") from exc
        raise
    if logits.requires_grad or logits.grad_fn is not None:
        raise ForwardOnlyViolation(
            "forward pass constructed a gradient graph; extraction must be "
            "inference-only")
    logits = logits.to(torch.float32)
    return [logits[row, :len(seq)] for row, seq in enumerate(sequences)]


def upstream_signals(logits: torch.Tensor, prompt_len: int,
                     supervised_ids: Sequence[int],
                     head_weight: torch.Tensor) -> np.ndarray:
    """Signals for every supervised token, shape (len(supervised_ids), hidden).

    The distribution predicting supervised token j sits at sequence
    position prompt_len + j - 1, which is why a non-empty prompt is
    required: the first supervised token needs a preceding position.
    """
    if prompt_len < 1:
        raise ValueError("a non-empty prompt is required to predict the first "
                         "supervised token")
    if logits.requires_grad or logits.grad_fn is not None:
        raise ForwardOnlyViolation("logits carry a gradient graph")
    count = len(supervised_ids)
    rows = logits[prompt_len - 1: prompt_len - 1 + count]
    probs = torch.softmax(rows.to(torch.float32), dim=-1)
    residual = probs.clone()
    targets = torch.as_tensor(list(supervised_ids), dtype=torch.int64)
    residual[torch.arange(count), targets] -= 1.0
    head = head_weight.to(torch.float32)
    return (residual @ head).cpu().numpy().astype(np.float32)


def kahan_mean(rows: np.ndarray) -> np.ndarray:
    """Compensated float32 mean along axis 0."""
    if rows.shape[0] == 0:
        raise ValueError("mean of an empty segment is undefined")
    rows = rows.astype(np.float32)
    total = np.zeros(rows.shape[1], dtype=np.float32)
    compensation = np.zeros(rows.shape[1], dtype=np.float32)
    for row in rows:
        adjusted = row - compensation
        new_total = total + adjusted
        compensation = (new_total - total) - adjusted
        total = new_total
    return (total / np.float32(rows.shape[0])).astype(np.float32)


def segment_means(signals: np.ndarray,
                  spans: Sequence[tuple[int, int]]) -> list[np.ndarray]:
    """Per-span compensated means over the supervised-token signals."""
    return [kahan_mean(signals[start:end]) for start, end in spans]
