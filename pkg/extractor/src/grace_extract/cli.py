"""Command line for signal extraction from a causal LM checkpoint."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .extract import extract, read_jsonl
from .recipe import DEFAULT_ANSWER_PATTERN, DEFAULT_STEP_PATTERN, ExtractionRecipe
from .signals import load_hf_model


class HfTokenizer:
    def __init__(self, model_id: str):
        from transformers import AutoTokenizer

        self._tok = AutoTokenizer.from_pretrained(model_id)

    def encode(self, text: str) -> list[int]:
        return self._tok.encode(text, add_special_tokens=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grace-extract",
        description="Dump per-step upstream-signal proxies from one forward "
                    "pass of a causal LM.")
    parser.add_argument("--model", required=True,
                        help="model identifier or local checkpoint path")
    parser.add_argument("--checkpoint-id", required=True,
                        help="tag recorded for this dump")
    parser.add_argument("--data", required=True,
                        help="JSONL dataset: {sample_id, prompt, trace} rows")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--delimiter", default=DEFAULT_STEP_PATTERN,
                        help="step-delimiter regex (delimiter mode)")
    parser.add_argument("--answer-delimiter", default=DEFAULT_ANSWER_PATTERN,
                        help="answer-marker regex (delimiter mode)")
    parser.add_argument("--spans", default=None,
                        help="JSONL with pre-tokenized span annotations; "
                             "replaces delimiter segmentation")
    parser.add_argument("--dump-token-level", action="store_true",
                        help="also store per-token vectors for exact recomputation")
    parser.add_argument("--batch-size", type=int, default=4)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("GRACE_LOG", "WARNING").upper(),
                      logging.WARNING))
    args = build_parser().parse_args(argv)
    recipe = ExtractionRecipe(
        model_id=args.model,
        checkpoint_id=args.checkpoint_id,
        out_dir=Path(args.out),
        step_pattern=args.delimiter,
        answer_pattern=args.answer_delimiter,
        spans_path=Path(args.spans) if args.spans else None,
        batch_size=args.batch_size,
        dump_token_level=args.dump_token_level,
    )
    try:
        rows = read_jsonl(Path(args.data))
        handle = load_hf_model(args.model)
        tokenizer = None if recipe.spans_path is not None else HfTokenizer(args.model)
        summary = extract(recipe, rows, handle, tokenizer)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary.to_mapping(), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
