"""Command-line entry point: score, select, validate, synth.

Exit codes: 0 on success, 2 on input or configuration errors, 3 when the
validation suite finds a failing check. ``GRACE_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import formats, oracle, synth, valuation
from .types import (
    HistoryScheme,
    ScoringConfig,
    SignalFormatError,
    TraceDataError,
)

log = logging.getLogger("gracekit")

EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_VALIDATION_FAILURE = 3

_TARGET_FLAG_TO_MODE = {"answer": "answer", "full": "full_trace", "suffix": "suffix"}
_ZERO_FLAG_TO_POLICY = {"error": "error", "zero": "score_zero"}


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one scoring run needs: file locations, the scoring
    configuration, matching strictness, and the parallelism degree."""

    samples_path: Path
    signal_paths: tuple[tuple[str, Path], ...]  # (checkpoint id, file)
    out_dir: Path
    scoring: ScoringConfig
    strict: bool = True
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if not self.signal_paths:
            raise ValueError("at least one signal dump required")


def configure_logging() -> None:
    level = os.environ.get("GRACE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# score


def run_score(config: PipelineConfig) -> Path:
    """Score all samples at every checkpoint and write scores.jsonl."""
    samples = formats.read_samples(config.samples_path)
    signals_by_checkpoint = {}
    for checkpoint_id, path in config.signal_paths:
        records = formats.read_signals(path, checkpoint_id=checkpoint_id)
        kept = []
        for record, sample in _with_matching_sample(records, samples):
            if record.token_level is not None and sample is not None:
                try:
                    formats.verify_token_consistency(record, sample)
                except SignalFormatError:
                    if config.strict:
                        raise
                    log.warning("%s: token-level mean consistency failed; skipping",
                                record.sample_id)
                    continue
            kept.append(record)
        signals_by_checkpoint[checkpoint_id] = kept
    reports, table = valuation.score_dataset(
        samples, signals_by_checkpoint, config.scoring,
        strict=config.strict, jobs=config.jobs)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    out_path = config.out_dir / "scores.jsonl"
    header = formats.scores_header(
        config.scoring.to_mapping(), config.scoring.config_hash(),
        n_samples=table.n_samples, strict=config.strict)
    formats.write_scores(out_path, header, reports, table.combined,
                         table.per_checkpoint)
    return out_path


def _with_matching_sample(records, samples):
    by_id = {s.sample_id: s for s in samples}
    for record in records:
        yield record, by_id.get(record.sample_id)


def _scoring_config_from_args(args: argparse.Namespace) -> ScoringConfig:
    if getattr(args, "config_json", None):
        raw = args.config_json
        text = Path(raw).read_text() if Path(raw).exists() else raw
        return ScoringConfig.from_mapping(json.loads(text))
    checkpoints = tuple(tag for tag, _ in _parse_signal_args(args.signals))
    return ScoringConfig(
        alpha=args.alpha,
        history=HistoryScheme.parse(args.history),
        target_mode=_TARGET_FLAG_TO_MODE[args.target],
        checkpoints=checkpoints,
        zero_vector_policy=_ZERO_FLAG_TO_POLICY[args.zero_vector],
        ablation=args.ablation,
    )


def _parse_signal_args(raw: Sequence[str]) -> list[tuple[str, Path]]:
    out: list[tuple[str, Path]] = []
    for item in raw:
        tag, sep, path = item.partition("=")
        if sep:
            out.append((tag, Path(path)))
        else:
            out.append((Path(item).stem, Path(item)))
    if len({tag for tag, _ in out}) != len(out):
        raise ValueError(f"duplicate checkpoint tags in {raw}")
    return out


def _cmd_score(args: argparse.Namespace) -> int:
    scoring = _scoring_config_from_args(args)
    signal_paths = _parse_signal_args(args.signals)
    if tuple(tag for tag, _ in signal_paths) != scoring.checkpoints:
        raise ValueError(
            f"signal tags {[t for t, _ in signal_paths]} do not match "
            f"configured checkpoints {list(scoring.checkpoints)}")
    config = PipelineConfig(
        samples_path=Path(args.samples),
        signal_paths=tuple(signal_paths),
        out_dir=Path(args.out),
        scoring=scoring,
        strict=args.strict,
        jobs=args.jobs,
    )
    out_path = run_score(config)
    print(out_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# select


def run_select(scores_path: Path, rho: float, out_dir: Path,
               method: str = "grace", samples_path: Path | None = None,
               seed: int = 0) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "selection.jsonl"
    if method == "grace":
        header, _reports, combined = formats.read_scores(scores_path)
        result = valuation.select_top(combined, rho)
        formats.write_selection(out_path, result,
                                source_config_hash=header["config_hash"])
        return out_path
    if samples_path is None:
        raise ValueError(f"baseline {method!r} needs --samples")
    samples = formats.read_samples(samples_path)
    if method == "random":
        result = valuation.baseline_random(samples, rho, seed)
    elif method == "longest":
        result = valuation.baseline_longest(samples, rho)
    elif method == "stepmax":
        result = valuation.baseline_stepmax(samples, rho)
    else:
        raise ValueError(f"unknown selection method {method!r}")
    formats.write_selection(out_path, result, source_config_hash=None)
    return out_path


def _cmd_select(args: argparse.Namespace) -> int:
    if args.method == "grace" and not args.scores:
        raise ValueError("method grace needs --scores")
    out_path = run_select(
        scores_path=Path(args.scores) if args.scores else None,
        rho=args.rho,
        out_dir=Path(args.out),
        method=args.method,
        samples_path=Path(args.samples) if args.samples else None,
        seed=args.seed,
    )
    print(out_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate


def _cmd_validate(args: argparse.Namespace) -> int:
    report = oracle.run_validation(seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "validate_report.json"
    report_path.write_text(
        json.dumps(report.to_mapping(), sort_keys=True, indent=2) + "\n")
    oracle.write_fidelity_csv(report.fidelity, out_dir / "fidelity.csv")
    if not args.no_figures:
        from . import figures
        figures.save_fidelity_figure(report.fidelity, out_dir / "fidelity.png")
    for check in report.checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"{status} {check.name}")
    print(report_path)
    if not report.all_passed:
        failing = [c.name for c in report.checks if not c.passed]
        log.error("validation failed: %s", ", ".join(failing))
        return EXIT_VALIDATION_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = synth.SynthSpec(
        num_samples=args.n,
        aligned_fraction=args.aligned_frac,
        alignment_strength=args.strength,
        noise_scale=args.noise,
        hidden_dim=args.dim,
        min_steps=args.min_steps,
        max_steps=args.max_steps,
        seed=args.seed,
    )
    scoring = ScoringConfig(
        alpha=args.alpha,
        history=HistoryScheme.parse(args.history),
        target_mode=_TARGET_FLAG_TO_MODE[args.target],
        checkpoints=("synth",),
        zero_vector_policy=_ZERO_FLAG_TO_POLICY[args.zero_vector],
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = range(args.seeds)
    wrote = []
    if args.experiment in ("separation", "all"):
        strengths = [float(s) for s in args.strengths.split(",")]
        reports = synth.separation_sweep(spec, strengths, seeds, scoring, args.rho)
        csv_path = out_dir / "separation.csv"
        synth.write_separation_csv(reports, strengths, csv_path)
        wrote.append(csv_path)
        if not args.no_figures:
            from . import figures
            fig_path = out_dir / "separation.png"
            figures.save_separation_figure(reports, strengths, fig_path)
            wrote.append(fig_path)
    if args.experiment in ("downstream", "all"):
        task = synth.ToyTask(train_steps=args.train_steps)
        report = synth.downstream_experiment(spec, task, seeds=list(seeds),
                                             rho=args.rho, config=scoring)
        csv_path = out_dir / "downstream.csv"
        synth.write_downstream_csv(report, csv_path)
        summary_path = out_dir / "downstream_summary.csv"
        synth.write_downstream_summary_csv(report, summary_path)
        wrote.extend([csv_path, summary_path])
        if not args.no_figures:
            from . import figures
            fig_path = out_dir / "downstream.png"
            figures.save_downstream_figure(report, fig_path)
            wrote.append(fig_path)
    for path in wrote:
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_scoring_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--alpha", type=float, default=0.7,
                        help="weight of answer alignment vs history alignment")
    parser.add_argument("--history", default="uniform",
                        help="history weighting: uniform, window:W, or ema:BETA")
    parser.add_argument("--target", choices=sorted(_TARGET_FLAG_TO_MODE),
                        default="answer", help="target segment for step alignment")
    parser.add_argument("--zero-vector", dest="zero_vector",
                        choices=sorted(_ZERO_FLAG_TO_POLICY), default="zero",
                        help="how to score a zero-norm direction")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grace",
        description="Step-level reasoning-data curation by gradient-proxy alignment.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_score = sub.add_parser("score", help="score samples against signal dumps")
    p_score.add_argument("--samples", required=True, help="samples JSONL file")
    p_score.add_argument("--signals", action="append", required=True,
                         metavar="[TAG=]PATH",
                         help="signal dump per checkpoint; repeatable")
    p_score.add_argument("--out", required=True, help="output directory")
    _add_scoring_flags(p_score)
    p_score.add_argument("--ablation", choices=("none", "answer_only", "history_only"),
                         default="none", help="scoring ablation variant")
    p_score.add_argument("--config-json", dest="config_json", default=None,
                         help="scoring config as JSON text or file; overrides flags")
    strictness = p_score.add_mutually_exclusive_group()
    strictness.add_argument("--strict", dest="strict", action="store_true",
                            default=True, help="error on unmatched ids (default)")
    strictness.add_argument("--lenient", dest="strict", action="store_false",
                            help="warn and skip unmatched ids")
    p_score.add_argument("--jobs", type=int, default=1,
                         help="parallel scoring threads; output bytes are identical")
    p_score.set_defaults(func=_cmd_score)

    p_select = sub.add_parser("select", help="rank values and keep the top slice")
    p_select.add_argument("--scores", default=None, help="scores JSONL from `grace score`")
    p_select.add_argument("--rho", type=float, required=True,
                          help="selection ratio in (0, 1)")
    p_select.add_argument("--out", required=True, help="output directory")
    p_select.add_argument("--method", choices=("grace", "random", "longest", "stepmax"),
                          default="grace")
    p_select.add_argument("--samples", default=None,
                          help="samples JSONL (required for baseline methods)")
    p_select.add_argument("--seed", type=int, default=0,
                          help="PRNG seed for the random baseline")
    p_select.add_argument("--tie-break", choices=("by_id_ascending",),
                          default="by_id_ascending")
    p_select.set_defaults(func=_cmd_select)

    p_validate = sub.add_parser("validate", help="run the exact-gradient check suite")
    p_validate.add_argument("--out", default="validate_out", help="report directory")
    p_validate.add_argument("--seed", type=int, default=20260801)
    p_validate.add_argument("--no-figures", action="store_true")
    p_validate.set_defaults(func=_cmd_validate)

    p_synth = sub.add_parser("synth", help="run synthetic planted-data experiments")
    p_synth.add_argument("--out", required=True, help="report directory")
    p_synth.add_argument("--experiment", choices=("separation", "downstream", "all"),
                         default="all")
    p_synth.add_argument("--n", type=int, default=500, help="samples per dataset")
    p_synth.add_argument("--aligned-frac", dest="aligned_frac", type=float, default=0.3)
    p_synth.add_argument("--strength", type=float, default=0.8,
                         help="planted alignment strength")
    p_synth.add_argument("--strengths", default="0.0,0.4,0.8,1.0",
                         help="comma list swept by the separation experiment")
    p_synth.add_argument("--noise", type=float, default=0.5)
    p_synth.add_argument("--dim", type=int, default=16)
    p_synth.add_argument("--min-steps", dest="min_steps", type=int, default=4)
    p_synth.add_argument("--max-steps", dest="max_steps", type=int, default=10)
    p_synth.add_argument("--rho", type=float, default=0.2)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--seeds", type=int, default=10,
                         help="number of repetitions per setting")
    p_synth.add_argument("--train-steps", dest="train_steps", type=int, default=300)
    p_synth.add_argument("--no-figures", action="store_true")
    _add_scoring_flags(p_synth)
    p_synth.set_defaults(func=_cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TraceDataError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
