from __future__ import annotations

import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

import gracekit.oracle
from gracekit import cli, formats
from gracekit.cli import EXIT_INPUT_ERROR, EXIT_OK, EXIT_VALIDATION_FAILURE, main

GOLDEN_SCORE_ARGS = [
    "score",
    "--alpha", "0.7",
    "--history", "uniform",
    "--target", "answer",
    "--zero-vector", "error",
]


def golden_inputs(golden_dir: Path) -> list[str]:
    return [
        "--samples", str(golden_dir / "samples.jsonl"),
        "--signals", f"ck_a={golden_dir / 'ck_a.gsig'}",
        "--signals", f"ck_b={golden_dir / 'ck_b.gsig'}",
    ]


class TestScoreCommand:
    def test_matches_golden_bytes(self, tmp_path, golden_dir):
        out = tmp_path / "run"
        code = main(GOLDEN_SCORE_ARGS + golden_inputs(golden_dir) + ["--out", str(out)])
        assert code == EXIT_OK
        expected = (golden_dir / "expected_scores.jsonl").read_bytes()
        assert (out / "scores.jsonl").read_bytes() == expected

    @pytest.mark.parametrize("jobs", ["1", "2", "4"])
    def test_jobs_do_not_change_bytes(self, tmp_path, golden_dir, jobs):
        out = tmp_path / f"run{jobs}"
        code = main(GOLDEN_SCORE_ARGS + golden_inputs(golden_dir)
                    + ["--out", str(out), "--jobs", jobs])
        assert code == EXIT_OK
        expected = (golden_dir / "expected_scores.jsonl").read_bytes()
        assert (out / "scores.jsonl").read_bytes() == expected

    def test_rerun_from_header_config_reproduces_output(self, tmp_path, golden_dir):
        first = tmp_path / "first"
        main(GOLDEN_SCORE_ARGS + golden_inputs(golden_dir) + ["--out", str(first)])
        header = json.loads((first / "scores.jsonl").read_text().splitlines()[0])
        config_path = tmp_path / "echoed.json"
        config_path.write_text(json.dumps(header["config"]))
        second = tmp_path / "second"
        code = main(["score", *golden_inputs(golden_dir),
                     "--out", str(second), "--config-json", str(config_path)])
        assert code == EXIT_OK
        assert (first / "scores.jsonl").read_bytes() == (second / "scores.jsonl").read_bytes()

    def test_missing_sample_file_is_input_error(self, tmp_path, golden_dir):
        code = main(GOLDEN_SCORE_ARGS + [
            "--samples", str(tmp_path / "nope.jsonl"),
            "--signals", f"ck_a={golden_dir / 'ck_a.gsig'}",
            "--out", str(tmp_path)])
        assert code == EXIT_INPUT_ERROR

    def test_strict_mismatch_is_input_error_lenient_warns(self, tmp_path, golden_dir):
        samples = formats.read_samples(golden_dir / "samples.jsonl")
        trimmed = tmp_path / "trimmed.jsonl"
        formats.write_samples(samples[:-1], trimmed)
        base = ["--samples", str(trimmed),
                "--signals", f"ck_a={golden_dir / 'ck_a.gsig'}",
                "--signals", f"ck_b={golden_dir / 'ck_b.gsig'}"]
        strict_out = tmp_path / "strict"
        assert main(GOLDEN_SCORE_ARGS + base + ["--out", str(strict_out)]) \
            == EXIT_INPUT_ERROR
        lenient_out = tmp_path / "lenient"
        assert main(GOLDEN_SCORE_ARGS + base
                    + ["--out", str(lenient_out), "--lenient"]) == EXIT_OK
        _, _, combined = formats.read_scores(lenient_out / "scores.jsonl")
        assert len(combined) == len(samples) - 1

    def test_mismatched_signal_tags_is_input_error(self, tmp_path, golden_dir):
        config = {"alpha": 0.7, "history": "uniform", "target_mode": "answer",
                  "checkpoints": ["other"], "zero_vector_policy": "error",
                  "ablation": "none"}
        code = main(["score", *golden_inputs(golden_dir),
                     "--out", str(tmp_path), "--config-json", json.dumps(config)])
        assert code == EXIT_INPUT_ERROR


class TestSelectCommand:
    def test_matches_golden_bytes(self, tmp_path, golden_dir):
        out = tmp_path / "sel"
        code = main(["select", "--scores", str(golden_dir / "expected_scores.jsonl"),
                     "--rho", "0.5", "--out", str(out)])
        assert code == EXIT_OK
        expected = (golden_dir / "expected_selection.jsonl").read_bytes()
        assert (out / "selection.jsonl").read_bytes() == expected

    def test_budget_rule_on_files(self, tmp_path, golden_dir):
        out = tmp_path / "sel"
        main(["select", "--scores", str(golden_dir / "expected_scores.jsonl"),
              "--rho", "0.34", "--out", str(out)])
        _, result = formats.read_selection(out / "selection.jsonl")
        assert result.budget == 2  # ceil(0.34 * 3)
        assert len(result.selected_ids) == 2

    def test_baselines_need_samples(self, tmp_path, golden_dir):
        assert main(["select", "--method", "random", "--rho", "0.5",
                     "--out", str(tmp_path)]) == EXIT_INPUT_ERROR
        out = tmp_path / "rand"
        code = main(["select", "--method", "random", "--rho", "0.5",
                     "--samples", str(golden_dir / "samples.jsonl"),
                     "--seed", "4", "--out", str(out)])
        assert code == EXIT_OK
        _, result = formats.read_selection(out / "selection.jsonl")
        assert len(result.selected_ids) == 2

    def test_baseline_determinism(self, tmp_path, golden_dir):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            main(["select", "--method", "random", "--rho", "0.5",
                  "--samples", str(golden_dir / "samples.jsonl"),
                  "--seed", "4", "--out", str(out)])
            outs.append((out / "selection.jsonl").read_bytes())
        assert outs[0] == outs[1]


class TestValidateCommand:
    def test_fresh_checkout_passes(self, tmp_path):
        out = tmp_path / "validate"
        code = main(["validate", "--out", str(out), "--no-figures"])
        assert code == EXIT_OK
        report = json.loads((out / "validate_report.json").read_text())
        assert report["all_passed"] is True
        assert (out / "fidelity.csv").exists()

    def test_report_parses_against_shipped_schema(self, tmp_path):
        out = tmp_path / "validate"
        main(["validate", "--out", str(out), "--no-figures"])
        report = json.loads((out / "validate_report.json").read_text())
        schema_path = Path(gracekit.oracle.__file__).parent / "schemas" \
            / "validate_report.schema.json"
        schema = json.loads(schema_path.read_text())
        jsonschema.validate(report, schema)

    def test_sign_flip_mutation_is_caught(self, tmp_path, monkeypatch):
        # the documented mutation harness: negate the upstream signal inside
        # the scoring engine and require the oracle suite to fail
        import gracekit.proxy as proxy_mod
        original = proxy_mod.upstream_signal

        def flipped(probs, target_id, projection, strict=True):
            return -original(probs, target_id, projection, strict)

        monkeypatch.setattr(proxy_mod, "upstream_signal", flipped)
        out = tmp_path / "mutated"
        code = main(["validate", "--out", str(out), "--no-figures"])
        assert code == EXIT_VALIDATION_FAILURE
        report = json.loads((out / "validate_report.json").read_text())
        failing = {c["name"] for c in report["checks"] if not c["passed"]}
        assert "rep_gradient_finite_difference" in failing

    def test_figures_rendered_alongside_reports(self, tmp_path):
        out = tmp_path / "validate"
        code = main(["validate", "--out", str(out)])
        assert code == EXIT_OK
        assert (out / "fidelity.png").stat().st_size > 0


class TestSynthCommand:
    def test_reports_and_figures_written(self, tmp_path):
        out = tmp_path / "synth"
        code = main(["synth", "--out", str(out), "--n", "60", "--seeds", "3",
                     "--strengths", "0.0,1.0", "--train-steps", "40"])
        assert code == EXIT_OK
        for name in ("separation.csv", "downstream.csv", "downstream_summary.csv",
                     "separation.png", "downstream.png"):
            assert (out / name).exists(), name

    def test_separation_only_without_figures(self, tmp_path):
        out = tmp_path / "synth"
        code = main(["synth", "--out", str(out), "--experiment", "separation",
                     "--n", "40", "--seeds", "2", "--strengths", "0.5",
                     "--no-figures"])
        assert code == EXIT_OK
        assert (out / "separation.csv").exists()
        assert not (out / "separation.png").exists()
        assert not (out / "downstream.csv").exists()

    def test_invalid_spec_is_input_error(self, tmp_path):
        code = main(["synth", "--out", str(tmp_path), "--n", "10",
                     "--aligned-frac", "0.01"])
        assert code == EXIT_INPUT_ERROR
