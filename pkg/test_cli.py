#!/usr/bin/env python3
"""
End-to-end tests for the animarl command line
"""

import json

import pandas as pd
import pytest

from chase_env import WorldConfig
from cli import EXIT_ESTIMATION, EXIT_MISMATCH, EXIT_OK, EXIT_USAGE, MANIFEST_NAME, main
from data_io import read_dataset, read_splits
from locomotion_id import read_parameter_report


@pytest.fixture
def world_file(tmp_path):
    return str(WorldConfig(time_limit=2.0).to_config_file(tmp_path / "world.env"))


@pytest.fixture
def demo_file(tmp_path, world_file):
    path = tmp_path / "data" / "demos.jsonl"
    assert main(["generate", "--n", "8", "--config", world_file, "--seed", "1", "--out", str(path), "--quiet"]) == EXIT_OK
    return path


class TestGenerate:

    def test_zero_episodes_gives_header_only(self, tmp_path):
        out = tmp_path / "empty.jsonl"
        assert main(["generate", "--n", "0", "--out", str(out), "--quiet"]) == EXIT_OK
        assert len(out.read_text().splitlines()) == 1

    def test_reruns_are_byte_identical(self, tmp_path, world_file):
        paths = []
        for name in ("a", "b"):
            out = tmp_path / name / "demos.jsonl"
            main(["generate", "--n", "4", "--config", world_file, "--seed", "3", "--out", str(out), "--quiet"])
            paths.append(out)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_single_condition(self, tmp_path, world_file):
        out = tmp_path / "c2.jsonl"
        main(["generate", "--n", "3", "--condition", "2", "--config", world_file, "--out", str(out), "--quiet"])
        assert {ep.condition for ep in read_dataset(out)} == {1}

    def test_split_file_and_manifest(self, tmp_path, world_file):
        out = tmp_path / "run" / "demos.jsonl"
        code = main([
            "generate", "--n", "10", "--config", world_file, "--out", str(out),
            "--split-counts", "6,2,2", "--quiet"
        ])
        assert code == EXIT_OK
        spec = read_splits(out.with_suffix(".splits.json"))
        assert len(spec.stages["online"].test) == 2
        manifest = json.loads((out.parent / MANIFEST_NAME).read_text())
        assert manifest["subcommand"] == "generate"
        assert str(out) in manifest["outputs"]

    def test_bad_condition_is_a_usage_error(self, tmp_path):
        assert main(["generate", "--condition", "3", "--out", str(tmp_path / "x.jsonl")]) == EXIT_USAGE


class TestEstimate:

    def test_report_with_ground_truth(self, tmp_path):
        data = tmp_path / "demos.jsonl"
        main(["generate", "--n", "20", "--out", str(data), "--quiet"])
        out = tmp_path / "reports" / "locomotion.env"
        assert main(["estimate", "--data", str(data), "--out", str(out), "--quiet"]) == EXIT_OK
        report = read_parameter_report(out)
        assert set(report) >= {"chaser", "evader"}

    def test_impossible_threshold(self, tmp_path):
        data = tmp_path / "demos.jsonl"
        main(["generate", "--n", "20", "--out", str(data), "--quiet"])
        code = main(["estimate", "--data", str(data), "--th-acc", "1e9", "--out", str(tmp_path / "r.env"), "--quiet"])
        assert code == EXIT_ESTIMATION

    def test_missing_dataset(self, tmp_path):
        assert main(["estimate", "--data", str(tmp_path / "nope.jsonl"), "--quiet"]) == EXIT_USAGE


class TestTrainAndEvaluate:

    def test_bc_never_steps_the_environment(self, tmp_path, world_file, demo_file):
        out = tmp_path / "bc"
        code = main([
            "train", "--method", "bc", "--data", str(demo_file), "--config", world_file,
            "--epochs", "2", "--out", str(out), "--quiet"
        ])
        assert code == EXIT_OK
        log = pd.read_csv(out / "training_log.csv")
        assert set(log["phase"]) == {"offline"}
        assert (log["step"] == 0).all()
        assert (out / MANIFEST_NAME).exists()
        assert sorted(p.name for p in out.glob("agent*.pt")) == ["agent0.pt", "agent1.pt"]

    def test_unknown_method(self, tmp_path, demo_file):
        assert main(["train", "--method", "ppo", "--data", str(demo_file), "--out", str(tmp_path / "m")]) == EXIT_USAGE

    def test_gt_self_evaluation(self, tmp_path, world_file, demo_file):
        out = tmp_path / "eval"
        code = main([
            "evaluate", "--gt-data", str(demo_file), "--config", world_file,
            "--n-rep", "200", "--kde-rep", "50", "--out", str(out), "--quiet"
        ])
        assert code == EXIT_OK
        table = pd.read_csv(out / "bootstrap.csv", comment="#")
        dtw = table[table["statistic"].str.startswith("dtw_to_gt")]
        assert len(dtw) == 2
        assert (dtw["median"] == 0.0).all()

    def test_trained_checkpoint_evaluation_and_tampering(self, tmp_path, world_file, demo_file):
        model = tmp_path / "dqdil"
        assert main([
            "train", "--method", "dqdil", "--data", str(demo_file), "--config", world_file,
            "--epochs", "1", "--steps", "40", "--out", str(model), "--quiet"
        ]) == EXIT_OK

        out = tmp_path / "eval"
        code = main([
            "evaluate", "--gt-data", str(demo_file), "--checkpoint", str(model), "--flip", "1:2",
            "--episodes", "3", "--n-rep", "100", "--kde-rep", "50", "--out", str(out), "--quiet"
        ])
        assert code == EXIT_OK
        table = pd.read_csv(out / "bootstrap.csv", comment="#")
        assert table["statistic"].str.startswith("counterfactual_shift:1->2").any()

        checkpoint = model / "agent0.pt"
        checkpoint.write_bytes(checkpoint.read_bytes() + b"\0")
        code = main([
            "evaluate", "--gt-data", str(demo_file), "--checkpoint", str(model),
            "--episodes", "2", "--n-rep", "50", "--out", str(tmp_path / "eval2"), "--quiet"
        ])
        assert code == EXIT_MISMATCH

    def test_methods_are_compared_with_the_baseline_on_paired_seeds(self, tmp_path, world_file, demo_file):
        checkpoints = []
        for method, extra in (("bc", []), ("dqdil", ["--steps", "30"])):
            out = tmp_path / method
            assert main([
                "train", "--method", method, "--data", str(demo_file), "--config", world_file,
                "--epochs", "1", *extra, "--out", str(out), "--quiet"
            ]) == EXIT_OK
            checkpoints += ["--checkpoint", str(out)]

        out = tmp_path / "eval"
        code = main([
            "evaluate", "--gt-data", str(demo_file), *checkpoints,
            "--episodes", "3", "--n-rep", "100", "--kde-rep", "50", "--out", str(out), "--quiet"
        ])
        assert code == EXIT_OK
        table = pd.read_csv(out / "bootstrap.csv", comment="#")
        assert {"paired:dtw_to_gt:bc-dqdil", "paired:abs_gt_gap:bc-dqdil"} <= set(table["statistic"])

    def test_unknown_baseline_is_a_usage_error(self, tmp_path, world_file, demo_file):
        model = tmp_path / "bc"
        main([
            "train", "--method", "bc", "--data", str(demo_file), "--config", world_file,
            "--epochs", "1", "--out", str(model), "--quiet"
        ])
        code = main([
            "evaluate", "--gt-data", str(demo_file), "--checkpoint", str(model), "--baseline", "dqn",
            "--episodes", "2", "--n-rep", "50", "--out", str(tmp_path / "eval"), "--quiet"
        ])
        assert code == EXIT_USAGE
