import csv
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from useg import segnet
from useg.cli import main


@pytest.fixture()
def runner():
    return CliRunner()


def make_config(tmp_path, **overrides):
    doc = {
        "seed": 13,
        "out_dir": str(tmp_path / "run"),
        "num_samples": 10,
        "phantom": {"size": 16, "num_organs": 3,
                    "organ_means": [0.35, 0.6, 0.85],
                    "radius_range": [1.8, 2.6]},
        "scenario": {"teacher_organs": 2, "new_organ": 3},
        "train": {"teacher_epochs": 3, "distill_epochs": 2,
                  "learning_rate": 1e-3, "ensemble_size": 2},
    }
    doc.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path, Path(doc["out_dir"])


def read_tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestGenerate:
    def test_writes_layout(self, runner, tmp_path):
        cfg_path, out = make_config(tmp_path)
        result = runner.invoke(main, ["generate", "--config", str(cfg_path)])
        assert result.exit_code == 0, result.output
        ds = out / "dataset"
        assert (ds / "manifest.json").exists()
        for sub in ("images", "labels_full", "labels_organ1", "labels_organ2",
                    "labels_organ3"):
            assert len(list((ds / sub).glob("*.pgm"))) == 10

    def test_idempotent_bytes(self, runner, tmp_path):
        cfg_path, out = make_config(tmp_path)
        assert runner.invoke(main, ["generate", "--config", str(cfg_path)]).exit_code == 0
        first = read_tree_bytes(out / "dataset")
        assert runner.invoke(main, ["generate", "--config", str(cfg_path)]).exit_code == 0
        assert read_tree_bytes(out / "dataset") == first

    def test_single_sample(self, runner, tmp_path):
        cfg_path, out = make_config(tmp_path, num_samples=5)
        assert runner.invoke(main, ["generate", "--config", str(cfg_path)]).exit_code == 0
        assert len(list((out / "dataset" / "images").glob("*.pgm"))) == 5

    def test_missing_field_names_it(self, runner, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"seed": 1, "out_dir": str(tmp_path / "x")}))
        result = runner.invoke(main, ["generate", "--config", str(path)])
        assert result.exit_code == 1
        assert "scenario" in result.output

    def test_unknown_field_names_it(self, runner, tmp_path):
        cfg_path, _ = make_config(tmp_path, bogus_field=1)
        result = runner.invoke(main, ["generate", "--config", str(cfg_path)])
        assert result.exit_code == 1
        assert "bogus_field" in result.output

    def test_lockfile_guard(self, runner, tmp_path):
        cfg_path, out = make_config(tmp_path)
        out.mkdir(parents=True)
        (out / ".lock").write_text("123")
        result = runner.invoke(main, ["generate", "--config", str(cfg_path)])
        assert result.exit_code == 1
        assert "lock" in result.output


@pytest.fixture()
def generated(runner, tmp_path):
    cfg_path, out = make_config(tmp_path)
    assert runner.invoke(main, ["generate", "--config", str(cfg_path)]).exit_code == 0
    return cfg_path, out


class TestTrainTeacher:
    def test_outputs_and_csv(self, runner, generated):
        cfg_path, out = generated
        result = runner.invoke(main, ["train-teacher", "--config", str(cfg_path)])
        assert result.exit_code == 0, result.output
        assert (out / "teacher.useg").exists()
        with open(out / "teacher_log.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 3
        assert {"epoch", "loss", "dice_organ1", "dice_organ2"} <= set(rows[0])
        assert "organ 1" in result.output

    def test_missing_dataset(self, runner, tmp_path):
        cfg_path, _ = make_config(tmp_path)
        result = runner.invoke(main, ["train-teacher", "--config", str(cfg_path)])
        assert result.exit_code == 1

    def test_corrupt_manifest(self, runner, generated):
        cfg_path, out = generated
        (out / "dataset" / "manifest.json").write_text("{broken")
        result = runner.invoke(main, ["train-teacher", "--config", str(cfg_path)])
        assert result.exit_code == 1

    def test_dataset_config_mismatch(self, runner, generated, tmp_path):
        cfg_path, out = generated
        (tmp_path / "sub").mkdir()
        other_path, _ = make_config(tmp_path / "sub",
                                    phantom={"size": 16, "num_organs": 3,
                                             "organ_means": [0.3, 0.5, 0.7],
                                             "radius_range": [1.8, 2.6]})
        result = runner.invoke(main, ["train-teacher", "--config", str(other_path),
                                      "--out", str(out)])
        assert result.exit_code == 1


@pytest.fixture()
def trained(runner, generated):
    cfg_path, out = generated
    assert runner.invoke(main, ["train-teacher", "--config", str(cfg_path)]).exit_code == 0
    return cfg_path, out


class TestDistill:
    def test_outputs(self, runner, trained):
        cfg_path, out = trained
        result = runner.invoke(main, ["distill", "--config", str(cfg_path)])
        assert result.exit_code == 0, result.output
        assert (out / "student.useg").exists()
        student = segnet.load(out / "student.useg")
        assert student.config.num_classes == 4
        report = json.loads((out / "eval_report.json").read_text())
        assert set(report["per_organ"]) == {"1", "2", "3"}
        with open(out / "distill_log.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2
        assert {"epoch", "loss_total", "loss_old", "loss_new", "mean_u"} <= set(rows[0])

    def test_uncertainty_off_flag(self, runner, trained):
        cfg_path, out = trained
        result = runner.invoke(main, ["distill", "--config", str(cfg_path),
                                      "--uncertainty", "off"])
        assert result.exit_code == 0, result.output
        with open(out / "distill_log.csv") as f:
            rows = list(csv.DictReader(f))
        assert all(float(r["mean_u"]) == 1.0 for r in rows)

    def test_wrong_teacher_rejected_before_training(self, runner, trained, tmp_path):
        cfg_path, out = trained
        wrong = segnet.init_random(segnet.SegModelConfig(num_classes=5), 0)
        wrong_path = tmp_path / "wrong.useg"
        segnet.save(wrong, wrong_path)
        result = runner.invoke(main, ["distill", "--config", str(cfg_path),
                                      "--teacher", str(wrong_path)])
        assert result.exit_code == 1
        assert "classes" in result.output
        assert not (out / "student.useg").exists()

    def test_determinism(self, runner, trained):
        cfg_path, out = trained
        assert runner.invoke(main, ["distill", "--config", str(cfg_path)]).exit_code == 0
        first = (out / "student.useg").read_bytes()
        first_report = (out / "eval_report.json").read_bytes()
        assert runner.invoke(main, ["distill", "--config", str(cfg_path)]).exit_code == 0
        assert (out / "student.useg").read_bytes() == first
        assert (out / "eval_report.json").read_bytes() == first_report


class TestAblate:
    def test_rows_and_schema(self, runner, trained):
        cfg_path, out = trained
        result = runner.invoke(main, ["ablate", "--config", str(cfg_path)])
        assert result.exit_code == 0, result.output
        with open(out / "ablation.csv") as f:
            rows = list(csv.DictReader(f))
        assert [r["variant"] for r in rows] == \
            ["as-paper", "normalized", "confidence", "off", "new-task-only"]
        schema = set(rows[0])
        assert all(set(r) == schema for r in rows)
        assert {"old_mean", "new_dice", "dice_organ1"} <= schema


class TestEvaluate:
    def test_report(self, runner, trained):
        cfg_path, out = trained
        result = runner.invoke(main, ["evaluate", "--config", str(cfg_path),
                                      "--weights", str(out / "teacher.useg")])
        assert result.exit_code == 0, result.output
        assert "mean:" in result.output


class TestGradcheck:
    def test_default_seed_passes(self, runner):
        result = runner.invoke(main, ["gradcheck", "--seed", "0"])
        assert result.exit_code == 0, result.output
        assert "passed" in result.output
        assert "layer" in result.output

    def test_flags_override(self, runner):
        result = runner.invoke(main, ["gradcheck", "--seed", "1",
                                      "--step", "1e-4", "--tol", "1e-3"])
        assert result.exit_code == 0, result.output

    def test_impossible_tolerance_fails(self, runner):
        result = runner.invoke(main, ["gradcheck", "--seed", "0", "--tol", "1e-18"])
        assert result.exit_code == 2
