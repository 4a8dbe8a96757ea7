"""
命令行测试: train / eval / sample / plot-density / check 与退出码
"""

import json
import os

import numpy as np
import pandas as pd
import pytest

from voronoi_flows import cli
from voronoi_flows.errors import DivergedLoss
from voronoi_flows.models.optimizer import EpochRecord, TrainingReport

COMMON = """
data.num_samples = 300
network.hidden_layers = 1
network.hidden_units = 8
network.cond_embed_dim = 2
optimizer.epochs = 2
optimizer.batch_size = 64
optimizer.seed = 7
output.eval_samples = 2
"""

CONFIGS = {
    "flow": "task = flow\ndata.generator = eight_gaussians\ndensity.num_blocks = 2\n",
    "mixture": "task = mixture\ndata.generator = two_gaussians\nmixture.num_components = 2\n"
               "mixture.comp_flow_blocks = 1\n",
    "dequant": "task = dequant\ndata.generator = two_values\ndequant.embed_dim = 1\n"
               "dequant.num_blocks = 1\ndensity.num_blocks = 1\n",
}


def _config(tmp_path, task, extra=""):
    path = tmp_path / f"{task}.cfg"
    path.write_text(CONFIGS[task] + COMMON + extra, encoding="utf-8")
    return str(path)


def _train(tmp_path, task, name="run"):
    out = tmp_path / name
    assert cli.main(["train", "--config", _config(tmp_path, task), "--out", str(out)]) == cli.EXIT_OK
    return out


@pytest.mark.parametrize("task", sorted(CONFIGS))
def test_train_writes_artifacts(task, tmp_path):
    out = _train(tmp_path, task)
    for name in (cli.CHECKPOINT_NAME, cli.METRICS_NAME, cli.SUMMARY_NAME, "train_loss.png"):
        assert (out / name).exists(), name
    assert not (out / cli.LOCK_NAME).exists()
    summary = json.loads((out / cli.SUMMARY_NAME).read_text(encoding="utf-8"))
    assert summary["task"] == task
    assert summary["epochs_run"] == 2
    assert summary["config"]["optimizer.seed"] == 7
    metrics = pd.read_csv(out / cli.METRICS_NAME)
    assert list(metrics.columns) == ["epoch", "train_nll", "val_nll", "wall_seconds"]
    assert summary["best_val_nll"] == pytest.approx(metrics["val_nll"].min())


def test_dequant_summary_reports_oracles(tmp_path):
    out = _train(tmp_path, "dequant")
    summary = json.loads((out / cli.SUMMARY_NAME).read_text(encoding="utf-8"))
    assert summary["oracles"]["entropy"] == pytest.approx(0.3251, abs=1e-4)
    assert "marginal_histogram_nll" in summary["oracles"]


def test_training_is_deterministic(tmp_path):
    first = _train(tmp_path, "flow", "a")
    second = _train(tmp_path, "flow", "b")
    a = json.loads((first / cli.SUMMARY_NAME).read_text(encoding="utf-8"))
    b = json.loads((second / cli.SUMMARY_NAME).read_text(encoding="utf-8"))
    assert a["best_val_nll"] == b["best_val_nll"]
    assert a["test_nll"] == b["test_nll"]
    np.testing.assert_array_equal(pd.read_csv(first / cli.METRICS_NAME)["val_nll"],
                                  pd.read_csv(second / cli.METRICS_NAME)["val_nll"])


def test_eval_sample_and_plot(tmp_path):
    out = _train(tmp_path, "mixture")
    checkpoint = str(out / cli.CHECKPOINT_NAME)

    assert cli.main(["eval", "--checkpoint", checkpoint, "--split", "val", "--samples", "3", "--seed", "1"]) == 0
    report = json.loads((out / cli.EVAL_REPORT_NAME).read_text(encoding="utf-8"))
    assert report["n"] == 30
    assert report["S"] == 3 and report["seed"] == 1
    assert set(report) == {"mean_nll", "stderr", "n", "S", "seed"}

    assert cli.main(["sample", "--checkpoint", checkpoint, "--samples", "50", "--seed", "2"]) == 0
    samples = pd.read_csv(out / cli.SAMPLES_NAME)
    assert samples.shape == (50, 2)
    assert list(samples.columns) == ["x0", "x1"]

    plots = tmp_path / "plots"
    assert cli.main(["plot-density", "--checkpoint", checkpoint, "--grid", "20",
                     "--bounds", "-4", "4", "-3", "3", "--out", str(plots)]) == 0
    grid = pd.read_csv(plots / cli.GRID_NAME, header=None)
    assert grid.shape == (20, 20)
    assert np.all(grid.to_numpy() >= 0)
    boundaries = pd.read_csv(plots / cli.BOUNDARIES_NAME)
    assert list(boundaries.columns) == ["x0", "y0", "x1", "y1"]
    assert len(boundaries) > 0
    assert (plots / cli.SVG_NAME).read_text(encoding="utf-8").lstrip().startswith("<?xml")


def test_eval_external_csv(tmp_path):
    out = _train(tmp_path, "dequant")
    data = tmp_path / "values.csv"
    data.write_text("y\nv0\nv1\nv0\n", encoding="utf-8")
    assert cli.main(["eval", "--checkpoint", str(out / cli.CHECKPOINT_NAME), "--data", str(data)]) == 0
    report = json.loads((out / cli.EVAL_REPORT_NAME).read_text(encoding="utf-8"))
    assert report["n"] == 3
    unknown = tmp_path / "unknown.csv"
    unknown.write_text("y\nv9\n", encoding="utf-8")
    assert cli.main(["eval", "--checkpoint", str(out / cli.CHECKPOINT_NAME),
                     "--data", str(unknown)]) == cli.EXIT_INVALID


def test_plot_requires_two_dimensions(tmp_path):
    out = _train(tmp_path, "dequant")
    code = cli.main(["plot-density", "--checkpoint", str(out / cli.CHECKPOINT_NAME)])
    assert code == cli.EXIT_INVALID
    assert not (out / cli.GRID_NAME).exists()


def test_bounds_accept_negative_values():
    args = cli.build_parser().parse_args(["plot-density", "--checkpoint", "c.json",
                                          "--bounds", "-4", "4", "-3.5", "-1"])
    assert args.bounds == (-4.0, 4.0, -3.5, -1.0)
    assert cli.build_parser().parse_args(["plot-density", "--checkpoint", "c.json"]).bounds is None
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["plot-density", "--checkpoint", "c.json", "--bounds", "0", "1", "2"])


def test_locked_output_directory(tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / cli.LOCK_NAME).write_text("123", encoding="utf-8")
    code = cli.main(["train", "--config", _config(tmp_path, "flow"), "--out", str(out)])
    assert code == cli.EXIT_INVALID
    assert not (out / cli.CHECKPOINT_NAME).exists()
    assert (out / cli.LOCK_NAME).exists()


def test_invalid_inputs_exit_with_two(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("optimizer.epochs = -1\n", encoding="utf-8")
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_INVALID
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_INVALID
    broken = tmp_path / "broken.json"
    broken.write_text("{}", encoding="utf-8")
    assert cli.main(["eval", "--checkpoint", str(broken)]) == cli.EXIT_INVALID
    assert cli.main(["sample", "--checkpoint", str(broken), "--samples", "0"]) == cli.EXIT_INVALID
    with pytest.raises(SystemExit):
        cli.main(["plot-density", "--checkpoint", str(broken), "--bounds", "1", "0", "0", "1"])


def test_divergence_exits_with_three(tmp_path, mocker):
    report = TrainingReport(history=[EpochRecord(1, 2.0, 2.5, 0.1)], best_epoch=1, best_val_nll=2.5)
    mocker.patch("voronoi_flows.pipeline.train_models", side_effect=DivergedLoss("nan", report=report))
    out = tmp_path / "diverged"
    code = cli.main(["train", "--config", _config(tmp_path, "flow"), "--out", str(out)])
    assert code == cli.EXIT_DIVERGED
    assert (out / cli.CHECKPOINT_NAME).exists()
    assert len(pd.read_csv(out / cli.METRICS_NAME)) == 1
    assert not (out / cli.LOCK_NAME).exists()


class _FakeSuite:
    def __init__(self, seed=0):
        self.seed = seed

    def run(self):
        return []

    @property
    def all_passed(self):
        return self.seed == 0

    def report(self):
        return "report"


def test_check_exit_codes(monkeypatch):
    monkeypatch.setattr(cli, "InvariantSuite", _FakeSuite)
    assert cli.main(["check"]) == cli.EXIT_OK
    assert cli.main(["check", "--seed", "3"]) == cli.EXIT_CHECKS_FAILED


def test_thread_limit_applied(tmp_path, monkeypatch):
    monkeypatch.setenv("VF_THREADS", "1")
    _train(tmp_path, "flow")
    monkeypatch.setenv("VF_THREADS", "many")
    assert cli.main(["check"]) == cli.EXIT_INVALID


def test_default_output_dir_from_config(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    config = _config(tmp_path, "flow", extra="output.dir = outputs/from_config\n")
    assert cli.main(["train", "--config", config]) == cli.EXIT_OK
    assert os.path.exists(os.path.join("outputs", "from_config", cli.CHECKPOINT_NAME))
