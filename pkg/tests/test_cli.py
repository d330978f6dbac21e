import json

import pytest

from napgen.cli import main
from napgen.encoder import EncoderConfig
from napgen.napg import NapgConfig
from napgen.ar import ArConfig
from napgen.train import RunConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset_dir(workspace):
    spec = {
        "n_examples": 30,
        "step_dist": {"1": 0.6, "2": 0.4},
        "numbers_range": [4, 5],
        "seed": 2,
        "splits": [0.8, 0.2, 0.0],
    }
    spec_path = workspace / "genspec.json"
    spec_path.write_text(json.dumps(spec))
    out = workspace / "data"
    assert main(["gen-data", "--config", str(spec_path), "--out", str(out)]) == 0
    return out


def run_config_doc(dataset_dir, out_dir, model="napg") -> dict:
    config = RunConfig(
        model=model,
        dataset_dir=str(dataset_dir),
        out_dir=str(out_dir),
        epochs=1,
        batch_size=8,
        encoder=EncoderConfig(d_model=16, n_layers=1, n_heads=2, ffn_hidden=32),
        napg=NapgConfig(n_max_steps=4, head_hidden=16),
        ar=ArConfig(n_max_steps=4),
    )
    return config.to_dict()


@pytest.fixture(scope="module")
def napg_checkpoint(workspace, dataset_dir):
    run_dir = workspace / "napg_run"
    config_path = workspace / "napg_config.json"
    config_path.write_text(json.dumps(run_config_doc(dataset_dir, run_dir)))
    assert main(["train", "--config", str(config_path),
                 "--out", str(workspace / "napg_report.json")]) == 0
    return run_dir / "best.json"


@pytest.fixture(scope="module")
def ar_checkpoint(workspace, dataset_dir):
    run_dir = workspace / "ar_run"
    config_path = workspace / "ar_config.json"
    config_path.write_text(json.dumps(run_config_doc(dataset_dir, run_dir, model="ar")))
    assert main(["train", "--config", str(config_path)]) == 0
    return run_dir / "best.json"


class TestExec:
    def test_two_step_program(self, capsys):
        code = main(["exec", "subtract(19520,21579), divide(#0,21579)"])
        assert code == 0
        assert capsys.readouterr().out.strip() == "-0.09542"

    def test_comparison_renders_yes_no(self, capsys):
        assert main(["exec", "greater(1,2)"]) == 0
        assert capsys.readouterr().out.strip() == "no"
        assert main(["exec", "greater(5,2)"]) == 0
        assert capsys.readouterr().out.strip() == "yes"

    def test_parse_error_is_usage(self, capsys):
        assert main(["exec", "add(1,)"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_runtime_failure(self, capsys):
        assert main(["exec", "divide(1,0)"]) == 1
        assert "division by zero" in capsys.readouterr().err

    def test_constants_and_step_refs(self, capsys):
        assert main(["exec", "add(2,3), multiply(#0,const_100)"]) == 0
        assert capsys.readouterr().out.strip() == "500.0"


class TestGenData:
    def test_summary_and_files(self, dataset_dir, capsys):
        for name in ("train", "dev", "test"):
            assert (dataset_dir / f"{name}.jsonl").exists()
        lines = (dataset_dir / "train.jsonl").read_text().splitlines()
        assert len(lines) == 24

    def test_summary_shape(self, workspace, capsys):
        out = workspace / "data2"
        assert main(["gen-data", "--out", str(out), "--seed", "5"]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["seed"] == 5
        assert set(summary["splits"]) == {"train", "dev", "test"}
        train = summary["splits"]["train"]
        assert train["n_examples"] == 800
        assert set(train["step_histogram"]) <= {"0", "1", "2", "3", ">3"}

    def test_seed_flag_beats_config(self, workspace, capsys):
        spec_path = workspace / "seeded.json"
        spec_path.write_text(json.dumps({"n_examples": 20, "seed": 3}))
        out = workspace / "data3"
        assert main(["gen-data", "--config", str(spec_path), "--out", str(out),
                     "--seed", "9"]) == 0
        assert json.loads(capsys.readouterr().out)["seed"] == 9

    def test_unknown_spec_key_is_usage_error(self, workspace, capsys):
        spec_path = workspace / "bad.json"
        spec_path.write_text(json.dumps({"n_example": 20}))
        assert main(["gen-data", "--config", str(spec_path)]) == 2
        assert "unknown spec keys" in capsys.readouterr().err

    def test_report_file_flag(self, workspace):
        out = workspace / "data4"
        report_path = workspace / "gen_report.json"
        assert main(["gen-data", "--out", str(out), "--seed", "1",
                     "--out-report", str(report_path)]) == 0
        assert json.loads(report_path.read_text())["seed"] == 1


class TestTrain:
    def test_report_written(self, napg_checkpoint, workspace):
        report = json.loads((workspace / "napg_report.json").read_text())
        assert report["model"] == "napg"
        assert report["best_epoch"] == 1
        assert "prog_acc" in report["best_dev"]
        assert napg_checkpoint.exists()

    def test_plots_rendered(self, workspace, dataset_dir):
        run_dir = workspace / "plot_run"
        config_path = workspace / "plot_config.json"
        config_path.write_text(json.dumps(run_config_doc(dataset_dir, run_dir)))
        plots = workspace / "train_plots"
        assert main(["train", "--config", str(config_path),
                     "--plots", str(plots)]) == 0
        assert (plots / "training_curves.png").stat().st_size > 0
        assert (plots / "training_curves.csv").read_text().startswith("epoch")

    def test_bad_config_is_usage_error(self, workspace, capsys):
        config_path = workspace / "broken_config.json"
        config_path.write_text(json.dumps({"model": "napg", "epoch": 1}))
        assert main(["train", "--config", str(config_path)]) == 2
        assert "unknown config keys" in capsys.readouterr().err

    def test_missing_config_file(self, workspace, capsys):
        assert main(["train", "--config", str(workspace / "nope.json")]) == 2


class TestEval:
    def test_oracle_scores_gold_perfectly(self, dataset_dir, capsys):
        assert main(["eval", "--dataset", str(dataset_dir / "dev.jsonl"),
                     "--oracle"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["em"] == 1.0
        assert report["prog_acc"] == 1.0

    def test_checkpoint_eval_with_records_and_plots(self, napg_checkpoint,
                                                    dataset_dir, workspace, capsys):
        plots = workspace / "eval_plots"
        assert main(["eval", "--checkpoint", str(napg_checkpoint),
                     "--dataset", str(dataset_dir / "dev.jsonl"),
                     "--records", "--plots", str(plots)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert len(report["examples"]) == 6
        assert {"id", "prediction", "gold_answer"} <= set(report["examples"][0])
        assert (plots / "eval_buckets.png").stat().st_size > 0
        assert (plots / "eval_buckets.csv").exists()

    def test_needs_checkpoint_or_oracle(self, dataset_dir, capsys):
        assert main(["eval", "--dataset", str(dataset_dir / "dev.jsonl")]) == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_missing_checkpoint_file(self, dataset_dir, capsys):
        assert main(["eval", "--checkpoint", "/nonexistent/best.json",
                     "--dataset", str(dataset_dir / "dev.jsonl")]) == 2


class TestBench:
    def test_compare_report_and_plots(self, napg_checkpoint, ar_checkpoint,
                                      dataset_dir, workspace, capsys):
        plots = workspace / "bench_plots"
        out_path = workspace / "bench.json"
        assert main(["bench", "--napg", str(napg_checkpoint),
                     "--ar", str(ar_checkpoint),
                     "--dataset", str(dataset_dir / "dev.jsonl"),
                     "--repeats", "1", "--warmup", "0",
                     "--out", str(out_path), "--plots", str(plots)]) == 0
        report = json.loads(out_path.read_text())
        assert report["speedup"] > 0
        assert report["napg"]["decoder"] == "napg"
        assert report["ar"]["decoder"] == "ar"
        lengths = [b["step_count"] for b in report["ar"]["per_length"]]
        assert lengths == sorted(lengths)
        assert (plots / "bench_times.png").stat().st_size > 0
        assert (plots / "bench_times.csv").exists()

    def test_checkpoint_kinds_enforced(self, napg_checkpoint, dataset_dir, capsys):
        assert main(["bench", "--napg", str(napg_checkpoint),
                     "--ar", str(napg_checkpoint),
                     "--dataset", str(dataset_dir / "dev.jsonl")]) == 2
        assert "checkpoints" in capsys.readouterr().err
