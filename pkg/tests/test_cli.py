"""CLI surface driven in process through main(): the full command chain
on a small dataset plus the exit-code contract."""

import json

import pytest

from vfseg.cli import main


@pytest.fixture(scope="module")
def run_dirs(tmp_path_factory):
    """gen-data then a short training run, shared by the commands below."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    out = root / "run"
    rc = main(["gen-data", "--n", "16", "--size", "64", "--seed", "0",
               "--out", str(data)])
    assert rc == 0
    rc = main(["train", "--data", str(data), "--out", str(out),
               "--preset", "tiny", "--batch-size", "8", "--epochs", "2",
               "--seed", "1"])
    assert rc == 0
    return {"root": root, "data": data, "out": out}


def test_gen_data_writes_dataset(run_dirs):
    data = run_dirs["data"]
    assert (data / "images" / "0.png").exists()
    assert (data / "labels" / "15.png").exists()
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["count"] == 16


def test_train_outputs(run_dirs, capsys):
    out = run_dirs["out"]
    assert (out / "bottom.ckpt").exists()
    assert (out / "top.ckpt").exists()
    assert (out / "metrics.jsonl").exists()
    assert (out / "metrics.csv").exists()
    assert (out / "metrics.svg").exists()


def test_eval_reports_metrics(run_dirs, capsys):
    rc = main(["eval", "--data", str(run_dirs["data"]),
               "--out", str(run_dirs["out"]), "--preset", "tiny"])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "pixel_accuracy=" in printed and "iou=" in printed
    result = json.loads((run_dirs["out"] / "eval.json").read_text())
    assert result["samples"] == 16.0
    assert 0.0 <= result["pixel_accuracy"] <= 1.0


def test_infer_writes_masks_and_triptychs(run_dirs):
    pred = run_dirs["root"] / "pred"
    rc = main(["infer", "--checkpoint", str(run_dirs["out"]),
               "--images", str(run_dirs["data"] / "images"),
               "--labels", str(run_dirs["data"] / "labels"),
               "--out", str(pred), "--batch-size", "8"])
    assert rc == 0
    assert (pred / "0_mask.png").exists()
    assert (pred / "15_triptych.png").exists()
    assert len(list(pred.glob("*_mask.png"))) == 16


def test_bench_prints_table(run_dirs, capsys):
    bench_dir = run_dirs["root"] / "bench"
    rc = main(["bench", "--features", "100", "--steps", "1",
               "--batch-size", "2", "--out", str(bench_dir)])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "features,steps,payload_bytes_up" in printed
    assert (bench_dir / "bench.csv").exists()
    assert (bench_dir / "bench.svg").exists()


def test_gradcheck_layers_only(capsys):
    rc = main(["gradcheck", "--seeds", "0", "--layers-only"])
    assert rc == 0
    assert "0 failed" in capsys.readouterr().out


def test_configuration_error_exit_code(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"),
               "--preset", "tiny", "--batch-size", "0"])
    assert rc == 2
    assert "configuration error" in capsys.readouterr().err


def test_data_error_exit_code(tmp_path, capsys):
    # a valid config pointed at an empty data directory is a data error
    rc = main(["train", "--data", str(tmp_path / "nothing"),
               "--out", str(tmp_path / "o"), "--preset", "tiny",
               "--epochs", "1"])
    assert rc == 4


def test_infer_missing_checkpoint_exit_code(tmp_path, capsys):
    rc = main(["infer", "--checkpoint", str(tmp_path),
               "--images", str(tmp_path), "--out", str(tmp_path / "o")])
    assert rc == 4
    assert "checkpoint" in capsys.readouterr().err


def test_bad_flag_lists(tmp_path, capsys):
    assert main(["bench", "--features", "ten",
                 "--out", str(tmp_path / "b")]) == 2
    assert main(["gradcheck", "--seeds", ""]) == 2
    capsys.readouterr()


def test_eval_and_infer_load_adam_runs(run_dirs, capsys):
    # checkpoints carry their optimizer state namespace; eval/infer must
    # rebuild workers to match it instead of assuming the default
    out = run_dirs["root"] / "adam_run"
    rc = main(["train", "--data", str(run_dirs["data"]), "--out", str(out),
               "--preset", "tiny", "--batch-size", "8", "--epochs", "1",
               "--optimizer", "adam", "--lr", "0.001", "--seed", "3"])
    assert rc == 0
    rc = main(["eval", "--data", str(run_dirs["data"]), "--out", str(out),
               "--preset", "tiny"])
    assert rc == 0
    assert "pixel_accuracy=" in capsys.readouterr().out
    pred = run_dirs["root"] / "adam_pred"
    rc = main(["infer", "--checkpoint", str(out),
               "--images", str(run_dirs["data"] / "images"),
               "--out", str(pred), "--batch-size", "8"])
    assert rc == 0
    assert (pred / "0_mask.png").exists()
