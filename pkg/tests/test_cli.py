import csv
import io

import pytest

from deop.cli import main
from deop.metrics import EvalReport
from deop.synthdata import read_pnm


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    common = ["--data", str(root / "data"), "--out", str(root / "run")]
    assert main(["gen-data", "--n-train", "4", "--n-val", "3", "--data", str(root / "data")]) == 0
    assert main(["pretrain-encoder", "--pretrain_steps", "2"] + common) == 0
    assert main(["train-proposals", "--prop_steps", "2"] + common) == 0
    return root, common


def test_fresh_dataset_eval_reports_missing_checkpoint(tmp_path, capsys):
    d = str(tmp_path / "d")
    assert main(["gen-data", "--spec", "default", "--n-train", "2", "--n-val", "1", "--out", d]) == 0
    assert (tmp_path / "d" / "manifest.txt").exists()
    capsys.readouterr()
    assert main(["eval", "--data", d, "--out", str(tmp_path / "r")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: checkpoint-missing: ")


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["eval", "--no-such-key", "1"]) == 2
    assert main(["eval", "--steps"]) == 2
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_bad_config_value_is_one_error_line(tmp_path, capsys):
    assert main(["eval", "--mode", "everything", "--data", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: config: ")
    assert main(["eval", "--config", str(tmp_path / "none.cfg")]) == 1
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith("error: missing-file: ")


def test_config_subcommand_prints_reference(capsys):
    assert main(["config"]) == 0
    out = capsys.readouterr().out
    assert "pretrain_steps = " in out and "score_mode = softmax" in out


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck", "--target", "classify,cal"]) == 0
    out = capsys.readouterr().out
    assert "classify max_rel_err=" in out and out.strip().splitlines()[-1].startswith("all max_rel_err=")
    assert main(["gradcheck", "--target", "nothing"]) == 1


@pytest.mark.parametrize("mode", ["baseline+", "deop"])
def test_train_eval_dump(run_dir, mode, capsys):
    root, common = run_dir
    common = common + ["--mode", mode]
    assert main(["train-deop", "--steps", "2", "--batch", "1", "--log_every", "0"] + common) == 0
    assert main(["eval", "--dump", str(root / f"dump-{mode}")] + common) == 0
    out = capsys.readouterr().out
    assert "mIoU_seen=" in out and "hIoU=" in out
    name = "eval-" + mode.replace("+", "plus") + ".txt"
    rec = EvalReport.read_records(root / "run" / name)
    assert 0.0 <= rec["hIoU"] <= 1.0
    assert any((root / f"dump-{mode}").iterdir())
    assert main(["dump-heatmaps", "--index", "1", "--file", str(root / f"h-{mode}.pgm")] + common) == 0
    assert read_pnm(root / f"h-{mode}.pgm").ndim == 2
    assert main(["dump-heatmaps", "--index", "99"] + common) == 1


def test_bench_writes_three_rows(run_dir, capsys):
    root, common = run_dir
    capsys.readouterr()
    assert main(["bench", "--images", "2", "--warmup", "1"] + common) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["n_prime"] for r in rows] == ["1", "5", "20"]
    assert (root / "run" / "bench.csv").exists() and (root / "run" / "bench.txt").exists()
    assert float(rows[2]["ratio_flops"]) >= 10


def test_fingerprint_mismatch_is_reported(run_dir, capsys):
    root, common = run_dir
    capsys.readouterr()
    assert main(["eval", "--embed_dim", "16", "--mode", "deop"] + common) == 1
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith("error: fingerprint-mismatch: ")
