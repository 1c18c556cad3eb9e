import argparse
import subprocess
import sys

import pytest

from eigenseg import cli
from eigenseg.data_io import read_pgm, read_ppm
from eigenseg.errors import ConfigError
from eigenseg.neuralef import TrainConfig


def run(capsys, *argv):
    code = cli.run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, dict(line.split("=", 1) for line in out.splitlines() if "=" in line), err


TINY_TRAIN = ["--K", 8, "--k", 32, "--alpha", 0.1, "--epochs", 60, "--batch-images", 2, "--lr", 3e-3]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Eight synthetic scenes, a trained model and the exact oracle labels."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.run(["synth", "--out", str(root / "data"), "--n", "8", "--seed", "0"]) == 0
    feats = str(root / "data" / "features.nefb")
    assert cli.run(["train", "--features", feats, "--out", str(root / "m.nefm"),
                    "--log", str(root / "train.log"), *map(str, TINY_TRAIN)]) == 0
    assert cli.run(["oracle", "--features", feats, "--K", "8", "--k", "32", "--alpha", "0.1",
                    "--eigvecs", "4", "--n-clusters", "4", "--report", str(root / "oracle.txt"),
                    "--out-masks", str(root / "oracle_grid"), "--patch-grid"]) == 0
    return root


def test_synth_layout(workspace):
    data = workspace / "data"
    assert len(list((data / "images").glob("*.ppm"))) == 8
    assert len(list((data / "masks").glob("*.pgm"))) == 8
    assert read_ppm(data / "images" / "img_0000.ppm").shape == (64, 64, 3)
    assert read_pgm(data / "masks" / "img_0007.pgm").max() <= 3


def test_train_log_and_report(workspace):
    log = (workspace / "train.log").read_text().splitlines()
    assert log[0].startswith("# eigenvalue convention")
    assert sum(line.startswith("step=") for line in log) == 4 * 60
    report = (workspace / "oracle.txt").read_text()
    assert "n=512" in report and "eigenvalue_0=" in report and "cluster_sizes=" in report


def test_infer_then_eval_prints_metrics(workspace, capsys):
    code, _, _ = run(capsys, "infer", "--model", workspace / "m.nefm", "--features",
                     workspace / "data" / "features.nefb", "--out-masks", workspace / "pred", "--colorize")
    assert code == 0
    assert read_pgm(workspace / "pred" / "img_0000.pgm").shape == (64, 64)
    assert read_ppm(workspace / "pred" / "img_0000.ppm").shape == (64, 64, 3)
    code, metrics, _ = run(capsys, "eval", "--pred", workspace / "pred", "--gt", workspace / "data" / "masks")
    assert code == 0
    assert set(metrics) == {"Acc", "mIoU"}
    assert 0 <= float(metrics["Acc"]) <= 1 and 0 <= float(metrics["mIoU"]) <= 1


def test_eval_against_oracle(workspace, capsys):
    code, _, _ = run(capsys, "infer", "--model", workspace / "m.nefm", "--features",
                     workspace / "data" / "features.nefb", "--out-masks", workspace / "pred_grid", "--patch-grid")
    assert code == 0
    grid = workspace / "oracle_grid"
    code, metrics, _ = run(capsys, "eval", "--pred", workspace / "pred_grid", "--gt", grid,
                           "--against", grid, "--match", "vote")
    assert code == 0
    assert float(metrics["ARI"]) >= 0.95


def test_eval_model_matches_pred_dir(workspace, capsys):
    gt = workspace / "data" / "masks"
    run(capsys, "infer", "--model", workspace / "m.nefm", "--features", workspace / "data" / "features.nefb",
        "--out-masks", workspace / "pred2")
    _, a, _ = run(capsys, "eval", "--pred", workspace / "pred2", "--gt", gt)
    _, b, _ = run(capsys, "eval", "--model", workspace / "m.nefm", "--features",
                  workspace / "data" / "features.nefb", "--gt", gt)
    assert a == b


def test_eval_count_mismatch_exit_2(workspace, tmp_path, capsys):
    few = tmp_path / "few"
    few.mkdir()
    (few / "img_0000.pgm").write_bytes((workspace / "data" / "masks" / "img_0000.pgm").read_bytes())
    code, _, err = run(capsys, "eval", "--pred", few, "--gt", workspace / "data" / "masks")
    assert code == 2 and "1 predicted masks vs 8" in err


def test_kmeans_and_eigmap(workspace, capsys):
    feats = workspace / "data" / "features.nefb"
    code, metrics, _ = run(capsys, "kmeans", "--features", feats, "--k", 4, "--out", workspace / "km")
    assert code == 0 and int(metrics["images"]) == 8
    code, _, _ = run(capsys, "kmeans", "--features", feats, "--prehead", "--model", workspace / "m.nefm",
                     "--k", 4, "--out", workspace / "km_pre", "--patch-grid")
    assert code == 0 and read_pgm(workspace / "km_pre" / "img_0000.pgm").shape == (8, 8)
    code, metrics, _ = run(capsys, "eigmap", "--model", workspace / "m.nefm", "--features", feats,
                           "--dims", "0..2", "--out", workspace / "maps")
    assert code == 0 and metrics["dims"] == "3"
    heat = read_pgm(workspace / "maps" / "img_0003_dim002.pgm")
    assert heat.shape == (64, 64) and heat.max() == 255 and heat.min() == 0


def test_seeded_commands_reproducible(workspace, capsys):
    feats = workspace / "data" / "features.nefb"
    for out in ("r1", "r2"):
        assert cli.run(["train", "--features", str(feats), "--out", str(workspace / f"{out}.nefm"),
                        "--epochs", "2", "--K", "4", "--skip-eigenvalues"]) == 0
        assert cli.run(["synth", "--out", str(workspace / out), "--n", "2", "--seed", "5"]) == 0
    capsys.readouterr()
    assert (workspace / "r1.nefm").read_bytes() == (workspace / "r2.nefm").read_bytes()
    assert (workspace / "r1" / "features.nefb").read_bytes() == (workspace / "r2" / "features.nefb").read_bytes()


@pytest.mark.slow
def test_defaults_pipeline(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", "--out", tmp_path / "d")
    assert code == 0
    code, metrics, _ = run(capsys, "train", "--features", tmp_path / "d" / "features.nefb", "--out", tmp_path / "m.nefm")
    assert code == 0 and metrics["steps"] == "80"
    assert float(metrics["constraint_dev"]) <= 1e-5
    run(capsys, "infer", "--model", tmp_path / "m.nefm", "--features", tmp_path / "d" / "features.nefb",
        "--out-masks", tmp_path / "pred")
    out = cli.run(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "d" / "masks")])
    lines = capsys.readouterr().out.splitlines()
    assert out == 0
    assert [line.split("=")[0] for line in lines] == ["Acc", "mIoU"]
    assert all(len(line.split("=")[1].split(".")[1]) == 6 for line in lines)


@pytest.mark.parametrize("argv, code", [
    (["train"], 1),
    (["bogus"], 1),
    (["train", "--features", "missing.nefb", "--out", "m.nefm"], 2),
    (["train", "--features", "x.nefb", "--out", "m.nefm", "--beta", "-1"], 1),
    (["eigmap", "--model", "missing.nefm", "--features", "f.nefb", "--out", "o"], 2),
    ([], 1),
])
def test_exit_codes(argv, code, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert cli.run(argv) == code
    assert capsys.readouterr().err


def test_numeric_failure_exit_3(workspace, monkeypatch, capsys):
    from eigenseg import oracle

    monkeypatch.setattr(oracle, "MAX_SWEEPS", 0)
    code, _, err = run(capsys, "oracle", "--features", workspace / "data" / "features.nefb", "--K", 4, "--k", 16)
    assert code == 3 and "numeric failure" in err


def test_thread_setting(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("NEF_THREADS", "lots")
    assert cli.run(["synth", "--out", str(tmp_path / "a"), "--n", "1"]) == 1
    monkeypatch.setenv("NEF_THREADS", "1")
    assert cli.run(["synth", "--out", str(tmp_path / "b"), "--n", "1"]) == 0


def test_help_lists_every_flag_with_default(capsys):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    assert set(sub.choices) == {"synth", "train", "infer", "eval", "oracle", "kmeans", "eigmap"}
    for name, sp in sub.choices.items():
        text = " ".join(sp.format_help().split())
        for action in sp._actions:
            if action.dest == "help":
                continue
            assert action.option_strings[0] in text, (name, action.dest)
            if not action.required:
                assert "(default:" in " ".join(sp.formatter_class(name)._expand_help(action).split()), \
                    (name, action.dest)


def test_help_defaults_equal_config_defaults(capsys):
    assert cli.run(["train", "--help"]) == 0
    text = " ".join(capsys.readouterr().out.split())
    cfg = TrainConfig()
    for flag, value in [("--K", cfg.K), ("--alpha", cfg.alpha), ("--k", cfg.k), ("--k-pixel", cfg.k_pixel),
                        ("--epochs", cfg.epochs), ("--lr", cfg.lr), ("--batch-images", cfg.batch_images)]:
        assert f"(default: {value})" in text, flag


def test_parse_dims():
    assert cli.parse_dims("0..3", 8) == [0, 1, 2, 3]
    assert cli.parse_dims("5", 8) == [5]
    assert cli.parse_dims("1,4,2", 8) == [1, 4, 2]
    with pytest.raises(ConfigError):
        cli.parse_dims("0..8", 8)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "eigenseg", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip().endswith("0.1.0")
