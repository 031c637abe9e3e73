import csv
import json

import pytest

from adaptive_depth import functional as F
from adaptive_depth.cli import main, read_config_file, resolve_config, UsageError

SMALL = ["--stage-blocks", "2,2,2,2", "--widths", "4,4,8,8", "--image-size", "12", "--synthetic-n", "80",
         "--synthetic-classes", "4", "--batch-size", "16"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    assert main(["train", "--epochs", "2", "--seed", "3", "--out-dir", str(out), *SMALL]) == 0
    return out / "train-0001"


# -- train --------------------------------------------------------------------------------
def test_train_smoke_default_model(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--model", "resnet_tiny", "--dataset", "synthetic", "--epochs", 1,
                       "--seed", 7, "--out-dir", tmp_path)
    assert code == 0
    run_dir = tmp_path / "train-0001"
    assert (run_dir / "model.adnw").stat().st_size > 0
    assert (run_dir / "train_log.csv").exists()
    assert "supernet top1" in out


def test_invalid_strategy_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--distill-strategy", "frobnicate"])
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_manifest_contents(trained_run):
    manifest = json.loads((trained_run / "manifest.json").read_text())
    assert manifest["seed"] == 3
    assert manifest["version"]
    assert manifest["config"]["epochs"] == 2
    assert manifest["model"]["arch"] == "resnet"
    assert len(manifest["norm_stats"]["mean"]) == 3


def test_reruns_use_fresh_directories_and_are_bit_identical(tmp_path, capsys):
    args = ["train", "--epochs", 1, "--seed", 5, "--out-dir", tmp_path, *SMALL]
    assert run(capsys, *args)[0] == 0
    assert run(capsys, *args)[0] == 0
    a, b = tmp_path / "train-0001", tmp_path / "train-0002"
    assert (a / "model.adnw").read_bytes() == (b / "model.adnw").read_bytes()
    assert (a / "manifest.json").read_text() == (b / "manifest.json").read_text()


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nepochs = 2\nlr = 0.2\nkl-temperature = 2.0\nratio=more_skippable\n")
    code, _, _ = run(capsys, "train", "--config", cfg, "--lr", 0.01, "--out-dir", tmp_path, *SMALL)
    assert code == 0
    echo = json.loads((tmp_path / "train-0001" / "manifest.json").read_text())["config"]
    assert echo["epochs"] == 2  # from the file
    assert echo["lr"] == 0.01  # CLI wins
    assert echo["kl_temperature"] == 2.0
    assert echo["ratio"] == "more_skippable"
    assert echo["batch_size"] == 16


def test_config_file_enum_is_validated(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("distill_strategy = frobnicate\n")
    with pytest.raises(SystemExit) as exc:
        main(["train", "--config", str(cfg)])
    assert exc.value.code == 2
    assert "frobnicate" in capsys.readouterr().err


def test_config_parser_errors(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("no equals sign\n")
    with pytest.raises(UsageError):
        read_config_file(cfg)
    assert resolve_config({}, None).epochs == 20
    with pytest.raises(UsageError):
        resolve_config({"epochs": 0}, None)


def test_missing_data_dir_fails_cleanly(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--dataset", "mnist", "--out-dir", tmp_path)
    assert code == 1
    assert "data-dir" in err


# -- eval -------------------------------------------------------------------------------------
def test_eval_single_config(trained_run, capsys):
    code, out, _ = run(capsys, "eval", trained_run, "--skip", "FFFF", "--out-dir", trained_run.parent)
    assert code == 0
    rows = [line for line in out.splitlines() if line[:4] in ("FFFF",)]
    assert len(rows) == 1


def test_eval_all_writes_sixteen_rows(trained_run, capsys):
    code, _, _ = run(capsys, "eval", trained_run, "--all", "--out-dir", trained_run.parent)
    assert code == 0
    csv_path = sorted(trained_run.parent.glob("eval-*/subnets.csv"))[-1]
    rows = list(csv.DictReader(csv_path.open()))
    assert len(rows) == 16
    assert {r["skip"] for r in rows} == {f"{a}{b}{c}{d}" for a in "TF" for b in "TF" for c in "TF" for d in "TF"}
    assert all(r["pareto"] in ("0", "1") for r in rows)
    flops = [int(r["flops"]) for r in rows]
    assert flops == sorted(flops)


def test_eval_skip_length_error(trained_run, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", str(trained_run), "--skip", "TTF", "--out-dir", str(trained_run.parent)])
    assert exc.value.code == 2
    assert "length" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "eval", tmp_path / "nope", "--skip", "FFFF")
    assert code == 1
    assert "not found" in err


# -- profile ----------------------------------------------------------------------------------
def test_profile_rows_and_summary(trained_run, capsys):
    code, out, _ = run(capsys, "profile", trained_run, "--out-dir", trained_run.parent)
    assert code == 0
    csv_path = sorted(trained_run.parent.glob("profile-*/profile.csv"))[-1]
    rows = list(csv.DictReader(csv_path.open()))
    assert len(rows) == 8
    summary = [line for line in out.splitlines() if line.startswith("mandatory_mean")]
    assert len(summary) == 1
    assert "skippable_mean" in summary[0] and "ratio" in summary[0]
    assert summary[0].endswith(("PASS", "FAIL"))


# -- ablate -----------------------------------------------------------------------------------
def test_ablate_rejects_unknown_grid(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--grid", "none"])
    assert exc.value.code == 2


def test_ablate_table3(tmp_path, capsys):
    code, _, _ = run(capsys, "ablate", "--grid", "table3", "--epochs", 1, "--out-dir", tmp_path, *SMALL)
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "ablate-0001" / "ablation.csv").open()))
    assert len(rows) == 4
    assert {(r["self_distillation"], r["skip_aware_norms"]) for r in rows} == {("0", "0"), ("0", "1"), ("1", "0"), ("1", "1")}
    assert all("acc_FFFF" in r and "acc_TTTT" in r for r in rows)


def test_ablate_table4(tmp_path, capsys):
    code, out, _ = run(capsys, "ablate", "--grid", "table4", "--epochs", 1, "--out-dir", tmp_path, *SMALL)
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "ablate-0001" / "ablation.csv").open()))
    assert [f"{r['teacher']}/{r['student']}" for r in rows] == ["FFFF/TTTT", "FFFF/Random", "Random/TTTT", "Random/Random"]
    assert set(rows[0]) >= {"acc_FFFF", "acc_TFFF", "acc_TTFF", "acc_TTTF", "acc_TTTT"}


# -- gradcheck --------------------------------------------------------------------------------
def test_gradcheck_passes_and_lists_each_op_once(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    names = [line.split()[0] for line in out.splitlines() if "max_rel_err" in line]
    assert len(names) == len(set(names)) >= 25
    assert "conv2d" in names and "composite" in names


def test_gradcheck_catches_a_wrong_conv_adjoint(monkeypatch, capsys):
    real = F._conv2d_backward

    def wrong(*args, **kwargs):
        dx, dw, db = real(*args, **kwargs)
        return (None if dx is None else dx * 1.1), dw, db

    monkeypatch.setattr(F, "_conv2d_backward", wrong)
    code, out, err = run(capsys, "gradcheck")
    assert code == 1
    assert "conv2d" in err
    assert "conv2d" in [line.split()[0] for line in out.splitlines() if line.endswith("FAIL")]
