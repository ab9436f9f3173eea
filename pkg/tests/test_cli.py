import json
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from attnfer.attention import AttentionConfig
from attnfer.cli import main, parse_params_table, resolve_config, within_expectation
from attnfer.data import FER_CLASSES, DatasetBatch, synthetic_dataset, write_fer2013_csv
from attnfer.models import ModelSpec, build_model, count_params

TOY = Path(__file__).resolve().parents[1] / "configs" / "toy_se.cfg"
FAST = ["--set", "input=1x16x16", "--set", "synthetic_per_class=3"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


class TestParams:
    def test_resnet50_expectation(self, capsys):
        code, out, err = run(capsys, "params", "--family", "resnet", "--depth", "50", "--attention", "none", "--expect", "23.49", "--tol", "1")
        assert code == 0 and "OK" in err
        row = parse_params_table(out)[0]
        assert row["family"] == "resnet" and row["depth"] == "50" and row["attention"] == "none"
        assert within_expectation(row["params"], 23.49, 1)
        assert row["params_m"] == f"{row['params'] / 1e6:.2f}"

    def test_vgg_cbam_is_baseline_plus_block(self, capsys):
        _, base, _ = run(capsys, "params", "--family", "vgg", "--depth", "16", "--input", "3x32x32", "--fc", "16,16")
        _, cbam, _ = run(
            capsys, "params", "--family", "vgg", "--depth", "16", "--attention", "cbam", "--r", "16",
            "--integration", "m2", "--input", "3x32x32", "--fc", "16,16",
        )
        delta = parse_params_table(cbam)[0]["params"] - parse_params_table(base)[0]["params"]
        assert delta == 512 * 32 * 2 + 32 + 512 + 2 * 49 + 1

    def test_mismatch_exit_3(self, capsys):
        code, _, err = run(capsys, "params", "--family", "resnet", "--expect", "30M", "--tol", "1")
        assert code == 3 and "MISMATCH" in err

    @pytest.mark.parametrize(
        "argv",
        [
            ["--depth", "17"],
            ["--family", "resnet", "--depth", "18"],
            ["--attention", "se", "--r", "3", "--input", "3x32x32"],
            ["--expect", "abc"],
            ["--input", "3x32"],
        ],
    )
    def test_usage_errors_exit_2(self, capsys, argv):
        code, out, _ = run(capsys, "params", *argv)
        assert code == 2 and out == ""

    def test_bad_choice_exit_2(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["params", "--family", "alexnet"])
        assert info.value.code == 2


class TestEcaTable:
    def test_adaptive(self, capsys):
        code, out, _ = run(capsys, "eca-table", "64", "128", "256", "512", "1024", "2048")
        assert code == 0
        assert [ln.split("\t")[1] for ln in out.splitlines()[1:]] == ["3", "5", "5", "5", "5", "7"]

    def test_fixed(self, capsys):
        _, out, _ = run(capsys, "eca-table", "4", "64", "4096", "--fixed-k", "3")
        assert [ln.split("\t")[1] for ln in out.splitlines()[1:]] == ["3", "3", "3"]

    def test_gamma_override(self, capsys):
        _, out, _ = run(capsys, "eca-table", "64", "--gamma", "1", "--b", "0")
        assert out.splitlines()[1] == "64\t7"

    def test_zero_channels(self, capsys):
        code, out, _ = run(capsys, "eca-table", "64", "0")
        assert code == 2 and out == ""


class TestGradcheck:
    def test_layers_deterministic(self, capsys):
        args = ("gradcheck", "layers", "--seed", "7", "--seeds", "1", "--max-coords", "20")
        first = run(capsys, *args)
        assert first[0] == 0 and first == run(capsys, *args)
        assert first[1].rstrip().endswith("layers: 16/16 passed")

    def test_attention_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "attention", "--seeds", "1")
        assert code == 0 and "worst\t" in out

    def test_fault_exit_1(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "attention", "--seeds", "1", "--max-coords", "20", "--inject-fault", "1.01")
        assert code == 1 and "attention: 0/7 passed" in out


class TestTrain:
    def test_deterministic_checkpoints(self, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            code, out, _ = run(capsys, "train", "--config", str(TOY), "--epochs", "3", "--out", str(tmp_path / name), *FAST)
            assert code == 0
            outs.append(out)
        assert outs[0] == outs[1]
        for rel in ("run0/model.ckpt", "run0/log.tsv", "summary.json"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_repeats_summary(self, tmp_path, capsys):
        code, out, _ = run(capsys, "train", "--config", str(TOY), "--epochs", "2", "--repeats", "3", "--out", str(tmp_path), *FAST)
        assert code == 0
        summary = json.loads(out)
        assert list(summary) == sorted(summary) and summary["runs"] == 3
        assert summary["acc"] == max(summary["per_run"])
        assert re.fullmatch(r'\{"acc": \d\.\d{6}, "per_run": \[(\d\.\d{6}(, )?){3}\], "runs": 3\}\n', out)
        ckpts = [(tmp_path / f"run{i}" / "model.ckpt").read_bytes() for i in range(3)]
        assert len(set(ckpts)) == 3

    def test_resolved_config_logged(self, tmp_path, capsys):
        run(capsys, "train", "--config", str(TOY), "--epochs", "1", "--out", str(tmp_path), *FAST)
        text = (tmp_path / "config.txt").read_text()
        assert "attention = se\n" in text and "epochs = 1\n" in text and "input = 1x16x16\n" in text

    def test_log_format(self, tmp_path, capsys):
        run(capsys, "train", "--config", str(TOY), "--epochs", "2", "--out", str(tmp_path), *FAST)
        lines = (tmp_path / "run0" / "log.tsv").read_text().splitlines()
        assert lines[0] == "epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc"
        assert len(lines) == 3 and all(len(ln.split("\t")) == 5 for ln in lines)

    def test_missing_dataset_exit_2(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--set", f"dataset={tmp_path / 'nope.csv'}", "--out", str(tmp_path))
        assert code == 2 and "does not exist" in err

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("family = vgg\nlearning_rate = 0.1\n")
        code, _, err = run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path))
        assert code == 2 and "learning_rate" in err

    def test_numeric_abort_exit_4(self, tmp_path, capsys):
        with pytest.warns(RuntimeWarning):
            code, _, err = run(capsys, "train", "--config", str(TOY), "--set", "lr=1e300", "--out", str(tmp_path), *FAST)
        assert code == 4 and re.search(r"epoch \d+, batch \d+", err)

    def test_fer_csv_and_eval(self, tmp_path, capsys):
        train = synthetic_dataset(7, 2, (48, 48), seed=0)
        test = synthetic_dataset(7, 1, (48, 48), seed=1)
        both = DatasetBatch(
            np.concatenate([train.images, test.images]), np.concatenate([train.labels, test.labels]), FER_CLASSES
        )
        csv_path = tmp_path / "fer.csv"
        write_fer2013_csv(both, csv_path, ["Training"] * 14 + ["PublicTest"] * 7)
        code, _, _ = run(
            capsys, "train", "--config", str(TOY), "--epochs", "2", "--out", str(tmp_path / "o"),
            "--set", f"dataset={csv_path}", "--set", "input=1x24x24",
        )
        assert code == 0
        code, out, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "o" / "run0" / "model.ckpt"), "--dataset", str(csv_path))
        assert code == 0
        header, row = out.splitlines()
        assert header == "loss\taccuracy\tper_class_accuracy" and len(row.split("\t")[2].split(",")) == 7

    def test_plot(self, tmp_path, capsys):
        code, _, _ = run(capsys, "train", "--config", str(TOY), "--epochs", "2", "--plot", "--out", str(tmp_path), *FAST)
        png = tmp_path / "run0" / "curves.png"
        assert code == 0 and png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        code, out, _ = run(capsys, "plot", str(tmp_path / "run0" / "log.tsv"), "-o", str(tmp_path / "both.png"))
        assert code == 0 and (tmp_path / "both.png").stat().st_size > 0


def test_resolve_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("lr = 0.5\nattention = eca\n")
    cfg = resolve_config(cfg_file, ["lr=0.25"])
    assert cfg["lr"] == "0.25" and cfg["attention"] == "eca" and cfg["momentum"] == "0.9"
    assert cfg["mlp_activation"] == cfg["activation"] == "elu"
    assert resolve_config(None, ["activation=relu"])["mlp_activation"] == "relu"


def test_params_matches_library():
    spec = ModelSpec(family="resnetv2", depth=50, attention=AttentionConfig("eca"))
    out = subprocess.run(
        [sys.executable, "-m", "attnfer", "params", "--family", "resnetv2", "--attention", "eca"],
        capture_output=True, text=True, check=True,
    ).stdout
    assert parse_params_table(out)[0]["params"] == count_params(build_model(spec))
