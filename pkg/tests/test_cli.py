"""CLI stages wired end to end in a temporary run directory."""

import json
import pytest

from vitpq import cli
from vitpq.config import RunConfig

SMALL = RunConfig(train_per_class=8, eval_per_class=4, calib_size=6,
                  importance_samples=4, train_epochs=1)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg_path = out / "cfg.json"
    SMALL.save(cfg_path)
    return out, str(cfg_path)


def invoke(args):
    return cli.main(args)


class TestStages:
    def test_gen_data(self, run_dir, capsys):
        out, cfg = run_dir
        assert invoke(["gen-data", "--config", cfg, "--out", str(out)]) == 0
        assert (out / "data.train.manifest").exists()
        assert (out / "data.calib.blob").exists()
        assert (out / "data.eval.manifest").exists()
        assert "24 train / 6 calib / 12 eval" in capsys.readouterr().out

    def test_train_toy(self, run_dir):
        out, cfg = run_dir
        assert invoke(["train-toy", "--config", cfg, "--out", str(out)]) == 0
        assert (out / "model.fp.manifest").exists()

    def test_score_importance(self, run_dir):
        out, cfg = run_dir
        assert invoke(["score-importance", "--config", cfg, "--out", str(out)]) == 0
        text = (out / "importance.txt").read_text()
        assert text.startswith("# importance-table")

    def test_allocate_bits(self, run_dir):
        out, cfg = run_dir
        assert invoke(["allocate-bits", "--config", cfg, "--out", str(out)]) == 0
        assert "mode=greedy" in (out / "allocation.txt").read_text()

    def test_quantize_and_evaluate(self, run_dir, capsys):
        out, cfg = run_dir
        assert invoke(["quantize", "--config", cfg, "--out", str(out)]) == 0
        assert (out / "quant.json").exists()
        assert invoke(["evaluate", "--config", cfg, "--out", str(out), "--tag", "mp"]) == 0
        doc = json.loads((out / "eval.mp.json").read_text())
        assert 0.0 <= doc["top1"] <= 1.0
        capsys.readouterr()

    def test_calibrate_uses_uniform_base(self, run_dir):
        out, cfg = run_dir
        assert invoke(["calibrate", "--config", cfg, "--out", str(out)]) == 0
        doc = json.loads((out / "quant.json").read_text())
        assert doc["allocation"]["mode"] == "uniform"

    def test_report(self, run_dir, capsys):
        out, cfg = run_dir
        assert invoke(["report", "--config", cfg, "--out", str(out)]) == 0
        assert "mp" in capsys.readouterr().out


class TestFlagsAndErrors:
    def test_missing_input_is_single_line_error(self, tmp_path, capsys):
        code = invoke(["train-toy", "--out", str(tmp_path)])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error: ConfigError:")
        assert err.count("\n") == 1

    def test_bad_flag_value(self, tmp_path, capsys):
        code = invoke(["gen-data", "--out", str(tmp_path), "--percentile", "0"])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_quantize_refuses_foreign_allocation(self, run_dir, tmp_path, capsys):
        out, cfg = run_dir
        foreign = tmp_path / "alloc.txt"
        foreign.write_text("# bit-allocation v1 mode=uniform\nb9.qkv 4 4\n")
        code = invoke(["quantize", "--config", cfg, "--out", str(out),
                       "--allocation", str(foreign)])
        assert code == 1
        assert "b9.qkv" in capsys.readouterr().err

    def test_seed_and_bits_overrides(self, tmp_path, capsys):
        out = tmp_path / "r"
        assert invoke(["gen-data", "--out", str(out), "--seed", "5",
                       "--calib-size", "4"]) == 0
        saved = RunConfig.load(out / "config.json")
        assert saved.seed == 5 and saved.calib_size == 4
        capsys.readouterr()
