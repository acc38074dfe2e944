import csv
import io
import json

import numpy as np
import pytest

from balm import config as cfgmod
from balm.cli import main
from balm.data import DatasetSpec, generate_synthetic, write_features
from balm.trainer import diagnostics_columns

TINY = {
    "train.missing_rates": [0.3, 0.5, 0.7],
    "train.epochs": 2,
    "data.n_train": 64, "data.n_val": 32, "data.n_test": 32,
    "data.dims": [4, 3, 5],
    "model.d_emb": 6, "model.d_h": 6, "model.hidden": 8,
}


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


def sections(text):
    return [list(csv.reader(block.splitlines())) for block in text.strip().split("\n\n")]


def write_config(path, **overrides):
    cfg = dict(TINY, **overrides)
    path.write_text(json.dumps(cfg))
    return path


class TestConfig:
    def test_defaults_filled(self):
        flat = cfgmod.resolve({"train.missing_rates": [0.1, 0.2, 0.3]})
        assert flat["grm.rho"] == 1.4 and flat["seeds"] == [0]

    def test_unknown_and_missing_keys_listed_together(self):
        with pytest.raises(cfgmod.ConfigError) as err:
            cfgmod.resolve({"train.lrr": 0.1, "grm.rho": "high"})
        msgs = err.value.problems
        assert "unknown key: train.lrr" in msgs
        assert "missing required key: train.missing_rates" in msgs
        assert any(m.startswith("grm.rho") for m in msgs)

    def test_value_errors_surface(self):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.resolve({"train.missing_rates": [0.1, 0.2, 0.3], "grm.rho": -1.0})

    def test_hash_ignores_seed_list_and_output(self, tmp_path):
        a = cfgmod.plan_runs(cfgmod.resolve(dict(TINY, seeds=[0, 1])))
        b = cfgmod.plan_runs(cfgmod.resolve(dict(TINY, seeds=[1], **{"output.dir": str(tmp_path)})))
        assert a[1].run_dir.name == b[0].run_dir.name
        assert a[0].run_dir.name.endswith("-seed0")

    def test_env_output_root(self, monkeypatch, tmp_path):
        monkeypatch.setenv(cfgmod.OUTPUT_ROOT_ENV, str(tmp_path))
        (plan,) = cfgmod.plan_runs(cfgmod.resolve(TINY))
        assert plan.run_dir.parent == tmp_path


class TestMaskStats:
    def test_equal_rates_zero_divergence(self):
        code, out = run("mask-stats", "--rates", "0.5", "0.5", "--shared", "0.5")
        assert code == 0
        table, delta, ratios = sections(out)
        assert delta == [["measure", "delta_imr"], ["kl", "0.000000"]]
        assert table[0] == ["pattern", "p_imr", "p_smr"]
        assert ratios[0] == ["modality", "target", "realized", "error", "bound", "within_bound"]

    def test_kl_value(self):
        _, out = run("mask-stats", "--rates", "0.3", "0.7", "--shared", "0.5", "--measure", "kl")
        assert abs(float(sections(out)[1][1][1]) - 0.203) <= 1e-3

    def test_n8_bound_row(self):
        _, out = run("mask-stats", "--rates", "0.5", "0.5", "--shared", "0.5", "--n", "8")
        rows = sections(out)[2][1:]
        assert rows[0] == ["0", "0.500000", "0.375000", "0.125000", "0.125000", "true"]

    @pytest.mark.parametrize("argv", [
        ["mask-stats", "--rates", "1.0", "0.5", "--shared", "0.5"],
        ["mask-stats", "--rates", "0.5", "--shared", "0.5"],
        ["mask-stats", "--rates", "0.5", "0.5", "--shared", "0.5", "--measure", "mse"],
        ["mask-stats", "--rates", "0.5", "0.5", "--shared", "0.5", "--n", "0"],
        ["frobnicate"],
    ])
    def test_usage_errors_exit_2(self, argv):
        assert run(*argv)[0] == 2


class TestTrainEvalDiagnose:
    def test_full_cycle(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", **{"output.dir": str(tmp_path / "runs")})
        code, out = run("train", "--config", str(cfg))
        assert code == 0
        summary = json.loads(out)
        run_dir = summary["run_dir"]

        code, out = run("eval", "--run", run_dir, "--split", "test")
        assert code == 0
        res = json.loads(out)
        assert res["wf1"] == summary["test_wf1"] and res["acc"] == summary["test_acc"]

        code, out = run("diagnose", "--run", run_dir)
        assert code == 0
        rows = list(csv.reader(out.splitlines()))
        assert rows[0] == diagnostics_columns(["a", "v", "l"])
        assert len(rows) == 3

    def test_same_config_same_files(self, tmp_path):
        for name in ("x", "y"):
            cfg = write_config(tmp_path / f"{name}.json", **{"output.dir": str(tmp_path / name)})
            assert run("train", "--config", str(cfg))[0] == 0
        (dx,) = (tmp_path / "x").iterdir()
        (dy,) = (tmp_path / "y").iterdir()
        for f in ("run.json", "diagnostics.csv"):
            assert (dx / f).read_bytes() == (dy / f).read_bytes()

    def test_parallel_matches_sequential(self, tmp_path):
        for name, extra in (("seq", []), ("par", ["--parallel"])):
            cfg = write_config(tmp_path / f"{name}.json", seeds=[0, 1],
                               **{"output.dir": str(tmp_path / name)})
            assert run("train", "--config", str(cfg), *extra)[0] == 0
        for d in (tmp_path / "seq").iterdir():
            assert (d / "run.json").read_bytes() == (tmp_path / "par" / d.name / "run.json").read_bytes()

    def test_feature_files_source(self, tmp_path):
        splits = generate_synthetic(DatasetSpec(dims=(3, 2, 2), n_train=40, n_val=16, n_test=16))
        paths = {}
        for name, ds in zip(("train", "val", "test"), splits):
            paths[f"data.{name}_path"] = str(tmp_path / f"{name}.jsonl")
            write_features(paths[f"data.{name}_path"], ds)
        cfg = write_config(tmp_path / "c.json", **paths, **{"output.dir": str(tmp_path / "r")})
        code, out = run("train", "--config", str(cfg))
        assert code == 0
        assert run("eval", "--run", json.loads(out)["run_dir"])[0] == 0

    def test_bad_config_exit_2(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train.epochs": 1, "bogus": 1}))
        assert run("train", "--config", str(p))[0] == 2
        err = capsys.readouterr().err
        assert "bogus" in err and "train.missing_rates" in err

    def test_missing_files_exit_2(self, tmp_path, capsys):
        assert run("train", "--config", str(tmp_path / "nope.json"))[0] == 2
        assert run("eval", "--run", str(tmp_path))[0] == 2
        assert str(tmp_path) in capsys.readouterr().err

    def test_numeric_failure_exit_3(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", **{"train.lr": 1e200, "output.dir": str(tmp_path / "r")})
        with np.errstate(all="ignore"):
            assert run("train", "--config", str(cfg))[0] == 3


class TestVerifyLemma1:
    def test_table(self):
        code, out = run("verify-lemma1", "--r", "0.0", "0.5", "--draws", "1000")
        assert code == 0
        rows = list(csv.reader(out.splitlines()))
        assert rows[0] == ["r", "ratio", "expected", "rel_error"]
        assert rows[1][1] == "1.000000"
        assert abs(float(rows[2][1]) - 0.5) < 0.05

    def test_too_few_draws(self):
        assert run("verify-lemma1", "--r", "0.5", "--draws", "10")[0] == 2
