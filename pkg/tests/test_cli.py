import json

import pytest

from hyperreg import cli


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    code = cli.main(["synth", "--seed", "7", "--out", str(d / "a"),
                     "--size", "16", "--pairs", "10"])
    assert code == 0
    return str(d / "a")


@pytest.fixture(scope="module")
def ckpt_path(dataset_dir, tmp_path_factory):
    p = tmp_path_factory.mktemp("ck") / "h.ckpt"
    code = cli.main(["train", "--data", dataset_dir, "--out", str(p),
                     "--steps", "4", "--preset", "tiny", "--seed", "1"])
    assert code == 0
    return str(p)


class TestSynth:
    def test_same_seed_identical_manifest(self, tmp_path, capsys):
        for name in ("a", "b"):
            code, _, _ = run(capsys, "synth", "--seed", "7",
                             "--out", str(tmp_path / name),
                             "--size", "16", "--pairs", "6")
            assert code == 0
        ma = (tmp_path / "a" / "manifest.json").read_bytes()
        mb = (tmp_path / "b" / "manifest.json").read_bytes()
        assert ma == mb

    def test_unknown_flag_exits_2(self, capsys):
        code, _, _ = run(capsys, "synth", "--out", "/tmp/x", "--bogus", "1")
        assert code == 2

    def test_missing_subcommand_exits_2(self, capsys):
        code, _, _ = run(capsys)
        assert code == 2


class TestTrain:
    def test_train_baseline_and_eval(self, dataset_dir, tmp_path, capsys):
        p = tmp_path / "b.ckpt"
        code, out, _ = run(capsys, "train-baseline", "--data", dataset_dir,
                           "--out", str(p), "--steps", "3", "--preset", "tiny",
                           "--lam", "0.4")
        assert code == 0
        assert json.loads(out.splitlines()[-1])["steps"] == 3
        code, out, _ = run(capsys, "eval", "--ckpt", str(p),
                           "--data", dataset_dir, "--split", "val")
        assert code == 0
        summary = json.loads(out.splitlines()[-1])
        assert 0.0 <= summary["dice_mean"] <= 1.0

    def test_missing_data_dir_exits_2(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", str(tmp_path / "nope"),
                           "--out", str(tmp_path / "x.ckpt"), "--steps", "1")
        assert code == 2
        assert "configuration error" in err

    def test_config_file_defaults_and_flag_override(self, dataset_dir,
                                                    tmp_path, capsys):
        cfg = tmp_path / "t.toml"
        cfg.write_text('steps = 2\npreset = "tiny"\nseed = 3\n')
        p = tmp_path / "c.ckpt"
        code, out, _ = run(capsys, "train", "--data", dataset_dir,
                           "--out", str(p), "--config", str(cfg),
                           "--steps", "3")
        assert code == 0
        assert json.loads(out.splitlines()[-1])["steps"] == 3  # flag wins

    def test_bad_config_file_exits_2(self, dataset_dir, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("steps = [unclosed\n")
        code, _, _ = run(capsys, "train", "--data", dataset_dir,
                         "--out", str(tmp_path / "x.ckpt"),
                         "--config", str(cfg))
        assert code == 2


class TestTuneSweep:
    def test_tune_prints_json_contract(self, dataset_dir, ckpt_path, capsys):
        code, out, _ = run(capsys, "tune", "--ckpt", ckpt_path,
                           "--data", dataset_dir, "--pairs", "2")
        assert code == 0
        res = json.loads(out.splitlines()[-1])
        assert set(res) >= {"hp", "objective", "seconds"}
        assert 0.0 <= res["hp"]["lam"] <= 1.0

    def test_scoped_tune(self, dataset_dir, ckpt_path, capsys):
        code, out, _ = run(capsys, "tune", "--ckpt", ckpt_path,
                           "--data", dataset_dir, "--scope", "subpopulation")
        assert code == 0
        res = json.loads(out.splitlines()[-1])
        assert [r["scope"] for r in res] == ["subpopulation:A",
                                             "subpopulation:B"]

    def test_sweep_writes_csv(self, dataset_dir, ckpt_path, tmp_path, capsys):
        out_csv = tmp_path / "s.csv"
        code, out, _ = run(capsys, "sweep", "--ckpt", ckpt_path,
                           "--data", dataset_dir, "--grid", "0.2,0.8",
                           "--out", str(out_csv))
        assert code == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0].startswith("lambda,gamma,ws")
        assert len(lines) == 3


class TestExp:
    def test_exp_e1_smoke(self, tmp_path, capsys):
        code, out, _ = run(capsys, "exp", "e1", "--steps", "2", "--size", "16",
                           "--pairs", "12", "--preset", "tiny",
                           "--metrics", "mse", "--out", str(tmp_path))
        assert code == 0
        info = json.loads(out.splitlines()[-1])
        assert info["status"] == "ok"
        assert (tmp_path / "e1").exists()
