import json

import numpy as np
import pytest

from hyperreg import harness as hs
from hyperreg.grid import SynthConfig, synth_generate, dice_floor
from hyperreg.losses import HyperParams
from hyperreg.networks import Checkpoint, build_regnet_layout


def toy_spec(experiment, tmp_path, **kw):
    base = dict(experiment=experiment, steps=3, size=16, n_pairs=14,
                lam_grid=(0.2, 0.8), gamma_grid=(0.3, 0.7), metrics=("mse",),
                reg_preset="tiny", out_dir=str(tmp_path))
    base.update(kw)
    return hs.ExperimentSpec(**base)


@pytest.fixture(scope="module")
def data():
    return synth_generate(SynthConfig(size=16, n_pairs=10, warp_mag=2.0), seed=2)


def zero_baseline(data):
    cfg = hs.REG_PRESETS["tiny"]
    layout = build_regnet_layout(cfg)
    return Checkpoint(kind="baseline",
                      params=np.zeros(layout.total_count, dtype=np.float32),
                      reg_config=cfg, hyper_config=None, active=("lam",),
                      fixed_hp={"lam": 0.5, "gamma": 0.0, "ncc_window": 9,
                                "nmi_bins": 32},
                      metric="mse", seed=0, step=0)


class TestEvaluate:
    def test_identity_model_hits_unregistered_floor(self, data):
        summary = hs.evaluate(zero_baseline(data), data.records,
                              HyperParams(lam=0.5))
        floor = dice_floor(data)
        assert summary.dice_mean == pytest.approx(floor, abs=1e-6)
        assert summary.mean_disp == 0.0 and summary.negdet_frac == 0.0

    def test_means_match_per_pair_values(self, data):
        s = hs.evaluate(zero_baseline(data), data.records[:4], HyperParams(lam=0.5))
        arr = np.asarray(s.dice)
        assert s.dice_mean == pytest.approx(arr.mean(axis=1).mean(), abs=1e-5)
        assert s.per_label_mean == pytest.approx(arr.mean(axis=0).tolist(),
                                                 abs=1e-5)

    def test_dice_bounds_validated(self, data):
        s = hs.evaluate(zero_baseline(data), data.records[:2], HyperParams(lam=0.5))
        s.dice[0][0] = 1.5
        with pytest.raises(ValueError):
            s.validate()


class TestSpec:
    def test_run_id_stable_and_sensitive(self, tmp_path):
        a = toy_spec("e1", tmp_path)
        b = toy_spec("e1", tmp_path)
        c = toy_spec("e1", tmp_path, steps=4)
        assert a.run_id() == b.run_id() != c.run_id()

    def test_grid_outside_support_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            toy_spec("e1", tmp_path, lam_grid=(0.5, 1.2)).validate()

    def test_unknown_experiment_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            toy_spec("e9", tmp_path).validate()

    def test_e2_needs_four_seeds(self, tmp_path):
        with pytest.raises(ValueError):
            hs.run_e2(toy_spec("e2", tmp_path, seeds=(0, 1)))


@pytest.fixture(scope="module")
def report(tmp_path_factory):
    spec = toy_spec("e1", tmp_path_factory.mktemp("e1"))
    return spec, hs.run_e1(spec)


class TestRunE1:
    def test_report_written_and_loadable(self, report):
        spec, rep = report
        on_disk = json.loads((spec.run_dir() / "report.json").read_text())
        assert on_disk["status"] == "ok"
        assert set(on_disk["metrics"]) == {"mse"}

    def test_accounting_covers_every_model(self, report):
        spec, rep = report
        runtime = json.loads((spec.run_dir() / "runtime.json").read_text())
        trained = {p.stem for p in (spec.run_dir() / "ckpt").glob("*.ckpt")}
        assert trained <= set(runtime["train_seconds"])
        assert runtime["total_train_seconds"] == pytest.approx(
            sum(runtime["train_seconds"].values()))

    def test_per_lambda_table_complete(self, report):
        spec, rep = report
        per = rep["metrics"]["mse"]["per_lambda"]
        assert set(per) == set(spec.lam_grid)
        for v in per.values():
            assert 0.0 <= v["baseline_dice"] <= 1.0
            assert 0.0 <= v["hyper_dice"] <= 1.0

    def test_sweep_csv_has_dense_grid(self, report):
        spec, _ = report
        lines = (spec.run_dir() / "sweep.csv").read_text().splitlines()
        assert len(lines) == 1 + len(hs.DENSE_25)

    def test_rerun_reproduces_report_bytes(self, report):
        spec, _ = report
        before = (spec.run_dir() / "report.json").read_bytes()
        hs.run_e1(spec)
        assert (spec.run_dir() / "report.json").read_bytes() == before


class TestRunOthers:
    def test_e1_2hp_reports_label_split(self, tmp_path):
        rep = hs.run_e1_2hp(toy_spec("e1-2hp", tmp_path))
        assert rep["n_baselines"] == 4
        assert set(rep["train_labels"]).isdisjoint(rep["held_out_labels"])
        assert "held_out_label_dice" in rep["tuned"]

    def test_e2_reports_sd_tables(self, tmp_path):
        rep = hs.run_e2(toy_spec("e2", tmp_path, seeds=(0, 1, 2, 3)))
        assert set(rep["per_lambda"]) == {0.2, 0.8}
        for v in rep["per_lambda"].values():
            assert len(v["baseline_dice"]) == 4
            assert len(v["hyper_dice"]) == 4

    def test_e3_scoped_tables(self, tmp_path):
        rep = hs.run_e3(toy_spec("e3", tmp_path, n_pairs=16))
        assert set(rep["subpopulation_lam_star"]) == {"A", "B"}
        assert len(rep["label_lam_star"]) == 6
        assert rep["tune_pairs"] >= 1
        for v in rep["dominance"].values():
            assert v["dominates"]


class TestTomlSpec:
    def test_config_toml_round_trips(self, tmp_path):
        import tomli
        spec = toy_spec("e1", tmp_path)
        hs.write_spec_toml(spec, tmp_path / "c.toml")
        with open(tmp_path / "c.toml", "rb") as fh:
            loaded = tomli.load(fh)
        assert loaded["experiment"] == "e1"
        assert tuple(loaded["lam_grid"]) == spec.lam_grid
        assert loaded["steps"] == 3
