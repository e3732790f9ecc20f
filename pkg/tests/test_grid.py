import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperreg import grid
from hyperreg.grid import (Grid2D, LabelMap, SynthConfig, load_grid, load_pgm,
                           one_hot, save_grid, synth_generate)


class TestGridFormat:
    def test_round_trip(self, tmp_path):
        g = Grid2D.from_array(np.random.default_rng(0).random((5, 7)))
        save_grid(g, tmp_path / "g.hmg")
        g2 = load_grid(tmp_path / "g.hmg")
        np.testing.assert_array_equal(g.data, g2.data)

    def test_1x1_file_size(self, tmp_path):
        save_grid(Grid2D.from_array([[0.5]]), tmp_path / "g.hmg")
        raw = (tmp_path / "g.hmg").read_bytes()
        assert raw == b"HMG1\n1 1\n" + np.float32(0.5).tobytes()

    def test_payload_mismatch_rejected(self, tmp_path):
        p = tmp_path / "bad.hmg"
        p.write_bytes(b"HMG1\n2 2\n" + np.zeros(3, dtype="<f4").tobytes())
        with pytest.raises(ValueError):
            load_grid(p)

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_round_trip_random(self, tmp_path_factory, seed):
        rng = np.random.default_rng(seed)
        g = Grid2D.from_array(rng.random((rng.integers(1, 9), rng.integers(1, 9))))
        path = tmp_path_factory.mktemp("rt") / "g.hmg"
        save_grid(g, path)
        np.testing.assert_array_equal(load_grid(path).data, g.data)


class TestPgm:
    def test_p2_scaling(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_text("P2\n2 2\n255\n0 255 255 0\n")
        g = load_pgm(p)
        np.testing.assert_allclose(g.data, [[0, 1], [1, 0]])

    def test_16bit_maxval(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n1 1\n65535\n" + (65535).to_bytes(2, "big"))
        assert load_pgm(p).data[0, 0] == 1.0

    def test_p5_with_comment(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n# comment\n2 1\n255\n" + bytes([0, 128]))
        g = load_pgm(p)
        np.testing.assert_allclose(g.data, [[0, 128 / 255]], rtol=1e-6)

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
        with pytest.raises(ValueError):
            load_pgm(p)


class TestOneHot:
    def test_two_labels(self):
        seg = LabelMap.from_array([[0, 3]])
        oh = one_hot(seg)
        np.testing.assert_array_equal(oh[0], [[1, 0]])
        np.testing.assert_array_equal(oh[1], [[0, 1]])

    def test_uniform_map(self):
        seg = LabelMap.from_array(np.full((3, 3), 2))
        oh = one_hot(seg, [0, 2])
        assert oh[0].sum() == 0 and np.all(oh[1] == 1)

    def test_label_outside_set_rejected(self):
        seg = LabelMap.from_array([[5]])
        with pytest.raises(ValueError):
            one_hot(seg, [0, 1])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_partition_property(self, seed):
        rng = np.random.default_rng(seed)
        seg = LabelMap.from_array(rng.integers(0, 5, (6, 6)))
        oh = one_hot(seg, list(range(5)))
        np.testing.assert_allclose(oh.sum(axis=0), 1.0)


class TestSynth:
    def test_determinism(self):
        cfg = SynthConfig(n_pairs=4, size=32)
        d1 = synth_generate(cfg, seed=7)
        d2 = synth_generate(cfg, seed=7)
        for a, b in zip(d1.records, d2.records):
            np.testing.assert_array_equal(a.moving.data, b.moving.data)
            np.testing.assert_array_equal(a.fixed_seg.labels, b.fixed_seg.labels)
        assert d1.split == d2.split

    def test_zero_warp_means_identical_pairs(self):
        cfg = SynthConfig(n_pairs=3, size=32, warp_mag=0.0, noise=0.0)
        ds = synth_generate(cfg, seed=7)
        for rec in ds.records:
            np.testing.assert_array_equal(rec.moving_seg.labels, rec.fixed_seg.labels)
        assert grid.dice_floor(ds) == 1.0

    def test_dice_floor_default(self):
        ds = synth_generate(SynthConfig(n_pairs=8), seed=7)
        floor = grid.dice_floor(ds)
        assert 0.0 < floor < 1.0

    def test_labels_survive_warping(self):
        ds = synth_generate(SynthConfig(n_pairs=6), seed=3)
        for rec in ds.records:
            for lab in range(1, ds.config.n_labels + 1):
                assert (rec.moving_seg.labels == lab).sum() > 0
                assert (rec.fixed_seg.labels == lab).sum() > 0

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            synth_generate(SynthConfig(n_pairs=0), seed=1)
        with pytest.raises(ValueError):
            synth_generate(SynthConfig(subpopulations=(("A", -1.0),)), seed=1)

    def test_splits_disjoint_and_cover(self):
        ds = synth_generate(SynthConfig(n_pairs=20, size=32), seed=1)
        assert len(ds.split) == 20
        assert set(ds.split) <= {"train", "val", "test"}
        assert ds.split.count("train") == 14

    def test_manifest_round_trip(self, tmp_path):
        ds = synth_generate(SynthConfig(n_pairs=4, size=32,
                                        cross_modality_frac=0.5,
                                        within_subject_frac=0.5), seed=9)
        grid.save_dataset(ds, tmp_path / "d")
        ds2 = grid.load_dataset(tmp_path / "d")
        assert dataclasses.asdict(ds2.config)["size"] == 32
        assert ds2.split == ds.split
        for a, b in zip(ds.records, ds2.records):
            np.testing.assert_array_equal(a.moving.data, b.moving.data)
            np.testing.assert_array_equal(a.moving_seg.labels, b.moving_seg.labels)
            assert a.task == b.task and a.subpopulation == b.subpopulation

    def test_serialized_regeneration_identical(self, tmp_path):
        cfg = SynthConfig(n_pairs=3, size=32)
        grid.save_dataset(synth_generate(cfg, seed=5), tmp_path / "a")
        grid.save_dataset(synth_generate(cfg, seed=5), tmp_path / "b")
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
