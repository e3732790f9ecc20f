import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperreg import autodiff as ad
from hyperreg import losses
from hyperreg.losses import (HyperParams, grad_energy, hard_dice, local_ncc,
                             loss_semisupervised, loss_unsupervised, mse, nmi,
                             soft_dice)


def img(arr):
    return ad.Tensor(np.asarray(arr, dtype=np.float64)[None, None])


def rand_img(seed, size=16):
    return img(np.random.default_rng(seed).random((size, size)))


class TestMse:
    def test_zero_at_equality(self):
        f = rand_img(0)
        assert mse(f, f).item() == 0.0

    def test_constant_offset(self):
        f = rand_img(1)
        w = ad.Tensor(f.data - 0.1)
        assert mse(f, w).item() == pytest.approx(1.0, rel=1e-5)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((4, 4)), rng.random((4, 4))
        expect = sum((a[i, j] - b[i, j]) ** 2 for i in range(4) for j in range(4)) / 16 / 0.01
        assert mse(img(a), img(b)).item() == pytest.approx(expect, rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse(rand_img(0, 4), rand_img(0, 5))


class TestLocalNcc:
    def test_perfect_correlation(self):
        f = rand_img(3, 32)
        assert local_ncc(f, f, 9).item() < 1e-3

    def test_affine_invariance(self):
        f = rand_img(4, 32)
        w = ad.Tensor(2.5 * f.data + 0.3)
        assert local_ncc(f, w, 9).item() < 1e-3

    def test_constant_images_degenerate_to_one(self):
        f = img(np.full((16, 16), 0.5))
        assert local_ncc(f, f, 5).item() == pytest.approx(1.0, abs=1e-6)

    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            local_ncc(rand_img(0), rand_img(1), 4)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        a = rng.random((2, 1, 12, 12))
        b = rng.random((2, 1, 12, 12))
        whole = local_ncc(ad.Tensor(a), ad.Tensor(b), 5).item()
        singles = [local_ncc(ad.Tensor(a[i:i + 1]), ad.Tensor(b[i:i + 1]), 5).item()
                   for i in range(2)]
        assert whole == pytest.approx(np.mean(singles), rel=1e-5)


def brute_force_nmi(a, b, bins):
    """Independent oracle: same Parzen weighting, computed with plain loops."""
    centers = (np.arange(bins) + 0.5) / bins
    sb = 0.25 / bins

    def weights(x):
        w = np.exp(-((x.reshape(-1, 1) - centers[None]) ** 2) / (2 * sb * sb))
        return w / (w.sum(axis=1, keepdims=True) + 1e-12)

    joint = weights(a).T @ weights(b) / a.size
    px, py = joint.sum(axis=1), joint.sum(axis=0)
    h = lambda p: -(p * np.log(p + 1e-7)).sum()
    return (h(px) + h(py)) / h(joint)


class TestNmi:
    # well-separated three-level clusters, each sitting on a bin center
    LEVELS = [3.5 / 32, 16.5 / 32, 28.5 / 32]

    def test_self_similarity_high(self):
        rng = np.random.default_rng(6)
        a = rng.choice(self.LEVELS, size=(64, 64))
        loss = nmi(img(a), img(a), 32).item()
        assert loss < 0.2
        assert 2.0 - loss == pytest.approx(brute_force_nmi(a, a, 32), abs=1e-4)

    def test_independent_images_near_one(self):
        rng = np.random.default_rng(7)
        a = rng.choice(self.LEVELS, size=(64, 64))
        b = rng.permutation(a.reshape(-1)).reshape(64, 64)
        loss = nmi(img(a), img(b), 32).item()
        assert abs(loss - 1.0) < 0.1

    def test_self_beats_other(self):
        rng = np.random.default_rng(8)
        a = rng.choice(self.LEVELS, size=(32, 32))
        g = rng.random((32, 32))
        assert nmi(img(a), img(a)).item() < nmi(img(a), img(g)).item()

    def test_monotone_remap_preserved(self):
        rng = np.random.default_rng(9)
        a = rng.choice(self.LEVELS, size=(48, 48))
        remapped = np.clip(a, 0, 1) ** 0.45
        assert nmi(img(a), img(remapped)).item() < 0.25

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            nmi(img(np.full((4, 4), 1.5)), rand_img(0, 4))


class TestGradEnergy:
    def test_constant_field_zero(self):
        v = ad.Tensor(np.full((1, 2, 16, 16), 3.0))
        assert grad_energy(v).item() == 0.0

    def test_linear_ramp_analytic(self):
        w = 16
        v = np.zeros((1, 2, w, w))
        v[0, 0] = np.arange(w)[None, :]
        # |J|_F^2 = 1 everywhere except the replicate last column
        expect = w * (w - 1) / (2.0 * w * w)
        assert grad_energy(ad.Tensor(v)).item() == pytest.approx(expect, rel=1e-6)

    def test_quadratic_homogeneity(self):
        rng = np.random.default_rng(10)
        v = ad.Tensor(rng.random((1, 2, 8, 8)))
        e1 = grad_energy(v).item()
        e3 = grad_energy(ad.Tensor(3.0 * v.data)).item()
        assert e3 == pytest.approx(9.0 * e1, rel=1e-5)


class TestSoftDice:
    def one_hot(self, lab, k):
        return np.stack([(lab == i).astype(np.float64) for i in range(k)])[None]

    def test_identical_maps(self):
        rng = np.random.default_rng(11)
        lab = rng.integers(0, 4, (8, 8))
        oh = ad.Tensor(self.one_hot(lab, 4))
        loss, per = soft_dice(oh, oh)
        assert loss.item() == pytest.approx(0.0, abs=1e-4)
        np.testing.assert_allclose(per, 1.0, atol=1e-4)

    def test_disjoint_regions(self):
        a = np.zeros((8, 8), dtype=int)
        a[:4] = 1
        b = np.zeros((8, 8), dtype=int)
        b[4:] = 1
        _, per = soft_dice(ad.Tensor(self.one_hot(a, 2)), ad.Tensor(self.one_hot(b, 2)))
        assert per[0] == pytest.approx(0.0, abs=1e-4)

    def test_half_overlap(self):
        a = np.zeros((8, 8), dtype=int)
        a[0:4, 0:4] = 1
        b = np.zeros((8, 8), dtype=int)
        b[2:6, 0:4] = 1  # overlap 2x4 = 8 of 16+16
        _, per = soft_dice(ad.Tensor(self.one_hot(a, 2)), ad.Tensor(self.one_hot(b, 2)))
        assert per[0] == pytest.approx(0.5, abs=1e-3)

    def test_hard_dice_against_soft(self):
        rng = np.random.default_rng(12)
        a = rng.integers(0, 3, (10, 10))
        b = rng.integers(0, 3, (10, 10))
        _, soft = soft_dice(ad.Tensor(self.one_hot(a, 3)), ad.Tensor(self.one_hot(b, 3)))
        hard = hard_dice(a, b, [1, 2])
        np.testing.assert_allclose(soft, hard, atol=1e-3)


class TestComposites:
    def setup_method(self):
        rng = np.random.default_rng(13)
        self.f = img(rng.random((16, 16)))
        self.m = img(rng.random((16, 16)))
        self.v = ad.Tensor(rng.standard_normal((1, 2, 16, 16)) * 0.5)
        lab_f = rng.integers(0, 3, (16, 16))
        lab_m = rng.integers(0, 3, (16, 16))
        self.sf = np.stack([(lab_f == i).astype(np.float64) for i in range(3)])[None]
        self.sm = np.stack([(lab_m == i).astype(np.float64) for i in range(3)])[None]

    def test_lambda_one_pure_reg(self):
        hp = HyperParams(lam=1.0)
        total, rep, _ = loss_unsupervised(self.f, self.m, self.v, hp)
        assert total.item() == pytest.approx(rep.reg, rel=1e-6)

    def test_lambda_zero_pure_sim(self):
        total, rep, _ = loss_unsupervised(self.f, self.m, self.v, HyperParams(lam=0.0))
        assert total.item() == pytest.approx(rep.sim, rel=1e-6)

    def test_half_weight_recombines(self):
        total, rep, _ = loss_unsupervised(self.f, self.m, self.v, HyperParams(lam=0.5))
        assert total.item() == pytest.approx(0.5 * rep.sim + 0.5 * rep.reg, rel=1e-6)

    def test_gamma_zero_reduces_to_unsupervised(self):
        hp = HyperParams(lam=0.3, gamma=0.0, active=("lam", "gamma"))
        t1, _, _ = loss_unsupervised(self.f, self.m, self.v, hp)
        t2, _, _ = loss_semisupervised(self.f, self.m, self.sf, self.sm, self.v, hp)
        assert t1.item() == pytest.approx(t2.item(), rel=1e-6)

    def test_gamma_one_kills_sim(self):
        hp = HyperParams(lam=0.3, gamma=1.0, active=("lam", "gamma"))
        _, rep, _ = loss_semisupervised(self.f, self.m, self.sf, self.sm, self.v, hp)
        lam, gamma = rep.weights["lam"], rep.weights["gamma"]
        assert (1 - lam) * (1 - gamma) == 0.0
        rep.check_recombines()

    def test_lambda_one_ignores_gamma(self):
        hp = HyperParams(lam=1.0, gamma=0.7, active=("lam", "gamma"))
        total, rep, _ = loss_semisupervised(self.f, self.m, self.sf, self.sm, self.v, hp)
        assert total.item() == pytest.approx(rep.reg, rel=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_weight_algebra_recombines(self, lam, gamma):
        hp = HyperParams(lam=lam, gamma=gamma, active=("lam", "gamma"))
        _, rep, _ = loss_semisupervised(self.f, self.m, self.sf, self.sm, self.v, hp)
        rep.check_recombines(tol=1e-6)


class TestLossGradients:
    """Finite-difference checks for each loss w.r.t. warped inputs and v."""

    def setup_method(self):
        rng = np.random.default_rng(14)
        self.f = ad.Tensor(rng.random((1, 1, 8, 8)))
        self.w = ad.Tensor(rng.random((1, 1, 8, 8)))
        # positive, off-lattice velocities keep sampling away from bilinear kinks
        self.v = ad.Tensor(rng.uniform(0.2, 0.6, (1, 2, 8, 8)))

    def test_mse_grad(self):
        assert ad.check_gradients(lambda xs: mse(self.f, xs[0]), [self.w]) < 1e-4

    def test_ncc_grad(self):
        assert ad.check_gradients(
            lambda xs: local_ncc(self.f, xs[0], 5), [self.w]) < 1e-4

    def test_nmi_grad(self):
        assert ad.check_gradients(lambda xs: nmi(self.f, xs[0], 8), [self.w]) < 1e-4

    def test_grad_energy_grad(self):
        assert ad.check_gradients(lambda xs: grad_energy(xs[0]), [self.v]) < 1e-4

    def test_soft_dice_grad(self):
        rng = np.random.default_rng(15)
        a = rng.random((1, 3, 6, 6))
        b = ad.Tensor(rng.random((1, 3, 6, 6)))
        assert ad.check_gradients(
            lambda xs: soft_dice(ad.Tensor(a), xs[0])[0], [b]) < 1e-4

    def test_unsupervised_full_graph_grad_wrt_v(self):
        hp = HyperParams(lam=0.4)
        err = ad.check_gradients(
            lambda xs: loss_unsupervised(self.f, self.w, xs[0], hp, svf_steps=3)[0],
            [self.v])
        assert err < 1e-4

    def test_semisupervised_full_graph_grad_wrt_v(self):
        rng = np.random.default_rng(16)
        lab_f = rng.integers(0, 3, (8, 8))
        lab_m = rng.integers(0, 3, (8, 8))
        sf = np.stack([(lab_f == i).astype(float) for i in range(3)])[None]
        sm = np.stack([(lab_m == i).astype(float) for i in range(3)])[None]
        hp = HyperParams(lam=0.4, gamma=0.5, active=("lam", "gamma"))
        err = ad.check_gradients(
            lambda xs: loss_semisupervised(self.f, self.w, sf, sm, xs[0], hp,
                                           svf_steps=3)[0],
            [self.v])
        assert err < 1e-4
