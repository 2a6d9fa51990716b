import math

import numpy as np
import pytest

import oracles
from conftest import rel_err
from mic import autograd as ag
from mic.errors import ContractError, InsufficientBatchError
from mic.sir import SirConfig, cv_loss, dim_variances, sir_loss, uniformity_loss
from mic.tensor_core import EpsilonPolicy

CFG = SirConfig()
EPS = EpsilonPolicy()


class TestConfig:
    def test_defaults(self):
        assert CFG.kernel_t == 2.0

    def test_validation(self):
        with pytest.raises(ContractError):
            SirConfig(kernel_t=0.0)


class TestDimVariances:
    def test_matches_oracle(self, rng):
        for _ in range(20):
            z = rng.normal(size=(int(rng.integers(2, 9)), int(rng.integers(1, 7))))
            got = dim_variances(ag.Tensor(z)).data
            assert rel_err(got, oracles.dim_variances(z)) < 1e-12

    def test_population_denominator(self):
        z = ag.Tensor(np.array([[0.0], [2.0]]))
        assert dim_variances(z).data[0] == pytest.approx(1.0, rel=1e-15)

    def test_batch_of_one_rejected(self):
        with pytest.raises(InsufficientBatchError):
            dim_variances(ag.Tensor(np.ones((1, 4))))


class TestCvLoss:
    def test_matches_oracle(self, rng):
        for _ in range(20):
            z = rng.normal(size=(int(rng.integers(2, 9)), int(rng.integers(2, 7))))
            got = float(cv_loss(ag.Tensor(z), EPS).data)
            assert rel_err(got, oracles.cv_loss(z, EPS.eps)) < 1e-11

    def test_flat_spectrum_is_zero(self):
        z = ag.Tensor(np.array([[1.0, 1.0, 1.0], [-1.0, -1.0, -1.0]]))
        assert float(cv_loss(z, EPS).data) == 0.0

    def test_all_zero_input_is_zero_not_nan(self):
        z = ag.Tensor(np.zeros((4, 3)))
        assert float(cv_loss(z, EPS).data) == 0.0

    def test_translation_invariance(self, rng):
        # Per-dim offsets drop out of the variances.
        z = rng.normal(size=(6, 4))
        shift = rng.normal(size=(1, 4)) * 10.0
        a = float(cv_loss(ag.Tensor(z), EPS).data)
        b = float(cv_loss(ag.Tensor(z + shift), EPS).data)
        assert a == pytest.approx(b, rel=1e-9)

    def test_scale_invariance(self, rng):
        # Global rescaling multiplies every variance alike; the ratio
        # stays put up to the eps in the denominator.
        z = rng.normal(size=(6, 4))
        a = float(cv_loss(ag.Tensor(z), EPS).data)
        b = float(cv_loss(ag.Tensor(z * 5.0), EPS).data)
        assert a == pytest.approx(b, rel=1e-3)

    def test_anisotropy_increases_cv(self, rng):
        z = rng.normal(size=(32, 8))
        stretched = z.copy()
        stretched[:, 0] *= 6.0
        a = float(cv_loss(ag.Tensor(z), EPS).data)
        b = float(cv_loss(ag.Tensor(stretched), EPS).data)
        assert b > a


class TestUniformityLoss:
    def test_identical_pair_anchor(self):
        # Every off-diagonal cosine is 1, the kernel mean is 1, and the
        # loss collapses to log(1 + eps).
        z_hat = ag.Tensor(np.tile([1.0, 0.0], (4, 1)))
        got = float(uniformity_loss(z_hat, CFG).data)
        assert got == pytest.approx(math.log(1.0 + EPS.eps), abs=1e-12)

    def test_matches_oracle(self, rng):
        for _ in range(20):
            z = rng.normal(size=(int(rng.integers(2, 9)), int(rng.integers(2, 7))))
            z_hat = z / np.linalg.norm(z, axis=1, keepdims=True)
            got = float(uniformity_loss(ag.Tensor(z_hat), CFG).data)
            assert rel_err(got, oracles.uniformity_loss(z_hat, CFG.kernel_t, EPS.eps)) < 1e-11

    def test_lower_bound_antipodal(self):
        # Two antipodal unit points achieve the minimum log(exp(-4t)+eps).
        z_hat = ag.Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        got = float(uniformity_loss(z_hat, CFG).data)
        bound = math.log(math.exp(-4.0 * CFG.kernel_t) + EPS.eps)
        assert got == pytest.approx(bound, abs=1e-12)

    def test_rotation_invariance(self, rng):
        z = rng.normal(size=(8, 5))
        z_hat = z / np.linalg.norm(z, axis=1, keepdims=True)
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        a = float(uniformity_loss(ag.Tensor(z_hat), CFG).data)
        b = float(uniformity_loss(ag.Tensor(z_hat @ q), CFG).data)
        assert a == pytest.approx(b, rel=1e-10)

    def test_spreading_points_lowers_loss(self):
        bunched = np.array([[1.0, 0.0], [0.999, 0.0447]])
        bunched /= np.linalg.norm(bunched, axis=1, keepdims=True)
        spread = np.array([[1.0, 0.0], [0.0, 1.0]])
        a = float(uniformity_loss(ag.Tensor(bunched), CFG).data)
        b = float(uniformity_loss(ag.Tensor(spread), CFG).data)
        assert b < a

    def test_batch_of_one_rejected(self):
        with pytest.raises(InsufficientBatchError):
            uniformity_loss(ag.Tensor(np.ones((1, 3))), CFG)


class TestSirLoss:
    def test_composition(self, rng):
        z = ag.Tensor(rng.normal(size=(6, 4)))
        loss, terms = sir_loss(z, CFG)
        assert terms.l_sir == pytest.approx(0.5 * (terms.l_cv + terms.l_unif), rel=1e-14)
        assert float(loss.data) == terms.l_sir

    def test_normalizes_before_uniformity(self, rng):
        # Row scale must not leak into the uniformity term.
        z = rng.normal(size=(5, 4))
        _, terms_a = sir_loss(ag.Tensor(z), CFG)
        _, terms_b = sir_loss(ag.Tensor(z * 9.0), CFG)
        assert terms_a.l_unif == pytest.approx(terms_b.l_unif, rel=1e-9)

    def test_gradient(self, rng):
        params = {"z": ag.Tensor(rng.normal(size=(5, 4)), requires_grad=True)}

        def loss_fn():
            return sir_loss(params["z"], CFG)[0]

        assert ag.finite_diff_check(loss_fn, params).passed(tol=1e-4)
