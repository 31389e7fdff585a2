"""Dissipation metric: block operators, potentials, Fenchel identity."""

import numpy as np
import pytest

from vpslab.dissipation import (
    DissipationWeights,
    R_star_value,
    R_value,
    apply_G,
    apply_K,
    effective_R,
    pairing,
    velocity_norm_H,
)
from vpslab.fields import (
    Covector,
    Field,
    Grid,
    NonZeroMean,
    cosine_mode,
    inner_l2,
    norm_h1av,
    norm_l2,
)
from vpslab.material import constant_coupling, default_asymmetric_A_tau


@pytest.fixture(scope="module")
def asym():
    return default_asymmetric_A_tau()


@pytest.fixture
def grid():
    return Grid(1.0, 64)


def bound_weights(model, grid, u_val=0.5, eps=1.0, gamma=0.0, kappa=0.0):
    u = Field(grid, np.full(grid.n_cells, u_val))
    return DissipationWeights.for_scaling(eps, gamma, kappa).bind(model, u)


def random_velocity(grid, rng):
    v = rng.standard_normal(grid.n_cells)
    v -= v.mean()
    y = rng.standard_normal(grid.n_cells)
    return Field(grid, v), Field(grid, y)


class TestWeights:
    def test_scaling_exponents(self):
        w = DissipationWeights.for_scaling(eps=0.5, gamma=2.0, kappa_exp=0.0)
        assert w.w_u == pytest.approx(0.25)
        assert w.w_z_base == 1.0

    def test_unbound_use_is_an_error(self, grid):
        w = DissipationWeights.for_scaling()
        v = Field(grid, np.zeros(grid.n_cells))
        with pytest.raises(ValueError, match="bind"):
            apply_G(w, v, v)

    def test_bound_tau_in_model_range(self, asym, grid):
        rng = np.random.default_rng(0)
        u = Field(grid, rng.uniform(-2, 2, grid.n_cells))
        w = DissipationWeights.for_scaling().bind(asym, u)
        assert np.all(w.tau_at.values >= asym.tau_lo)
        assert np.all(w.tau_at.values <= asym.tau_hi)

    def test_nonpositive_weights_rejected(self):
        with pytest.raises(ValueError):
            DissipationWeights(w_u=0.0, w_z_base=1.0, eps=1.0)


class TestBlockOperators:
    def test_pure_stress_velocity(self, asym, grid):
        w = bound_weights(asym, grid, u_val=0.5)
        y = Field(grid, np.linspace(-1, 1, grid.n_cells))
        cov = apply_G(w, Field(grid, np.zeros(grid.n_cells)), y)
        assert np.all(cov.mu.values == 0.0)
        assert np.allclose(cov.xi.values, w.tau_at.values * y.values)

    def test_constant_tau_two(self, grid):
        model = constant_coupling(1.0, 2.0)
        w = bound_weights(model, grid)
        y = Field(grid, np.ones(grid.n_cells))
        cov = apply_G(w, Field(grid, np.zeros(grid.n_cells)), y)
        assert np.allclose(cov.xi.values, 2.0)

    def test_round_trip(self, asym, grid):
        rng = np.random.default_rng(5)
        w = bound_weights(asym, grid, u_val=0.3, eps=0.7, gamma=1.0)
        v, y = random_velocity(grid, rng)
        v2, y2 = apply_K(w, apply_G(w, v, y))
        assert np.allclose(v2.values, v.values, atol=1e-10 * np.max(np.abs(v.values)))
        assert np.allclose(y2.values, y.values, atol=1e-12)

    def test_eigenmode_through_inverse_metric(self, asym, grid):
        k = 4
        w = bound_weights(asym, grid)
        mu = Field(grid, cosine_mode(grid, k).values / grid.eigenvalues[k])
        cov = Covector(mu, Field(grid, np.zeros(grid.n_cells)))
        v, _ = apply_K(w, cov)
        assert np.allclose(v.values, cosine_mode(grid, k).values, atol=1e-11)

    def test_mean_free_precondition(self, asym, grid):
        w = bound_weights(asym, grid)
        v = Field(grid, np.ones(grid.n_cells))
        with pytest.raises(NonZeroMean):
            apply_G(w, v, v)


class TestPotentials:
    def test_zero_values(self, asym, grid):
        w = bound_weights(asym, grid)
        zero = Field(grid, np.zeros(grid.n_cells))
        assert R_value(w, zero, zero) == 0.0
        assert R_star_value(w, Covector(zero, zero)) == 0.0

    def test_coercivity_sandwich(self, asym, grid):
        rng = np.random.default_rng(12)
        u = Field(grid, rng.uniform(-1, 2, grid.n_cells))
        w = DissipationWeights.for_scaling().bind(asym, u)
        lo = min(1.0, asym.tau_lo) / 2.0
        hi = max(1.0, asym.tau_hi) / 2.0
        for _ in range(40):
            v, y = random_velocity(grid, rng)
            r = R_value(w, v, y)
            nsq = velocity_norm_H(v, y) ** 2
            assert lo * nsq * (1 - 1e-11) <= r <= hi * nsq * (1 + 1e-11)

    def test_dual_sandwich(self, asym, grid):
        rng = np.random.default_rng(21)
        u = Field(grid, rng.uniform(-1, 2, grid.n_cells))
        w = DissipationWeights.for_scaling().bind(asym, u)
        lo = min(1.0, 1.0 / asym.tau_hi) / 2.0
        hi = max(1.0, 1.0 / asym.tau_lo) / 2.0
        for _ in range(40):
            mu_vals = rng.standard_normal(grid.n_cells)
            mu = Field(grid, mu_vals - mu_vals.mean())
            xi = Field(grid, rng.standard_normal(grid.n_cells))
            c = Covector(mu, xi)
            rs = R_star_value(w, c)
            dual_sq = norm_h1av(mu) ** 2 + norm_l2(xi) ** 2
            assert lo * dual_sq * (1 - 1e-11) <= rs <= hi * dual_sq * (1 + 1e-11)

    def test_fenchel_identity_at_matched_points(self, asym, grid):
        rng = np.random.default_rng(33)
        u = Field(grid, rng.uniform(-0.5, 1.5, grid.n_cells))
        for gamma, kappa, eps in ((0.0, 0.0, 1.0), (1.0, 0.0, 0.3), (0.0, 2.0, 0.6)):
            w = DissipationWeights.for_scaling(eps, gamma, kappa).bind(asym, u)
            for _ in range(20):
                v, y = random_velocity(grid, rng)
                c = apply_G(w, v, y)
                lhs = R_value(w, v, y) + R_star_value(w, c)
                rhs = pairing(c, v, y)
                assert abs(lhs - rhs) <= 1e-11 * max(1.0, abs(rhs))

    def test_metric_symmetry(self, asym, grid):
        rng = np.random.default_rng(44)
        u = Field(grid, rng.uniform(-1, 2, grid.n_cells))
        w = DissipationWeights.for_scaling(0.5, 0.0, 1.0).bind(asym, u)
        for _ in range(25):
            v1, y1 = random_velocity(grid, rng)
            v2, y2 = random_velocity(grid, rng)
            lhs = pairing(apply_G(w, v1, y1), v2, y2)
            rhs = pairing(apply_G(w, v2, y2), v1, y1)
            assert abs(lhs - rhs) <= 1e-11 * max(1.0, abs(lhs), abs(rhs))

    def test_positive_definiteness_with_explicit_constant(self, asym, grid):
        rng = np.random.default_rng(55)
        u = Field(grid, rng.uniform(-1, 2, grid.n_cells))
        w = DissipationWeights.for_scaling(0.4, 1.0, 0.0).bind(asym, u)
        lam_max = float(grid.eigenvalues[-1])
        floor = min(w.w_u / lam_max, w.w_z_base * asym.tau_lo)
        for _ in range(25):
            v, y = random_velocity(grid, rng)
            quad = pairing(apply_G(w, v, y), v, y)
            l2_sq = norm_l2(v) ** 2 + norm_l2(y) ** 2
            assert quad >= floor * l2_sq * (1 - 1e-10)
            assert quad > 0.0


class TestEffectiveR:
    def test_zero_velocity(self, asym, grid):
        zero = Field(grid, np.zeros(grid.n_cells))
        u = Field(grid, np.full(grid.n_cells, 0.4))
        for kind in ("CH", "vCH", "mAC"):
            assert effective_R(kind, asym, u, zero) == 0.0

    def test_constant_coupling_mac_form(self, grid):
        model = constant_coupling(0.8, 1.3)
        rng = np.random.default_rng(66)
        v, _ = random_velocity(grid, rng)
        u = Field(grid, np.zeros(grid.n_cells))
        expected = 0.5 * 0.8**2 * 1.3 * norm_l2(v) ** 2
        assert effective_R("mAC", model, u, v) == pytest.approx(expected, rel=1e-12)

    def test_vch_is_sum(self, asym, grid):
        rng = np.random.default_rng(77)
        u = Field(grid, rng.uniform(0, 1, grid.n_cells))
        v, _ = random_velocity(grid, rng)
        total = effective_R("vCH", asym, u, v)
        parts = effective_R("CH", asym, u, v) + effective_R("mAC", asym, u, v)
        assert total == pytest.approx(parts, rel=1e-13)

    def test_unknown_kind_rejected(self, asym, grid):
        zero = Field(grid, np.zeros(grid.n_cells))
        with pytest.raises(ValueError, match="unknown"):
            effective_R("AC", asym, zero, zero)
