"""Grid, field and norm layer: stencil oracle, inverses, norm identities."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpslab.fields import (
    Field,
    Grid,
    GridMismatch,
    NonZeroMean,
    State,
    cosine_mode,
    inner_l2,
    inv_neumann_laplacian,
    mean,
    neumann_laplacian,
    norm_H,
    norm_h1av,
    norm_h2,
    norm_hm1av,
    norm_l2,
    project_zero_mean,
    stencil_matrix,
)


def dense_stencil(grid: Grid) -> np.ndarray:
    """Independent dense build of the reflecting-ghost Laplacian.

    Assembled row by row from the ghost-cell definition, deliberately not
    sharing code with the implementation under test.
    """
    n = grid.n_cells
    mat = np.zeros((n, n))
    for j in range(n):
        left = j - 1 if j > 0 else 0
        right = j + 1 if j < n - 1 else n - 1
        mat[j, left] += 1.0
        mat[j, j] -= 2.0
        mat[j, right] += 1.0
    return mat / grid.h**2


def random_field(grid: Grid, rng: np.random.Generator, zero_mean: bool = False) -> Field:
    vals = rng.standard_normal(grid.n_cells)
    if zero_mean:
        vals -= vals.mean()
    return Field(grid, vals)


class TestStencilOracle:
    """The analytic eigenpairs against a dense eigendecomposition."""

    def test_dense_eigendecomposition_matches_analytic_pairs(self):
        grid = Grid(length=1.0, n_cells=32)
        eigvals, eigvecs = np.linalg.eigh(-dense_stencil(grid))
        # eigh sorts ascending; the analytic eigenvalues come out ascending too.
        analytic = grid.eigenvalues
        assert np.allclose(eigvals, analytic, rtol=1e-12, atol=1e-9)
        for k in range(grid.n_cells):
            phi = cosine_mode(grid, k).values
            phi_hat = eigvecs[:, k]
            # Same eigenvector up to sign and normalisation.
            phi_unit = phi / np.linalg.norm(phi)
            agreement = abs(np.dot(phi_unit, phi_hat))
            assert agreement == pytest.approx(1.0, abs=1e-10)

    def test_stencil_applied_to_cosine_mode(self):
        grid = Grid(length=2.5, n_cells=48)
        for k in (1, 5, 31):
            phi = cosine_mode(grid, k)
            lap = neumann_laplacian(phi)
            lam_k = grid.eigenvalues[k]
            assert np.allclose(lap.values, -lam_k * phi.values, atol=1e-9 * lam_k)

    def test_operator_matches_dense_matrix_on_random_fields(self):
        grid = Grid(length=1.0, n_cells=37)
        dense = dense_stencil(grid)
        rng = np.random.default_rng(7)
        for _ in range(5):
            f = random_field(grid, rng)
            assert np.allclose(neumann_laplacian(f).values, dense @ f.values,
                               rtol=1e-13, atol=1e-8)

    def test_sparse_matrix_agrees_with_dense(self):
        grid = Grid(length=0.7, n_cells=12)
        assert np.allclose(stencil_matrix(grid).toarray(), dense_stencil(grid))


class TestTypes:
    def test_grid_validation(self):
        with pytest.raises(ValueError):
            Grid(length=1.0, n_cells=3)
        with pytest.raises(ValueError):
            Grid(length=-1.0, n_cells=16)

    def test_field_shape_and_finiteness(self):
        grid = Grid(1.0, 8)
        with pytest.raises(ValueError):
            Field(grid, np.zeros(7))
        with pytest.raises(ValueError):
            Field(grid, np.full(8, np.nan))

    def test_field_values_frozen(self):
        grid = Grid(1.0, 8)
        f = Field(grid, np.ones(8))
        with pytest.raises(ValueError):
            f.values[0] = 2.0

    def test_state_mass_consistency(self):
        grid = Grid(1.0, 16)
        u = Field(grid, np.full(16, 0.5))
        z = Field(grid, np.zeros(16))
        State(u, z, 0.5)
        with pytest.raises(ValueError):
            State(u, z, 0.5 + 1e-8)

    def test_state_of_reads_mass(self):
        grid = Grid(1.0, 16)
        rng = np.random.default_rng(3)
        u = random_field(grid, rng)
        st_ = State.of(u, u)
        assert st_.mass == pytest.approx(float(np.mean(u.values)), abs=0.0)

    def test_covector_rejects_mu_with_mass(self):
        from vpslab.fields import Covector

        grid = Grid(1.0, 8)
        with pytest.raises(NonZeroMean):
            Covector(Field(grid, np.ones(8)), Field(grid, np.zeros(8)))

    def test_grid_mismatch_raises(self):
        f = Field(Grid(1.0, 8), np.ones(8))
        g = Field(Grid(1.0, 16), np.ones(16))
        with pytest.raises(GridMismatch):
            inner_l2(f, g)


class TestLaplacianAndInverse:
    def test_constant_field_maps_to_zero(self):
        grid = Grid(3.0, 21)
        f = Field(grid, np.full(21, 4.2))
        assert np.all(neumann_laplacian(f).values == 0.0)

    def test_output_mean_is_zero(self):
        grid = Grid(1.0, 64)
        rng = np.random.default_rng(11)
        for _ in range(4):
            f = random_field(grid, rng)
            lap = neumann_laplacian(f)
            assert abs(mean(lap)) < 1e-9 * np.max(np.abs(lap.values))

    def test_inverse_residual_contract(self):
        rng = np.random.default_rng(5)
        for n in (64, 256, 512):
            grid = Grid(1.0, n)
            f = random_field(grid, rng, zero_mean=True)
            w = inv_neumann_laplacian(f)
            residual = neumann_laplacian(w).values + f.values
            assert np.linalg.norm(residual) <= 1e-11 * np.linalg.norm(f.values)
            assert abs(mean(w)) < 1e-13

    def test_inverse_then_forward_is_identity(self):
        grid = Grid(2.0, 128)
        rng = np.random.default_rng(9)
        f = random_field(grid, rng, zero_mean=True)
        g = neumann_laplacian(inv_neumann_laplacian(f))
        assert np.allclose(-g.values, f.values, rtol=0, atol=1e-10 * np.max(np.abs(f.values)))

    def test_forward_then_inverse_is_identity_on_mean_free(self):
        grid = Grid(1.0, 96)
        rng = np.random.default_rng(13)
        f = random_field(grid, rng, zero_mean=True)
        minus_lap = Field(grid, -neumann_laplacian(f).values)
        g = inv_neumann_laplacian(minus_lap)
        assert np.allclose(g.values, f.values, atol=1e-10 * np.max(np.abs(f.values)))

    def test_inverse_rejects_field_with_mass(self):
        grid = Grid(1.0, 32)
        with pytest.raises(NonZeroMean):
            inv_neumann_laplacian(Field(grid, np.ones(32)))

    def test_inverse_on_eigenmode_divides_by_eigenvalue(self):
        grid = Grid(1.0, 40)
        k = 6
        phi = cosine_mode(grid, k)
        w = inv_neumann_laplacian(phi)
        assert np.allclose(w.values, phi.values / grid.eigenvalues[k], atol=1e-14)


class TestNorms:
    def test_l2_of_cosine_mode(self):
        # h sum cos^2(k pi (j+1/2)/N) = L/2 exactly for 1 <= k <= N-1.
        grid = Grid(1.0, 64)
        for k in (1, 7, 63):
            assert norm_l2(cosine_mode(grid, k)) == pytest.approx(np.sqrt(0.5), rel=1e-13)

    def test_l2_matches_quadrature_definition(self):
        grid = Grid(0.5, 16)
        rng = np.random.default_rng(2)
        f = random_field(grid, rng)
        assert norm_l2(f) == pytest.approx(np.sqrt(grid.h * np.sum(f.values**2)), rel=1e-14)

    def test_hm1av_of_eigenmode(self):
        grid = Grid(1.0, 64)
        for k in (1, 5, 20):
            phi = cosine_mode(grid, k)
            expected = norm_l2(phi) / np.sqrt(grid.eigenvalues[k])
            assert norm_hm1av(phi) == pytest.approx(expected, rel=1e-12)

    def test_h1av_of_linear_profile(self):
        # f = x has unit slope: seminorm^2 = sum over interior faces of h * 1.
        grid = Grid(1.0, 50)
        f = Field(grid, grid.x)
        expected = np.sqrt(grid.h * (grid.n_cells - 1))
        assert norm_h1av(f) == pytest.approx(expected, rel=1e-13)

    def test_norm_H_combines_components(self):
        grid = Grid(1.0, 32)
        rng = np.random.default_rng(17)
        du = random_field(grid, rng, zero_mean=True)
        dz = random_field(grid, rng)
        expected = np.hypot(norm_hm1av(du), norm_l2(dz))
        assert norm_H(du, dz) == pytest.approx(expected, rel=1e-14)

    def test_summation_by_parts(self):
        # (-lap f, g) = sum of face differences: exactness to 1e-12 relative.
        grid = Grid(1.0, 128)
        rng = np.random.default_rng(23)
        for _ in range(6):
            f = random_field(grid, rng)
            g = random_field(grid, rng)
            lhs = inner_l2(neumann_laplacian(f), g)
            rhs = -np.sum(np.diff(f.values) * np.diff(g.values)) / grid.h
            scale = max(abs(lhs), abs(rhs), 1.0)
            assert abs(lhs - rhs) <= 1e-12 * scale

    def test_h2_norm_definition(self):
        grid = Grid(1.0, 32)
        rng = np.random.default_rng(29)
        f = random_field(grid, rng)
        expected = np.sqrt(
            norm_l2(f) ** 2 + norm_h1av(f) ** 2 + norm_l2(neumann_laplacian(f)) ** 2
        )
        assert norm_h2(f) == pytest.approx(expected, rel=1e-14)


class TestInterpolationInequality:
    """L2 is controlled by the H1 x dual-norm product on mean-free fields."""

    def test_on_many_random_fields(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for trial in range(1000):
            n = int(rng.integers(8, 96))
            grid = Grid(1.0, n)
            f = random_field(grid, rng, zero_mean=True)
            if norm_l2(f) < 1e-12:
                continue
            product = norm_h1av(f) * norm_hm1av(f)
            ratio = norm_l2(f) ** 2 / product
            worst = max(worst, ratio)
            assert ratio <= 1.0 + 1e-12
        assert worst > 0.5  # the bound is active, not vacuous

    def test_laplacian_to_h2_ratio_is_finite(self):
        # Recorded diagnostic: ||lap f|| / ||f||_H2 over random smooth fields.
        rng = np.random.default_rng(3)
        grid = Grid(1.0, 128)
        ratios = []
        for _ in range(50):
            coeffs = rng.standard_normal(6) / (1 + np.arange(6)) ** 2
            vals = sum(
                c * np.cos((k + 1) * np.pi * grid.x / grid.length)
                for k, c in enumerate(coeffs)
            )
            f = Field(grid, vals)
            ratios.append(norm_l2(neumann_laplacian(f)) / norm_h2(f))
        ratios = np.array(ratios)
        assert np.all(np.isfinite(ratios))
        assert np.all(ratios < 1.0)


@given(
    n=st.integers(min_value=4, max_value=64),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
@settings(max_examples=60, deadline=None)
def test_projection_makes_inverse_laplacian_applicable(n, seed):
    grid = Grid(1.0, n)
    rng = np.random.default_rng(seed)
    f = Field(grid, rng.uniform(-3, 3, n))
    g = project_zero_mean(f)
    w = inv_neumann_laplacian(g)  # must not raise
    assert abs(mean(w)) < 1e-12


@given(
    n=st.integers(min_value=4, max_value=64),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
@settings(max_examples=60, deadline=None)
def test_cauchy_schwarz_in_dual_pairing(n, seed):
    grid = Grid(1.0, n)
    rng = np.random.default_rng(seed)
    f = Field(grid, rng.standard_normal(n))
    g = Field(grid, rng.standard_normal(n))
    f0, g0 = project_zero_mean(f), project_zero_mean(g)
    pairing = inner_l2(f0, inv_neumann_laplacian(g0))
    bound = norm_hm1av(f0) * norm_hm1av(g0)
    assert abs(pairing) <= bound * (1 + 1e-9) + 1e-12
