"""Balance residuals, stability fits, inequality suites, rate fitting."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpslab.diagnostics import (
    NOT_APPLICABLE,
    DegenerateInput,
    MissingCovectors,
    NotApplicable,
    RateFit,
    StabilityReport,
    _needed_constant,
    edb_residual,
    fit_rate,
    monotonicity_suite,
    original_variables_residual,
    stability_harness,
    subgradient_suite,
    w_estimate_suite,
)
from vpslab.dissipation import DissipationWeights
from vpslab.energy import FITTED_C1_DEFAULT
from vpslab.fields import Field, Grid, State, cosine_mode, norm_H, project_zero_mean
from vpslab.material import (
    constant_coupling,
    default_asymmetric_A_tau,
    default_double_well,
)
from vpslab.stepper import StepperConfig, run, spinodal_state

UNIT_WEIGHTS = DissipationWeights.for_scaling()


@pytest.fixture(scope="module")
def asym():
    return default_asymmetric_A_tau()


@pytest.fixture(scope="module")
def well():
    return default_double_well()


@pytest.fixture(scope="module")
def grid256():
    return Grid(1.0, 256)


@pytest.fixture(scope="module")
def grid128():
    return Grid(1.0, 128)


@pytest.fixture(scope="module")
def spinodal(grid256, asym):
    return spinodal_state(grid256, asym, 0.5, 0.05, 1)


@pytest.fixture(scope="module")
def ladder(spinodal, asym):
    """Spinodal trajectories to T = 0.1 for each step size used below."""
    out = {}
    for dt in (4e-3, 2e-3, 1e-3, 5e-4, 2.5e-4):
        cfg = StepperConfig(dt=dt, t_end=0.1, weights=UNIT_WEIGHTS)
        out[dt] = run(spinodal, asym, cfg)
    return out


@pytest.fixture(scope="module")
def stationary(grid256, asym):
    """A state the dynamics leaves alone: constant u with matched stress."""
    m = 0.3
    u = Field(grid256, np.full(256, m))
    z = Field(grid256, np.asarray(asym.K(u.values)))
    cfg = StepperConfig(dt=1e-3, t_end=1e-2, weights=UNIT_WEIGHTS)
    return run(State.of(u, z), asym, cfg)


class TestFitRate:
    def test_identity_data_has_slope_one(self):
        xs = np.array([1.0, 0.5, 0.25, 0.125])
        fit = fit_rate(xs, xs)
        assert fit.slope == pytest.approx(1.0, abs=1e-12)
        assert fit.intercept == pytest.approx(0.0, abs=1e-12)

    def test_square_root_data_has_slope_half(self):
        xs = np.array([1.0, 0.5, 0.25, 0.125])
        fit = fit_rate(xs, np.sqrt(xs))
        assert fit.slope == pytest.approx(0.5, abs=1e-12)

    def test_constant_data_has_slope_zero(self):
        xs = np.array([1e-2, 1e-3, 1e-4])
        fit = fit_rate(xs, np.full(3, 7.5))
        assert fit.slope == pytest.approx(0.0, abs=1e-12)

    def test_too_few_points_rejected(self):
        with pytest.raises(DegenerateInput, match="3 points"):
            fit_rate([1.0, 0.5], [1.0, 0.5])

    def test_nonpositive_values_rejected(self):
        with pytest.raises(DegenerateInput, match="positive"):
            fit_rate([1.0, 0.5, 0.25], [1.0, 0.0, 0.25])

    def test_increasing_ladder_rejected(self):
        with pytest.raises(DegenerateInput, match="decreasing"):
            fit_rate([0.25, 0.5, 1.0], [1.0, 1.0, 1.0])

    def test_ratefit_rejects_mismatched_lengths(self):
        with pytest.raises(DegenerateInput, match="equal length"):
            RateFit(
                xs=np.array([1.0, 0.5, 0.25]),
                ys=np.array([1.0, 0.5]),
                slope=1.0,
                intercept=0.0,
            )

    @given(
        p=st.floats(min_value=-3.0, max_value=3.0),
        log_c=st.floats(min_value=-3.0, max_value=3.0),
        x0=st.floats(min_value=0.1, max_value=10.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_exact_power_law_is_recovered(self, p, log_c, x0):
        xs = x0 * 2.0 ** -np.arange(5)
        ys = 10.0**log_c * xs**p
        fit = fit_rate(xs, ys)
        assert fit.slope == pytest.approx(p, abs=1e-9)


class TestEdbResidual:
    def test_stationary_run_balances_exactly(self, stationary, asym):
        r = edb_residual(stationary, asym, UNIT_WEIGHTS)
        assert r[0] == 0.0
        assert np.all(np.abs(r) <= 1e-12)

    def test_residual_is_one_sided(self, ladder, asym):
        traj = ladder[1e-3]
        r = edb_residual(traj, asym, UNIT_WEIGHTS)
        bound = len(r) * 1e-11
        assert np.max(r) <= bound
        assert r[-1] < 0.0

    def test_residual_shrinks_at_first_order(self, ladder, asym):
        dts = [4e-3, 2e-3, 1e-3]
        finals = [
            abs(edb_residual(ladder[dt], asym, UNIT_WEIGHTS)[-1]) for dt in dts
        ]
        assert fit_rate(dts, finals).slope >= 0.8

    def test_missing_covectors_detected(self, ladder, asym):
        traj = ladder[4e-3]
        gutted = dataclasses.replace(
            traj, covectors=(None,) * len(traj.covectors)
        )
        with pytest.raises(MissingCovectors):
            edb_residual(gutted, asym, UNIT_WEIGHTS)


class TestStabilityHarness:
    def make_perturbation(self, grid, size=1e-3):
        du = Field(grid, size * cosine_mode(grid, 2).values)
        dz = Field(grid, size * cosine_mode(grid, 1).values)
        return du, dz

    def test_initial_separation_matches_perturbation_norm(
        self, grid256, spinodal, asym
    ):
        du, dz = self.make_perturbation(grid256)
        cfg = StepperConfig(dt=2e-3, t_end=2e-2, weights=UNIT_WEIGHTS)
        report = stability_harness(spinodal.u, spinodal.z, (du, dz), asym, cfg)
        expected = norm_H(project_zero_mean(du), dz)
        assert report.diff_norm[0] == pytest.approx(expected, rel=1e-12)
        assert np.all(report.gronwall_integrand >= 1.0)

    def test_fitted_constant_stable_under_dt_refinement(
        self, grid256, spinodal, asym
    ):
        du, dz = self.make_perturbation(grid256)
        fits = []
        for dt in (2e-3, 1e-3):
            cfg = StepperConfig(dt=dt, t_end=0.1, weights=UNIT_WEIGHTS)
            report = stability_harness(
                spinodal.u, spinodal.z, (du, dz), asym, cfg
            )
            assert isinstance(report.fitted_C, float)
            assert np.isfinite(report.fitted_C)
            fits.append(report.fitted_C)
        ratio = abs(fits[0]) / abs(fits[1])
        assert 0.5 <= ratio <= 2.0

    def test_constant_material_gives_unit_integrand(
        self, grid256, spinodal, well
    ):
        du, dz = self.make_perturbation(grid256)
        cfg = StepperConfig(dt=2e-3, t_end=2e-2, weights=UNIT_WEIGHTS)
        report = stability_harness(spinodal.u, spinodal.z, (du, dz), well, cfg)
        assert np.all(report.gronwall_integrand == 1.0)

    def test_zero_perturbation_reports_not_applicable(
        self, grid256, spinodal, asym
    ):
        zero = Field(grid256, np.zeros(256))
        cfg = StepperConfig(dt=2e-3, t_end=2e-2, weights=UNIT_WEIGHTS)
        report = stability_harness(
            spinodal.u, spinodal.z, (zero, zero), asym, cfg
        )
        assert np.all(report.diff_norm == 0.0)
        assert report.fitted_C is NOT_APPLICABLE

    def test_mass_changing_perturbation_rejected(self, grid256, spinodal, asym):
        du = Field(grid256, np.full(256, 1e-3))
        dz = Field(grid256, np.zeros(256))
        cfg = StepperConfig(dt=2e-3, t_end=2e-2, weights=UNIT_WEIGHTS)
        with pytest.raises(ValueError, match="mean-free"):
            stability_harness(spinodal.u, spinodal.z, (du, dz), asym, cfg)

    def test_report_validates_alignment(self):
        with pytest.raises(ValueError, match="misaligned"):
            StabilityReport(
                times=np.array([0.0, 1.0]),
                diff_norm=np.array([1.0]),
                gronwall_integrand=np.array([1.0, 1.0]),
                fitted_C=0.0,
            )

    def test_report_rejects_negative_norms(self):
        with pytest.raises(ValueError, match="nonnegative"):
            StabilityReport(
                times=np.array([0.0, 1.0]),
                diff_norm=np.array([1.0, -1.0]),
                gronwall_integrand=np.array([1.0, 1.0]),
                fitted_C=0.0,
            )

    def test_sentinel_prints_its_name(self):
        assert repr(NOT_APPLICABLE) == "NotApplicable"
        assert isinstance(NOT_APPLICABLE, NotApplicable)


class TestSubgradientSuite:
    def test_thousand_samples_no_violations(self, grid128, asym):
        report = subgradient_suite(grid128, asym, 1000, 42)
        assert report.violations == 0
        assert report.min_margin > 0.0
        assert len(report.margins) == 1000

    def test_constant_material_no_violations(self, grid128, well):
        report = subgradient_suite(grid128, well, 1000, 42)
        assert report.violations == 0

    def test_suite_is_deterministic(self, grid128, asym):
        first = subgradient_suite(grid128, asym, 50, 42)
        second = subgradient_suite(grid128, asym, 50, 42)
        assert np.array_equal(first.margins, second.margins)

    def test_empty_suite_rejected(self, grid128, asym):
        with pytest.raises(ValueError, match="at least 1"):
            subgradient_suite(grid128, asym, 0, 42)

    @given(seed=st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_any_seed_has_no_violations(self, seed):
        model = default_asymmetric_A_tau()
        report = subgradient_suite(Grid(1.0, 32), model, 20, seed)
        assert report.violations == 0


class TestMonotonicitySuite:
    def test_identical_quadruple_needs_no_constant(self, grid128, asym):
        u = Field(grid128, 0.5 + 0.2 * cosine_mode(grid128, 1).values)
        z = Field(grid128, 1.0 + 0.3 * cosine_mode(grid128, 2).values)
        state = State.of(u, z)
        assert _needed_constant(grid128, asym, state, state, u, u) == 0.0

    def test_fit_is_positive_and_refinement_stable(self, asym):
        fits = {}
        for n_cells in (128, 256):
            report = monotonicity_suite(Grid(4.0, n_cells), asym, 400, 42)
            assert len(report.c1_values) == 400
            fits[n_cells] = report.max_c1
        assert 0.02 < fits[128] < 0.14
        assert 0.5 <= fits[128] / fits[256] <= 2.0

    def test_constant_material_fit_is_finite(self, well):
        report = monotonicity_suite(Grid(4.0, 128), well, 400, 42)
        assert np.isfinite(report.max_c1)
        assert 0.05 < report.max_c1 < 0.2

    def test_default_prefactor_covers_the_desk_fits(self, asym, well):
        for model in (asym, well):
            report = monotonicity_suite(Grid(4.0, 128), model, 400, 42)
            assert report.max_c1 <= FITTED_C1_DEFAULT

    def test_empty_suite_rejected(self, grid128, asym):
        with pytest.raises(ValueError, match="at least 1"):
            monotonicity_suite(grid128, asym, 0, 42)


class TestWEstimateSuite:
    def test_ratio_bounded_and_stable_under_refinement(self, asym):
        maxima = {}
        for n_cells in (128, 256):
            top = n_cells // 4
            report = w_estimate_suite(Grid(1.0, n_cells), asym, 5 * top)
            # one amplitude rung is zero: those samples are skipped
            assert len(report.ratios) == 4 * top
            assert np.all(report.ratios > 0.0)
            maxima[n_cells] = report.max_ratio
        assert 0.2 < maxima[128] < 0.5
        assert maxima[128] == pytest.approx(maxima[256], rel=0.02)

    def test_small_suite_still_reports(self, grid128, asym):
        report = w_estimate_suite(grid128, asym, 3)
        assert report.n_samples == 3
        assert np.all(np.isfinite(report.ratios))

    def test_empty_suite_rejected(self, grid128, asym):
        with pytest.raises(ValueError, match="at least 1"):
            w_estimate_suite(grid128, asym, 0)


class TestOriginalVariablesResidual:
    def test_stationary_run_has_zero_defect(self, stationary, asym):
        r = original_variables_residual(stationary, asym)
        assert r[0] == 0.0
        assert np.max(np.abs(r)) <= 1e-12

    def test_constant_coefficients_are_exact(self, grid256):
        model = constant_coupling(0.8, 0.6)
        init = spinodal_state(grid256, model, 0.5, 0.05, 1)
        cfg = StepperConfig(dt=1e-4, t_end=5e-3, weights=UNIT_WEIGHTS)
        traj = run(init, model, cfg)
        r = original_variables_residual(traj, model)
        assert np.max(r) <= 1e-8

    def test_varying_coefficients_shrink_at_first_order(self, ladder, asym):
        dts = [2e-3, 1e-3, 5e-4, 2.5e-4]
        sups = [
            np.max(original_variables_residual(ladder[dt], asym)) for dt in dts
        ]
        assert fit_rate(dts, sups).slope >= 0.8

    def test_stepless_trajectory_rejected(self, grid256, asym):
        u = Field(grid256, np.full(256, 0.3))
        z = Field(grid256, np.asarray(asym.K(u.values)))
        cfg = StepperConfig(dt=1e-3, t_end=0.0, weights=UNIT_WEIGHTS)
        traj = run(State.of(u, z), asym, cfg)
        with pytest.raises(ValueError, match="at least one step"):
            original_variables_residual(traj, asym)
