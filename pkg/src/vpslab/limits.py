"""Reference solvers for the three effective systems and the relaxation sweep.

The fast-stress parameter drives the coupled system toward one of three
effective gradient flows, selected by the signs of the two dissipation
exponents: conserved diffuse-interface dynamics (label CH), its viscous
variant (vCH), and a mass-conserving relaxation dynamics (mAC).  All three
are discretised with the same semi-implicit minimising-movement structure as
the coupled stepper, so a sweep comparing the coupled runs against a limit
run measures the relaxation gap rather than a discretisation mismatch.

Every limit step solves one saddle-point system

    B (u+ - u_n)/dt + (-lap u+ + f(u+)) + lam * 1 = 0,    mean(u+ - u_n) = 0,

where B is the case's metric operator frozen at u_n: the inverse Neumann
Laplacian, the same plus the squared-coupling mobility A^2(u_n) tau(u_n),
or that mobility alone.  The multiplier lam absorbs every mean correction
of the projected strong forms exactly, because the discrete Laplacian
annihilates constants.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from vpslab.dissipation import DissipationWeights
from vpslab.energy import energy, energy_ch, gamma_recovery
from vpslab.fields import (
    Field,
    Grid,
    State,
    laplacian_values,
    norm_hm1av,
    norm_l2,
    project_zero_mean,
    stencil_matrix,
)
from vpslab.material import Model, ScalingParams, make_scaling_family
from vpslab.stepper import StepFailed, StepperConfig, run

_CASE_LABELS = ("CH", "vCH", "mAC")


@dataclass(frozen=True)
class ScalingCase:
    """One of the three admissible exponent sign patterns.

    The classification is total on {gamma * kappa_exp = 0}: zero/positive
    selects CH, zero/zero selects vCH, positive/zero selects mAC.
    """

    label: str
    gamma: float
    kappa_exp: float

    def __post_init__(self) -> None:
        if self.label not in _CASE_LABELS:
            raise ValueError(f"unknown case label {self.label!r}")
        if self.gamma < 0.0 or self.kappa_exp < 0.0:
            raise ValueError("exponents must be nonnegative")
        if self.gamma * self.kappa_exp != 0.0:
            raise ValueError("gamma * kappa_exp must vanish")
        expected = _classify(self.gamma, self.kappa_exp)
        if expected != self.label:
            raise ValueError(
                f"label {self.label!r} inconsistent with exponents "
                f"({self.gamma}, {self.kappa_exp}): expected {expected!r}"
            )

    @classmethod
    def classify(cls, gamma: float, kappa_exp: float) -> "ScalingCase":
        return cls(_classify(gamma, kappa_exp), gamma, kappa_exp)


def _classify(gamma: float, kappa_exp: float) -> str:
    if gamma == 0.0 and kappa_exp > 0.0:
        return "CH"
    if gamma == 0.0 and kappa_exp == 0.0:
        return "vCH"
    return "mAC"


@dataclass(frozen=True)
class RelaxReport:
    """Measured relaxation errors, aligned with the swept eps values."""

    eps_values: np.ndarray
    sup_t_u_error: np.ndarray
    sup_t_z_error: np.ndarray
    energy_gap: np.ndarray
    stress_bound_ok: Tuple[bool, ...]

    def __post_init__(self) -> None:
        n = len(self.eps_values)
        for name in ("sup_t_u_error", "sup_t_z_error", "energy_gap"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} misaligned with eps_values")
        if len(self.stress_bound_ok) != n:
            raise ValueError("stress_bound_ok misaligned with eps_values")


@functools.lru_cache(maxsize=8)
def _inverse_stencil_dense(grid: Grid) -> np.ndarray:
    """Pseudo-inverse of the negative Neumann Laplacian, constants killed.

    The stencil matrix applies the plain Laplacian, so its negation is the
    positive-semidefinite operator whose spectrum the mask filters.
    """
    dense = -stencil_matrix(grid).toarray()
    w, v = np.linalg.eigh(dense)
    inv_w = np.zeros_like(w)
    nonzero = w > 1e-8 * w[-1]
    inv_w[nonzero] = 1.0 / w[nonzero]
    return (v * inv_w) @ v.T


class _LimitNewtonFail(RuntimeError):
    """Internal: the saddle-point Newton iteration stalled."""


def _limit_step_values(
    u_n: np.ndarray,
    metric: np.ndarray,
    model: Model,
    dt: float,
    grid: Grid,
    tol: float,
    max_iter: int,
) -> np.ndarray:
    """Newton solve of the constrained step for one limit system.

    `metric` is the dense operator B frozen at u_n.  The residual involves
    a single Laplacian, so unlike the coupled stepper no special noise
    floor is needed beyond one matching guard; one cleanup update runs
    after acceptance, as there.
    """
    n = grid.n_cells
    h = grid.h
    sqrt_h = float(np.sqrt(h))
    eps_mach = float(np.finfo(np.float64).eps)
    neg_lap_dense = -stencil_matrix(grid).toarray()

    jac = np.zeros((n + 1, n + 1))
    jac[:n, n] = 1.0
    jac[n, :n] = 1.0 / n

    u = u_n.copy()
    lam = -float(np.mean(np.asarray(model.f(u_n), dtype=np.float64)))
    converged = False
    for _ in range(max_iter + 1):
        f_u = np.asarray(model.f(u), dtype=np.float64)
        force = -laplacian_values(u, h) + f_u
        r_main = metric @ ((u - u_n) / dt) + force + lam
        r_mean = float(np.mean(u - u_n))
        res = sqrt_h * float(np.linalg.norm(r_main)) + abs(r_mean)
        if converged:
            break
        scale = max(1.0, sqrt_h * float(np.linalg.norm(force)))
        floor = (
            2.0
            * eps_mach
            * (4.0 / h**2)
            * float(np.max(np.abs(u)))
            * float(np.sqrt(grid.length))
        )
        if res <= max(tol * scale, floor):
            converged = True

        f_prime = np.asarray(model.f_prime(u), dtype=np.float64)
        jac[:n, :n] = metric / dt + neg_lap_dense
        jac[np.arange(n), np.arange(n)] += f_prime
        rhs = np.concatenate([-r_main, [-r_mean]])
        delta = np.linalg.solve(jac, rhs)
        u = u + delta[:n]
        lam = lam + float(delta[n])

    if not converged:
        raise _LimitNewtonFail(f"no convergence within {max_iter} iterations")

    step = u - u_n
    return u_n + (step - float(np.mean(step)))


def _metric_for(kind: str, u_n: np.ndarray, model: Model, grid: Grid) -> np.ndarray:
    mobility = np.asarray(model.A(u_n), dtype=np.float64) ** 2 * np.asarray(
        model.tau(u_n), dtype=np.float64
    )
    if kind == "CH":
        return _inverse_stencil_dense(grid)
    if kind == "vCH":
        return _inverse_stencil_dense(grid) + np.diag(mobility)
    if kind == "mAC":
        return np.diag(mobility)
    raise ValueError(f"unknown limit kind {kind!r}")


def _checked_limit_step(
    u: Field,
    model: Model,
    dt: float,
    kind: str,
    tol: float,
    max_iter: int,
) -> Field:
    grid = u.grid
    metric = _metric_for(kind, u.values, model, grid)
    e_before = energy_ch(u, model)
    try:
        u_plus = _limit_step_values(
            u.values, metric, model, dt, grid, tol, max_iter
        )
    except _LimitNewtonFail as exc:
        raise StepFailed(f"{kind} step: {exc}") from exc
    out = Field(grid, u_plus)
    if energy_ch(out, model) > e_before + tol:
        raise StepFailed(f"{kind} step raised the energy at dt = {dt:.3e}")
    return out


def ch_step(
    u: Field,
    model: Model,
    dt: float,
    tol: float = 1e-11,
    max_iter: int = 50,
) -> Field:
    """One conserved-dynamics step: inverse-Laplacian metric alone."""
    return _checked_limit_step(u, model, dt, "CH", tol, max_iter)


def vch_step(
    u: Field,
    model: Model,
    dt: float,
    tol: float = 1e-11,
    max_iter: int = 50,
) -> Field:
    """One viscous-variant step: inverse Laplacian plus frozen mobility."""
    return _checked_limit_step(u, model, dt, "vCH", tol, max_iter)


def mac_step(
    u: Field,
    model: Model,
    dt: float,
    tol: float = 1e-11,
    max_iter: int = 50,
) -> Field:
    """One mass-conserving relaxation step: frozen mobility metric alone."""
    return _checked_limit_step(u, model, dt, "mAC", tol, max_iter)


def well_prepared(u0: Field, scaling: ScalingParams) -> State:
    """Initial pair on the constraint manifold of the scaled model.

    Placing the stress at K_eps(u0) zeroes the penalty part bitwise, so the
    scaled energy of the prepared state equals the limit energy of u0.
    """
    return gamma_recovery(u0, scaling)


_STEP_FOR_CASE = {"CH": ch_step, "vCH": vch_step, "mAC": mac_step}


def _limit_path(
    u0: Field,
    model: Model,
    case: ScalingCase,
    dt: float,
    n_steps: int,
) -> List[Field]:
    step = _STEP_FOR_CASE[case.label]
    path = [u0]
    u = u0
    for _ in range(n_steps):
        u = step(u, model, dt)
        path.append(u)
    return path


def _affine_sample(path: Sequence[Field], dt: float, t: float) -> np.ndarray:
    """Affine-in-time evaluation of a stored path of fields."""
    s = t / dt
    n0 = min(int(np.floor(s)), len(path) - 1)
    frac = s - n0
    if frac <= 1e-12 or n0 == len(path) - 1:
        return path[n0].values
    return (1.0 - frac) * path[n0].values + frac * path[n0 + 1].values


def relax_sweep(
    u0: Field,
    model_limit: Model,
    case: ScalingCase,
    eps_values: Sequence[float],
    cfg: StepperConfig,
    n_samples: int = 16,
    perturbation_size: float = 0.0,
) -> RelaxReport:
    """Run the coupled system across eps and measure the gap to the limit.

    The weights inside cfg are replaced per eps with the case's exponents;
    everything else (dt, horizon, Newton controls) is shared between the
    coupled runs and the limit path so spatial and temporal truncation
    errors cancel at leading order in the comparison.  Errors are measured
    at `n_samples` equispaced times via the affine interpolants.
    """
    eps_arr = np.asarray(list(eps_values), dtype=np.float64)
    if len(eps_arr) == 0:
        raise ValueError("eps_values must be non-empty")
    if len(eps_arr) > 1 and not np.all(np.diff(eps_arr) < 0.0):
        raise ValueError("eps_values must be strictly decreasing")

    grid = u0.grid
    t_end = cfg.t_end
    sample_times = np.linspace(0.0, t_end, n_samples)
    limit_path = _limit_path(u0, model_limit, case, cfg.dt, cfg.n_steps)
    limit_at = [_affine_sample(limit_path, cfg.dt, t) for t in sample_times]
    limit_final = limit_path[-1]
    e_limit_final = energy_ch(limit_final, model_limit)

    u_errors = np.zeros(len(eps_arr))
    z_errors = np.zeros(len(eps_arr))
    gaps = np.zeros(len(eps_arr))
    bounds_ok: List[bool] = []

    for i, eps in enumerate(eps_arr):
        scaling = make_scaling_family(
            model_limit, float(eps), case.gamma, case.kappa_exp,
            perturbation_size=perturbation_size,
        )
        model_eps = scaling.model_eps
        weights = DissipationWeights.for_scaling(
            float(eps), case.gamma, case.kappa_exp
        )
        cfg_eps = replace(cfg, weights=weights)
        init = well_prepared(u0, scaling)
        try:
            traj = run(init, model_eps, cfg_eps)
        except StepFailed as exc:
            raise StepFailed(f"eps = {eps}: {exc}") from exc

        budget = float(eps) * np.sqrt(
            2.0 * energy(init, model_eps, eps=float(eps)).total
        )
        ok = True
        u_sup = 0.0
        z_sup = 0.0
        for t, u_lim in zip(sample_times, limit_at):
            u_eps = _affine_sample([s.u for s in traj.states], cfg.dt, t)
            z_eps = _affine_sample([s.z for s in traj.states], cfg.dt, t)
            u_sup = max(u_sup, norm_l2(Field(grid, u_eps - u_lim)))
            k_lim = np.asarray(model_limit.K(u_lim), dtype=np.float64)
            z_sup = max(z_sup, norm_l2(Field(grid, z_eps - k_lim)))
            excess = z_eps - np.asarray(model_eps.K(u_eps), dtype=np.float64)
            if norm_l2(Field(grid, excess)) > budget + 1e-12:
                ok = False
        u_errors[i] = u_sup
        z_errors[i] = z_sup
        final = traj.states[-1]
        gaps[i] = abs(
            energy(final, model_eps, eps=float(eps)).total - e_limit_final
        )
        bounds_ok.append(ok)

    return RelaxReport(
        eps_values=eps_arr,
        sup_t_u_error=u_errors,
        sup_t_z_error=z_errors,
        energy_gap=gaps,
        stress_bound_ok=tuple(bounds_ok),
    )


def limit_subdifferential_residual(
    u: Field,
    xi: Field,
    model: Model,
    mu: Optional[Field] = None,
) -> float:
    """Dual-norm defect of the limit inclusion for a claimed (u, xi, mu).

    Evaluates -lap u + f(u) - A(u) xi - mean(f(u) - A(u) xi) - mu in the
    discrete dual norm.  With mu omitted this is the constitutive check of
    the relaxation dynamics (the zero-potential case); trajectory tests
    supply the step's potential instead.
    """
    grid = u.grid
    f_u = np.asarray(model.f(u.values), dtype=np.float64)
    a_xi = np.asarray(model.A(u.values), dtype=np.float64) * xi.values
    combined = f_u - a_xi
    defect = (
        -laplacian_values(u.values, grid.h)
        + combined
        - float(np.mean(combined))
    )
    if mu is not None:
        defect = defect - mu.values
    return norm_hm1av(project_zero_mean(Field(grid, defect)))
