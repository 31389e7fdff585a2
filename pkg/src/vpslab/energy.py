"""Driving functional, its differential, and the convexity moduli.

The free energy combines a Ginzburg-Landau part in the order parameter with
a quadratic penalty tying the transformed stress variable z to the primitive
K(u); the penalty weight 1/(2 eps^2) makes the same code serve the unscaled
functional (eps = 1) and every relaxation run.  The differential is computed
in strong discrete form: a chemical potential made mean-free by subtracting
the average force, and the stress force (z - K(u))/eps^2.

The moduli lambda (semiconvexity along the state metric), Lambda and omega
(perturbed-monotonicity coefficients) are explicit functions of the material
bounds and the max-norm of the stress excess; only the prefactor C1 inside
Lambda is an empirical constant, defaulted here from the fit that the
diagnostics suite records.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vpslab.fields import (
    Covector,
    Field,
    State,
    neumann_laplacian,
    norm_h1av,
)
from vpslab.material import Model, ScalingParams

# Largest prefactor the perturbed-monotonicity fit needs at desk scale
# (diagnostics.monotonicity_suite, seed 42, length-4 grid, N in {128, 256}):
# about 0.07 for the asymmetric coupling and 0.14 for the plain double well,
# stable under refinement.  Doubling the worst fit gives headroom while
# keeping the modulus meaningfully sized.
FITTED_C1_DEFAULT = 0.30


@dataclass(frozen=True)
class EnergyBreakdown:
    """Energy split into its three quadrature parts."""

    gradient_part: float
    potential_part: float
    stress_part: float
    total: float

    def __post_init__(self) -> None:
        if self.gradient_part < 0.0 or self.stress_part < 0.0:
            raise ValueError("gradient and stress parts must be nonnegative")
        s = self.gradient_part + self.potential_part + self.stress_part
        if abs(s - self.total) > 1e-12 * max(1.0, abs(s)):
            raise ValueError(
                f"total {self.total!r} does not match part sum {s!r}"
            )


def energy(state: State, model: Model, eps: float = 1.0) -> EnergyBreakdown:
    """Midpoint-quadrature energy of a state.

    gradient:  (1/2) sum over interior faces of (du/h)^2 h
    potential: h sum F(u_j)
    stress:    (1/(2 eps^2)) h sum (z_j - K(u_j))^2
    """
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    u, z = state.u, state.z
    h = u.grid.h
    grad = 0.5 * norm_h1av(u) ** 2
    pot = float(h * np.sum(model.F(u.values)))
    excess = z.values - np.asarray(model.K(u.values), dtype=np.float64)
    stress = float(h * np.sum(excess**2) / (2.0 * eps**2))
    return EnergyBreakdown(grad, pot, stress, grad + pot + stress)


def a_mean(state: State, model: Model, eps: float = 1.0) -> float:
    """Domain average of the u-force f(u) - A(u)(z - K(u))/eps^2."""
    u, z = state.u.values, state.z.values
    excess = (z - np.asarray(model.K(u), dtype=np.float64)) / eps**2
    force = np.asarray(model.f(u), dtype=np.float64)
    force = force - np.asarray(model.A(u), dtype=np.float64) * excess
    return float(np.mean(force))


def delta_energy(state: State, model: Model, eps: float = 1.0) -> Covector:
    """Differential of the energy at a discrete state.

    mu  = -lap(u) + f(u) - A(u)(z - K(u))/eps^2, shifted to zero mean;
    xi  = (z - K(u))/eps^2.

    The shift equals the average force up to the rounding-level mean of the
    stencil Laplacian, so mu is mean-free exactly as stored.
    """
    u, z = state.u, state.z
    uv, zv = u.values, z.values
    excess = (zv - np.asarray(model.K(uv), dtype=np.float64)) / eps**2
    raw_mu = (
        -neumann_laplacian(u).values
        + np.asarray(model.f(uv), dtype=np.float64)
        - np.asarray(model.A(uv), dtype=np.float64) * excess
    )
    mu = Field(u.grid, raw_mu - np.mean(raw_mu))
    xi = Field(u.grid, excess)
    return Covector(mu, xi)


def stress_excess_max(state: State, model: Model) -> float:
    """Discrete max-norm of z - K(u), the quantity the moduli depend on."""
    excess = state.z.values - np.asarray(model.K(state.u.values), dtype=np.float64)
    return float(np.max(np.abs(excess)))


def lambda_mod(state: State, model: Model) -> float:
    """Semiconvexity modulus -(beta + ||A'|| ||z-K(u)||_max)^2 / 8."""
    reach = model.beta + model.A_lip * stress_excess_max(state, model)
    return -0.125 * reach**2


def Lambda_mod(state: State, model: Model, C1: float = FITTED_C1_DEFAULT) -> float:
    """Perturbed-monotonicity modulus C1 (1 + (||A'||+||tau'||) ||z-K(u)||)^2."""
    if C1 <= 0.0:
        raise ValueError("C1 must be positive")
    reach = (model.A_lip + model.tau_lip) * stress_excess_max(state, model)
    return C1 * (1.0 + reach) ** 2


def omega_mod(state: State, model: Model) -> float:
    """Metric-drift modulus ||tau'||^2 ||z-K(u)||_max^2."""
    return (model.tau_lip * stress_excess_max(state, model)) ** 2


def energy_ch(u: Field, model: Model) -> float:
    """Ginzburg-Landau energy of the order parameter alone."""
    h = u.grid.h
    return float(0.5 * norm_h1av(u) ** 2 + h * np.sum(model.F(u.values)))


def gamma_recovery(u: Field, scaling: ScalingParams) -> State:
    """Recovery state (u, K_eps(u)): its energy equals energy_ch(u) exactly.

    The stress excess vanishes bitwise because z is evaluated through the
    same K_eps the energy subtracts.
    """
    z = Field(u.grid, np.asarray(scaling.model_eps.K(u.values), dtype=np.float64))
    return State.of(u, z)
