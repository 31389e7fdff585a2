"""State-dependent dissipation metric and its Legendre dual.

In the transformed variables the metric is diagonal: the order-parameter
velocity pays through the inverse Laplacian (a dual-norm cost) and the
stress velocity through a pointwise weight tau(u).  Relaxation runs rescale
the two blocks independently by eps^gamma and eps^kappa, so the weights type
carries those two scalars plus the frozen tau field.

The scheme freezes tau at the previous step's state; a weights value is
therefore built in two stages: `for_scaling` fixes the scalars, `bind`
attaches the tau field once the state it belongs to is known.  Applying the
metric before binding is an error.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from vpslab.fields import (
    Covector,
    Field,
    MEAN_ZERO_RTOL,
    NonZeroMean,
    inner_l2,
    inv_neumann_laplacian,
    neumann_laplacian,
    norm_hm1av,
    norm_l2,
)
from vpslab.material import Model


@dataclass(frozen=True)
class DissipationWeights:
    """Scalar block weights plus the frozen relaxation-time field.

    w_u = eps^gamma scales the dual-norm block, w_z_base = eps^kappa the
    stress block; tau_at is tau_eps evaluated at the freezing state (None
    until bound).
    """

    w_u: float
    w_z_base: float
    eps: float
    tau_at: Optional[Field] = None

    def __post_init__(self) -> None:
        if not (self.w_u > 0.0 and self.w_z_base > 0.0 and self.eps > 0.0):
            raise ValueError("dissipation weights must be positive")
        if self.tau_at is not None and np.min(self.tau_at.values) <= 0.0:
            raise ValueError("frozen tau field must be strictly positive")

    @classmethod
    def for_scaling(
        cls, eps: float = 1.0, gamma: float = 0.0, kappa_exp: float = 0.0
    ) -> "DissipationWeights":
        """Unbound weights with w_u = eps^gamma, w_z_base = eps^kappa."""
        return cls(w_u=eps**gamma, w_z_base=eps**kappa_exp, eps=eps)

    def bind(self, model: Model, u: Field) -> "DissipationWeights":
        """Freeze tau_eps at the given state's order parameter."""
        tau_vals = np.asarray(model.tau(u.values), dtype=np.float64)
        return replace(self, tau_at=Field(u.grid, tau_vals))

    def require_bound(self) -> Field:
        if self.tau_at is None:
            raise ValueError("weights not bound to a state: call bind() first")
        return self.tau_at


def _require_mean_free(v: Field) -> None:
    scale = max(float(np.max(np.abs(v.values))), 1.0)
    if abs(float(np.mean(v.values))) > MEAN_ZERO_RTOL * scale:
        raise NonZeroMean("velocity's first component must be mean-free")


def apply_G(weights: DissipationWeights, v: Field, y: Field) -> Covector:
    """Metric applied to a velocity: (w_u (-lap)^{-1} v, w_z tau y)."""
    tau_at = weights.require_bound()
    _require_mean_free(v)
    mu = Field(v.grid, weights.w_u * inv_neumann_laplacian(v).values)
    xi = Field(y.grid, weights.w_z_base * tau_at.values * y.values)
    return Covector(mu, xi)


def apply_K(weights: DissipationWeights, c: Covector) -> Tuple[Field, Field]:
    """Inverse metric applied to a covector: (-lap(mu)/w_u, xi/(w_z tau))."""
    tau_at = weights.require_bound()
    _require_mean_free(c.mu)
    v = Field(c.mu.grid, -neumann_laplacian(c.mu).values / weights.w_u)
    y = Field(c.xi.grid, c.xi.values / (weights.w_z_base * tau_at.values))
    return v, y


def R_value(weights: DissipationWeights, v: Field, y: Field) -> float:
    """Dissipation potential (1/2)<G(v,y),(v,y)>."""
    tau_at = weights.require_bound()
    _require_mean_free(v)
    dual_sq = weights.w_u * norm_hm1av(v) ** 2
    stress_sq = weights.w_z_base * inner_l2(
        Field(y.grid, tau_at.values * y.values), y
    )
    return 0.5 * (dual_sq + stress_sq)


def R_star_value(weights: DissipationWeights, c: Covector) -> float:
    """Dual potential (1/2)<c, K c>."""
    v, y = apply_K(weights, c)
    return 0.5 * (inner_l2(c.mu, v) + inner_l2(c.xi, y))


def pairing(c: Covector, v: Field, y: Field) -> float:
    """Duality pairing of a covector against a velocity."""
    return inner_l2(c.mu, v) + inner_l2(c.xi, y)


def effective_R(kind: str, model: Model, u: Field, v: Field) -> float:
    """Limit-system dissipation potentials on order-parameter velocities.

    CH pays the dual norm alone, mAC the A^2 tau weighted L2 norm alone,
    vCH their sum.
    """
    if kind not in ("CH", "vCH", "mAC"):
        raise ValueError(f"unknown limit kind {kind!r}")
    _require_mean_free(v)
    value = 0.0
    if kind in ("CH", "vCH"):
        value += 0.5 * norm_hm1av(v) ** 2
    if kind in ("mAC", "vCH"):
        uv = u.values
        weight = (
            np.asarray(model.A(uv), dtype=np.float64) ** 2
            * np.asarray(model.tau(uv), dtype=np.float64)
        )
        value += 0.5 * inner_l2(Field(v.grid, weight * v.values), v)
    return value


def velocity_norm_H(v: Field, y: Field) -> float:
    """Product-space norm the coercivity sandwich compares against."""
    return float(np.hypot(norm_hm1av(v), norm_l2(y)))
