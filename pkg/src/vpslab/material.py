"""Material data: potential with convex splitting, coupling moduli, primitive.

A `Model` bundles the scalar functions the solver needs (potential F and its
derivative f, bulk modulus A, relaxation time tau, the primitive K of A with
K(0) = 0 and its inverse) together with the explicit constants the stability
moduli consume: the semiconvexity defect beta, Lipschitz constants and
two-sided bounds for A and tau, and polynomial growth constants.  All of the
declared relations are validated numerically at construction on a sampled
range, so a malformed model fails loudly instead of corrupting a run.

Scalar functions must be numpy-vectorised: they are evaluated on whole value
arrays inside Newton loops.

`make_scaling_family` builds the relaxation families: perturbations of a
limit model that stay inside the declared bounds, shrink uniformly at rate
eps, and carry the dissipation exponents (gamma, kappa) with gamma*kappa = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

SAMPLE_LO = -4.0
SAMPLE_HI = 5.0
N_VALIDATION_SAMPLES = 10_000

_K_INV_TOL = 1e-12  # |K(u) - w| <= tol * (1 + |w|)
_K_INV_MAX_ITER = 200

# Cached-primitive table: binary-exact spacing so that 0.0 is a node.
_TABLE_LO = -16.0
_TABLE_HI = 17.0
_TABLE_STEP = 2.0**-10


class NoConvergence(RuntimeError):
    """The safeguarded inversion of K failed to meet its tolerance."""


class BoundViolation(ValueError):
    """A scaled coupling family escaped the declared uniform bounds."""


ScalarFn = Callable[[np.ndarray], np.ndarray]


def _central_difference(fn: ScalarFn, u: np.ndarray) -> np.ndarray:
    step = 1e-6 * np.maximum(1.0, np.abs(u))
    return (fn(u + step) - fn(u - step)) / (2.0 * step)


def _fd_derivative(fn: ScalarFn) -> ScalarFn:
    def deriv(u):
        return _central_difference(fn, np.asarray(u, dtype=np.float64))

    return deriv


@dataclass(frozen=True)
class Model:
    """Validated material data.

    Parameters
    ----------
    F, f : callables
        Potential and its derivative.
    beta : float
        Semiconvexity defect: f' >= -beta on the sampled range.
    h : callable
        Convex companion h = F + beta u^2 / 2.
    A, tau : callables
        Bulk modulus and relaxation time, bounded by [A_lo, A_hi] and
        [tau_lo, tau_hi] with positive lower bounds.
    A_lip, tau_lip : float
        Upper bounds for |A'| and |tau'|.
    K, K_inv : callables
        Primitive of A with K(0) = 0, and its inverse.
    p, c1, c2 : growth exponent and constants for f and F.
    f_prime, A_prime, tau_prime : callables, optional
        Analytic derivatives; finite-difference closures are substituted
        when omitted.  Newton assemblies use these.
    """

    F: ScalarFn
    f: ScalarFn
    beta: float
    h: ScalarFn
    A: ScalarFn
    A_lip: float
    A_lo: float
    A_hi: float
    tau: ScalarFn
    tau_lip: float
    tau_lo: float
    tau_hi: float
    K: ScalarFn
    K_inv: ScalarFn
    p: float
    c1: float
    c2: float
    f_prime: Optional[ScalarFn] = None
    A_prime: Optional[ScalarFn] = None
    tau_prime: Optional[ScalarFn] = None

    def __post_init__(self) -> None:
        if self.f_prime is None:
            object.__setattr__(self, "f_prime", _fd_derivative(self.f))
        if self.A_prime is None:
            object.__setattr__(self, "A_prime", _fd_derivative(self.A))
        if self.tau_prime is None:
            object.__setattr__(self, "tau_prime", _fd_derivative(self.tau))
        _validate_model(self)


def _validate_model(m: Model) -> None:
    """Run every declared relation on the sampled range; raise on failure."""
    if not (m.A_lo > 0.0 and m.tau_lo > 0.0):
        raise ValueError("lower bounds for A and tau must be positive")
    if m.beta <= 0.0:
        raise ValueError("semiconvexity defect beta must be positive")

    u = np.linspace(SAMPLE_LO, SAMPLE_HI, N_VALIDATION_SAMPLES)

    f_vals = np.asarray(m.f(u), dtype=np.float64)
    fd = _central_difference(m.F, u)
    err = np.abs(fd - f_vals) / (1.0 + np.abs(f_vals))
    if np.max(err) > 1e-6:
        raise ValueError(f"f does not match F' (max rel error {np.max(err):.3e})")

    fprime = _central_difference(m.f, u)
    slack = 1e-6 * (1.0 + np.abs(fprime))
    if np.min(fprime + m.beta + slack) < 0.0:
        raise ValueError(
            f"f' dips below -beta: min f' = {np.min(fprime):.6f}, beta = {m.beta}"
        )

    h_expected = m.F(u) + 0.5 * m.beta * u**2
    h_err = np.max(np.abs(m.h(u) - h_expected) / (1.0 + np.abs(h_expected)))
    if h_err > 1e-10:
        raise ValueError(f"h is not F + beta u^2/2 (max rel error {h_err:.3e})")

    a_vals = np.asarray(m.A(u), dtype=np.float64)
    tiny_a = 1e-12 * max(1.0, m.A_hi)
    if np.min(a_vals) < m.A_lo - tiny_a or np.max(a_vals) > m.A_hi + tiny_a:
        raise ValueError(
            f"A leaves [{m.A_lo}, {m.A_hi}]: range "
            f"[{np.min(a_vals):.6g}, {np.max(a_vals):.6g}]"
        )
    t_vals = np.asarray(m.tau(u), dtype=np.float64)
    tiny_t = 1e-12 * max(1.0, m.tau_hi)
    if np.min(t_vals) < m.tau_lo - tiny_t or np.max(t_vals) > m.tau_hi + tiny_t:
        raise ValueError(
            f"tau leaves [{m.tau_lo}, {m.tau_hi}]: range "
            f"[{np.min(t_vals):.6g}, {np.max(t_vals):.6g}]"
        )

    k0 = float(m.K(np.asarray(0.0)))
    if abs(k0) > 1e-12:
        raise ValueError(f"K(0) = {k0:.3e}, must vanish")
    k_fd = _central_difference(m.K, u)
    k_err = np.abs(k_fd - a_vals) / (1.0 + np.abs(a_vals))
    if np.max(k_err) > 1e-6:
        raise ValueError(f"K' does not match A (max rel error {np.max(k_err):.3e})")

    k_vals = np.asarray(m.K(u), dtype=np.float64)
    round_trip = np.asarray(m.K_inv(k_vals), dtype=np.float64)
    if np.max(np.abs(round_trip - u)) > 1e-9:
        raise ValueError(
            f"K_inv(K(u)) misses u by {np.max(np.abs(round_trip - u)):.3e}"
        )

    growth_f = m.c1 * (np.abs(u) ** m.p + 1.0)
    if np.any(np.abs(f_vals) > growth_f * (1.0 + 1e-12)):
        raise ValueError("f violates its polynomial growth bound")
    growth_F = m.c2 * (np.abs(u) ** (m.p + 1.0) + 1.0)
    if np.any(np.abs(m.F(u)) > growth_F * (1.0 + 1e-12)):
        raise ValueError("F violates its polynomial growth bound")

    dk = np.diff(k_vals)
    if np.any(dk <= 0.0):
        raise ValueError("K is not strictly increasing on the sampled range")
    du = np.diff(u)
    if np.any(m.A_lo * du**2 > dk * du * (1.0 + 1e-9) + 1e-15):
        raise ValueError("K increments fall below the A_lo secant bound")


def _k_inverse_values(
    K: ScalarFn, A: ScalarFn, A_lo: float, A_hi: float, w: np.ndarray
) -> np.ndarray:
    """Safeguarded monotone Newton for K(u) = w, vectorised over w."""
    w = np.asarray(w, dtype=np.float64)
    lo = np.minimum(w / A_hi, w / A_lo)
    hi = np.maximum(w / A_hi, w / A_lo)
    # Grow the bracket until K straddles w (guards models whose K(0) != 0
    # would only be caught later in validation).
    for _ in range(64):
        bad_lo = np.asarray(K(lo)) > w
        bad_hi = np.asarray(K(hi)) < w
        if not (np.any(bad_lo) or np.any(bad_hi)):
            break
        width = np.maximum(hi - lo, 1.0)
        lo = np.where(bad_lo, lo - width, lo)
        hi = np.where(bad_hi, hi + width, hi)

    x = 0.5 * (lo + hi)
    tol = _K_INV_TOL * (1.0 + np.abs(w))
    for _ in range(_K_INV_MAX_ITER):
        res = np.asarray(K(x)) - w
        if np.all(np.abs(res) <= tol):
            return x
        hi = np.where(res > 0.0, x, hi)
        lo = np.where(res <= 0.0, x, lo)
        step = res / np.asarray(A(x))
        candidate = x - step
        outside = (candidate <= lo) | (candidate >= hi)
        x = np.where(outside, 0.5 * (lo + hi), candidate)
    raise NoConvergence(
        f"K inversion stalled after {_K_INV_MAX_ITER} iterations "
        f"(worst defect {np.max(np.abs(np.asarray(K(x)) - w)):.3e})"
    )


def k_inverse(model: Model, w):
    """Invert the primitive: return u with |K(u) - w| <= 1e-12 (1 + |w|).

    Accepts scalars or arrays; scalars come back as floats.
    """
    arr = np.asarray(w, dtype=np.float64)
    result = _k_inverse_values(model.K, model.A, model.A_lo, model.A_hi, arr)
    if np.isscalar(w) or arr.ndim == 0:
        return float(result)
    return result


def _log_cosh(x: np.ndarray) -> np.ndarray:
    """Overflow-safe ln cosh."""
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)


def _double_well_parts():
    def F(u):
        return u**2 * (u - 1.0) ** 2

    def f(u):
        return 4.0 * u**3 - 6.0 * u**2 + 2.0 * u

    def f_prime(u):
        return 12.0 * u**2 - 12.0 * u + 2.0

    beta = 1.0

    def h(u):
        return F(u) + 0.5 * beta * u**2

    return F, f, f_prime, beta, h


def default_double_well() -> Model:
    """Double-well potential with trivial (unit, constant) coupling."""
    F, f, f_prime, beta, h = _double_well_parts()
    one = lambda u: np.ones_like(np.asarray(u, dtype=np.float64))
    zero = lambda u: np.zeros_like(np.asarray(u, dtype=np.float64))
    ident = lambda u: np.asarray(u, dtype=np.float64) * 1.0
    return Model(
        F=F, f=f, beta=beta, h=h,
        A=one, A_lip=0.0, A_lo=1.0, A_hi=1.0,
        tau=one, tau_lip=0.0, tau_lo=1.0, tau_hi=1.0,
        K=ident, K_inv=ident,
        p=3.0, c1=12.0, c2=4.0,
        f_prime=f_prime, A_prime=zero, tau_prime=zero,
    )


def constant_coupling(a_value: float, tau_value: float) -> Model:
    """Double-well potential with constant A and tau at prescribed values."""
    if a_value <= 0.0 or tau_value <= 0.0:
        raise ValueError("constant coupling values must be positive")
    F, f, f_prime, beta, h = _double_well_parts()
    a_fn = lambda u: np.full_like(np.asarray(u, dtype=np.float64), a_value)
    t_fn = lambda u: np.full_like(np.asarray(u, dtype=np.float64), tau_value)
    zero = lambda u: np.zeros_like(np.asarray(u, dtype=np.float64))
    return Model(
        F=F, f=f, beta=beta, h=h,
        A=a_fn, A_lip=0.0, A_lo=a_value, A_hi=a_value,
        tau=t_fn, tau_lip=0.0, tau_lo=tau_value, tau_hi=tau_value,
        K=lambda u: a_value * np.asarray(u, dtype=np.float64),
        K_inv=lambda w: np.asarray(w, dtype=np.float64) / a_value,
        p=3.0, c1=12.0, c2=4.0,
        f_prime=f_prime, A_prime=zero, tau_prime=zero,
    )


def default_asymmetric_A_tau() -> Model:
    """Double-well potential with tanh-graded modulus and relaxation time.

    A rises from 0.5 to 1.5 and tau from 0.1 to 1.9 across the interface
    region, giving the two phases genuinely different stress response.  K has
    a closed-form antiderivative through ln cosh.
    """
    F, f, f_prime, beta, h = _double_well_parts()

    def A(u):
        return 1.0 + 0.5 * np.tanh(3.0 * (np.asarray(u, dtype=np.float64) - 0.5))

    def A_prime(u):
        c = np.cosh(3.0 * (np.asarray(u, dtype=np.float64) - 0.5))
        return 1.5 / c**2

    def tau(u):
        return 1.0 + 0.9 * np.tanh(3.0 * (np.asarray(u, dtype=np.float64) - 0.5))

    def tau_prime(u):
        c = np.cosh(3.0 * (np.asarray(u, dtype=np.float64) - 0.5))
        return 2.7 / c**2

    lncosh_half = _log_cosh(np.asarray(1.5))

    def K(u):
        u = np.asarray(u, dtype=np.float64)
        return u + (_log_cosh(3.0 * (u - 0.5)) - lncosh_half) / 6.0

    def K_inv(w):
        return _k_inverse_values(K, A, 0.5, 1.5, np.asarray(w, dtype=np.float64))

    return Model(
        F=F, f=f, beta=beta, h=h,
        A=A, A_lip=1.5, A_lo=0.5, A_hi=1.5,
        tau=tau, tau_lip=2.7, tau_lo=0.1, tau_hi=1.9,
        K=K, K_inv=K_inv,
        p=3.0, c1=12.0, c2=4.0,
        f_prime=f_prime, A_prime=A_prime, tau_prime=tau_prime,
    )


class _CachedPrimitive:
    """Primitive of a scalar function, anchored at 0, via cached Simpson nodes.

    A uniform table of cumulative Simpson panels covers a wide working range
    (the spacing is a power of two so that 0.0 is exactly a node); a query
    inside the table costs one closing Simpson panel from the nearest node
    below, which keeps the derivative equal to the integrand to rounding.
    Queries outside fall back to panel-by-panel extension, which only the
    bracket growth of an inverse solve ever visits.
    """

    def __init__(self, fn: ScalarFn):
        self.fn = fn
        self.nodes = np.arange(_TABLE_LO, _TABLE_HI + 0.5 * _TABLE_STEP, _TABLE_STEP)
        mids = self.nodes[:-1] + 0.5 * _TABLE_STEP
        f_nodes = np.asarray(fn(self.nodes), dtype=np.float64)
        f_mids = np.asarray(fn(mids), dtype=np.float64)
        panels = (_TABLE_STEP / 6.0) * (f_nodes[:-1] + 4.0 * f_mids + f_nodes[1:])
        cumulative = np.concatenate([[0.0], np.cumsum(panels)])
        anchor_idx = int(round((0.0 - _TABLE_LO) / _TABLE_STEP))
        self.cumulative = cumulative - cumulative[anchor_idx]

    def _extend(self, x: float) -> float:
        """Composite Simpson from the nearest table edge (cold path)."""
        if x < self.nodes[0]:
            a, base = self.nodes[0], self.cumulative[0]
        else:
            a, base = self.nodes[-1], self.cumulative[-1]
        n_panels = max(4, int(np.ceil(abs(x - a) / _TABLE_STEP)))
        pts = np.linspace(a, x, 2 * n_panels + 1)
        vals = np.asarray(self.fn(pts), dtype=np.float64)
        width = (x - a) / n_panels
        integral = (width / 6.0) * np.sum(vals[:-2:2] + 4.0 * vals[1::2] + vals[2::2])
        return float(base + integral)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        scalar = x.ndim == 0
        xv = np.atleast_1d(x)
        out = np.empty_like(xv)
        inside = (xv >= self.nodes[0]) & (xv <= self.nodes[-1])
        if np.any(inside):
            xi = xv[inside]
            idx = np.minimum(
                ((xi - self.nodes[0]) / _TABLE_STEP).astype(int),
                len(self.nodes) - 2,
            )
            x0 = self.nodes[idx]
            width = xi - x0
            mid = x0 + 0.5 * width
            closing = (width / 6.0) * (
                np.asarray(self.fn(x0), dtype=np.float64)
                + 4.0 * np.asarray(self.fn(mid), dtype=np.float64)
                + np.asarray(self.fn(xi), dtype=np.float64)
            )
            out[inside] = self.cumulative[idx] + closing
        for j in np.nonzero(~inside)[0]:
            out[j] = self._extend(float(xv[j]))
        return out[0] if scalar else out


@dataclass(frozen=True)
class ScalingParams:
    """A member of a uniformly convergent coupling family.

    `model_eps` carries (A_eps, tau_eps, K_eps) at this eps; `model_limit`
    is the target.  The dissipation exponents satisfy gamma * kappa_exp = 0;
    the reported sup-distances quantify the uniform convergence.
    """

    eps: float
    gamma: float
    kappa_exp: float
    model_eps: Model
    model_limit: Model
    sup_dist_A: float = dc_field(default=0.0)
    sup_dist_tau: float = dc_field(default=0.0)

    def __post_init__(self) -> None:
        if not (0.0 < self.eps <= 1.0):
            raise ValueError(f"eps must lie in (0, 1], got {self.eps}")
        if self.gamma < 0.0 or self.kappa_exp < 0.0:
            raise ValueError("dissipation exponents must be nonnegative")
        if self.gamma * self.kappa_exp != 0.0:
            raise ValueError(
                f"gamma*kappa_exp must vanish, got {self.gamma}*{self.kappa_exp}"
            )


def _interior_bump(fn: ScalarFn, lo: float, hi: float) -> ScalarFn:
    """Shape function (hi - fn)(fn - lo)/(hi - lo): vanishes at both bounds."""
    if hi - lo < 1e-14:
        return lambda u: np.zeros_like(np.asarray(u, dtype=np.float64))

    def bump(u):
        a = np.asarray(fn(u), dtype=np.float64)
        return (hi - a) * (a - lo) / (hi - lo)

    return bump


def make_scaling_family(
    model_limit: Model,
    eps: float,
    gamma: float,
    kappa_exp: float,
    perturbation_size: float = 0.0,
) -> ScalingParams:
    """Construct scaled coupling data converging uniformly to the limit model.

    The perturbation is linear in eps and shaped to vanish where A or tau
    touch their bounds, so the family inherits the limit model's two-sided
    bounds exactly as long as perturbation_size * eps <= 1; beyond that the
    construction would overshoot and BoundViolation is raised.  K_eps is
    recomputed as the primitive of A_eps (cached Simpson nodes) unless the
    perturbation vanishes, in which case the limit model is reused verbatim.

    sup |A_eps - A| <= perturbation_size * eps * A_hi by construction (the
    bump never exceeds a quarter of the bound gap).
    """
    if gamma * kappa_exp != 0.0:
        raise ValueError(
            f"gamma*kappa_exp must vanish, got {gamma}*{kappa_exp}"
        )
    if perturbation_size < 0.0:
        raise ValueError("perturbation_size must be nonnegative")

    strength = perturbation_size * eps
    if strength == 0.0:
        return ScalingParams(
            eps=eps, gamma=gamma, kappa_exp=kappa_exp,
            model_eps=model_limit, model_limit=model_limit,
            sup_dist_A=0.0, sup_dist_tau=0.0,
        )
    if strength > 1.0:
        raise BoundViolation(
            f"perturbation_size*eps = {strength:.3g} > 1 pushes the family "
            "outside the declared bounds"
        )

    m = model_limit
    bump_A = _interior_bump(m.A, m.A_lo, m.A_hi)
    bump_tau = _interior_bump(m.tau, m.tau_lo, m.tau_hi)

    def A_eps(u):
        return np.asarray(m.A(u), dtype=np.float64) + strength * bump_A(u)

    def tau_eps(u):
        return np.asarray(m.tau(u), dtype=np.float64) + strength * bump_tau(u)

    K_eps = _CachedPrimitive(A_eps)

    def K_inv_eps(w):
        return _k_inverse_values(K_eps, A_eps, m.A_lo, m.A_hi, np.asarray(w))

    try:
        model_eps = Model(
            F=m.F, f=m.f, beta=m.beta, h=m.h,
            A=A_eps,
            A_lip=m.A_lip * (1.0 + strength),
            A_lo=m.A_lo, A_hi=m.A_hi,
            tau=tau_eps,
            tau_lip=m.tau_lip * (1.0 + strength),
            tau_lo=m.tau_lo, tau_hi=m.tau_hi,
            K=K_eps, K_inv=K_inv_eps,
            p=m.p, c1=m.c1, c2=m.c2,
            f_prime=m.f_prime,
        )
    except ValueError as exc:
        raise BoundViolation(f"scaled family failed validation: {exc}") from exc

    u = np.linspace(SAMPLE_LO, SAMPLE_HI, N_VALIDATION_SAMPLES)
    sup_a = float(np.max(np.abs(np.asarray(A_eps(u)) - np.asarray(m.A(u)))))
    sup_t = float(np.max(np.abs(np.asarray(tau_eps(u)) - np.asarray(m.tau(u)))))
    if sup_a > strength * m.A_hi * (1.0 + 1e-9):
        raise BoundViolation(
            f"sup|A_eps - A| = {sup_a:.3e} exceeds the contracted "
            f"{strength * m.A_hi:.3e}"
        )

    return ScalingParams(
        eps=eps, gamma=gamma, kappa_exp=kappa_exp,
        model_eps=model_eps, model_limit=model_limit,
        sup_dist_A=sup_a, sup_dist_tau=sup_t,
    )
