"""Structure-preserving numerical laboratory for a gradient-flow model of
viscoelastic phase separation in transformed variables.

The package is organised bottom-up: `fields` (grids, norms, the reflecting
Laplacian), `material` (potential and coupling data with validated bounds),
`energy` (free energy and its differential, convexity moduli), `dissipation`
(the state-dependent metric and its Legendre dual), `stepper` (semi-implicit
minimising movements), `limits` (relaxation-limit solvers and sweeps),
`diagnostics` (identity checks and rate fits) and `cli` (config-driven runs
that write CSV/binary outputs).
"""

from vpslab.fields import (
    Covector,
    Field,
    Grid,
    GridMismatch,
    NonZeroMean,
    State,
)

__all__ = [
    "Covector",
    "Field",
    "Grid",
    "GridMismatch",
    "NonZeroMean",
    "State",
]
