"""Config-driven experiment runner with a small command-line front end.

A run is described by a flat UTF-8 config of `key = value` lines grouped
under `[section]` headers.  `parse_config` turns that text into a validated
`RunConfig`; `run_experiment` executes one of five experiments and writes
machine-readable outputs into a directory:

* `config.txt` is the verbatim input text, archived for replay.
* `timeseries.csv` holds one row per accepted step: energies, the
  dissipation increment, the spatial mean of the order parameter, the sup
  distance of the stress from its constraint manifold, and the running
  energy-balance residual.
* `snapshots.bin` is a binary stream of full states.  A one-line JSON
  header `{"N", "L", "dt", "count"}` is followed by `count` records of
  `[8-byte little-endian unsigned step][N little-endian doubles u][N
  little-endian doubles z]`.
* each experiment adds its own CSV (relaxation errors per eps, refinement
  values plus fitted rates, the separation series, or the verification
  table).

Everything written is a pure function of (config text, seed): rows are
formatted with shortest round-trip floats and no timestamps, so repeated
invocations produce byte-identical directories.

Exit codes follow failure kind: 0 on success, 1 for config or verification
failures, 2 when the implicit step diverges, 3 for filesystem trouble.  The
last stderr line on failure is a single JSON object naming the error class
and message.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import pathlib
import struct
import sys
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from vpslab.diagnostics import (
    NOT_APPLICABLE,
    edb_residual,
    fit_rate,
    monotonicity_suite,
    original_variables_residual,
    stability_harness,
    subgradient_suite,
    w_estimate_suite,
    DegenerateInput,
)
from vpslab.dissipation import DissipationWeights
from vpslab.energy import FITTED_C1_DEFAULT, stress_excess_max
from vpslab.fields import Field, Grid, State, cosine_mode, norm_H, project_zero_mean
from vpslab.limits import ScalingCase, relax_sweep
from vpslab.material import (
    Model,
    constant_coupling,
    default_asymmetric_A_tau,
    default_double_well,
)
from vpslab.stepper import (
    StepFailed,
    StepperConfig,
    Trajectory,
    interpolant_eval,
    run,
    spinodal_state,
)

__all__ = [
    "ParseError",
    "RunConfig",
    "ValidationError",
    "main",
    "parse_config",
    "read_snapshots",
    "run_experiment",
]

EXPERIMENTS = ("simulate", "relax", "verify", "stability", "convergence")
MODEL_KINDS = ("asymmetric", "double_well", "constant")

TIMESERIES_COLUMNS = (
    "step",
    "t",
    "energy_total",
    "energy_gradient",
    "energy_potential",
    "energy_stress",
    "dissipation_increment",
    "mass",
    "stress_excess_max",
    "edb_residual",
)


class ParseError(ValueError):
    """Config text that cannot be read: bad syntax, unknown or duplicate keys."""


class ValidationError(ValueError):
    """Config that parses but names values violating a module invariant."""


@dataclass(frozen=True)
class RunConfig:
    """Validated description of one experiment run.

    Constructed by `parse_config`; every field has a default, so the empty
    config is valid and runs a short spinodal simulation on the asymmetric
    model.  `source_text` carries the original config for archiving and is
    ignored by comparisons.
    """

    experiment: str = "simulate"
    model_kind: str = "asymmetric"
    a_value: float = 1.0
    tau_value: float = 1.0
    length: float = 1.0
    n_cells: int = 256
    dt: float = 1e-3
    t_end: float = 0.5
    newton_tol: float = 1e-11
    newton_max_iter: int = 50
    mass: float = 0.5
    amplitude: float = 0.05
    mode: int = 1
    eps: float = 1.0
    gamma: float = 0.0
    kappa_exp: float = 0.0
    eps_list: Tuple[float, ...] = (0.4, 0.2, 0.1, 0.05)
    perturbation_size: float = 1e-3
    dt_list: Tuple[float, ...] = (4e-3, 2e-3, 1e-3, 5e-4)
    n_samples: int = 200
    seed: int = 42
    output_dir: str = "vps_out"
    source_text: str = dataclasses.field(default="", compare=False, repr=False)


def _as_float(raw: str) -> float:
    value = float(raw)
    if not np.isfinite(value):
        raise ValueError("must be finite")
    return value


def _as_int(raw: str) -> int:
    return int(raw, 10)


def _as_str(raw: str) -> str:
    if not raw:
        raise ValueError("must be non-empty")
    return raw


def _as_float_list(raw: str) -> Tuple[float, ...]:
    parts = [p.strip() for p in raw.split(",")]
    if any(not p for p in parts):
        raise ValueError("expected comma-separated numbers")
    return tuple(_as_float(p) for p in parts)


# (section, key) -> (RunConfig field, converter).  The blank section holds
# the run-level keys that appear before any header.
_SCHEMA: Dict[Tuple[str, str], Tuple[str, Callable]] = {
    ("", "experiment"): ("experiment", _as_str),
    ("", "seed"): ("seed", _as_int),
    ("", "output_dir"): ("output_dir", _as_str),
    ("grid", "length"): ("length", _as_float),
    ("grid", "n_cells"): ("n_cells", _as_int),
    ("model", "kind"): ("model_kind", _as_str),
    ("model", "a_value"): ("a_value", _as_float),
    ("model", "tau_value"): ("tau_value", _as_float),
    ("stepper", "dt"): ("dt", _as_float),
    ("stepper", "t_end"): ("t_end", _as_float),
    ("stepper", "newton_tol"): ("newton_tol", _as_float),
    ("stepper", "newton_max_iter"): ("newton_max_iter", _as_int),
    ("initial", "mass"): ("mass", _as_float),
    ("initial", "amplitude"): ("amplitude", _as_float),
    ("initial", "mode"): ("mode", _as_int),
    ("scaling", "eps"): ("eps", _as_float),
    ("scaling", "gamma"): ("gamma", _as_float),
    ("scaling", "kappa_exp"): ("kappa_exp", _as_float),
    ("scaling", "eps_list"): ("eps_list", _as_float_list),
    ("stability", "perturbation_size"): ("perturbation_size", _as_float),
    ("convergence", "dt_list"): ("dt_list", _as_float_list),
    ("verify", "n_samples"): ("n_samples", _as_int),
}

_SECTIONS = {section for section, _ in _SCHEMA}


def parse_config(text: str) -> RunConfig:
    """Read flat `key = value` config text into a validated RunConfig.

    Lines are independent: blanks and `#` comments are skipped, `[name]`
    switches the active section, anything else must be a known key.  Unknown
    or repeated keys and malformed values raise ParseError with the line
    number; values that parse but break an invariant raise ValidationError
    naming the offending quantity.  The empty string yields all defaults.
    """
    fields: Dict[str, object] = {}
    explicit: set = set()
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            name = stripped[1:-1].strip()
            if name not in _SECTIONS or not name:
                raise ParseError(f"line {lineno}: unknown section [{name}]")
            section = name
            continue
        if "=" not in stripped:
            raise ParseError(
                f"line {lineno}: expected 'key = value' or '[section]', "
                f"got {stripped!r}"
            )
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        spot = (section, key)
        if spot not in _SCHEMA:
            where = f"in section [{section}]" if section else "at top level"
            raise ParseError(f"line {lineno}: unknown key {key!r} {where}")
        field_name, convert = _SCHEMA[spot]
        if field_name in explicit:
            raise ParseError(f"line {lineno}: duplicate key {key!r}")
        try:
            fields[field_name] = convert(raw)
        except ValueError as exc:
            raise ParseError(
                f"line {lineno}: bad value for {key!r}: {exc}"
            ) from exc
        explicit.add(field_name)

    cfg = RunConfig(**fields, source_text=text)
    _validate(cfg, explicit)
    return cfg


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValidationError(message)


def _validate(cfg: RunConfig, explicit: set) -> None:
    """Check every referenced value against its module's own constructor."""
    _require(
        cfg.experiment in EXPERIMENTS,
        f"experiment must be one of {', '.join(EXPERIMENTS)}; "
        f"got {cfg.experiment!r}",
    )
    _require(cfg.model_kind in MODEL_KINDS,
             f"model kind must be one of {', '.join(MODEL_KINDS)}; "
             f"got {cfg.model_kind!r}")
    if cfg.model_kind != "constant":
        _require(
            not ({"a_value", "tau_value"} & explicit),
            "a_value and tau_value apply only to the constant model kind",
        )
    _require(cfg.seed >= 0, f"seed must be nonnegative, got {cfg.seed}")
    _require(cfg.n_samples >= 1,
             f"n_samples must be at least 1, got {cfg.n_samples}")
    _require(cfg.gamma >= 0.0 and cfg.kappa_exp >= 0.0,
             "scaling exponents gamma and kappa_exp must be nonnegative")
    _require(
        cfg.gamma * cfg.kappa_exp == 0.0,
        "scaling exponents must satisfy gamma * kappa_exp = 0, got "
        f"gamma = {cfg.gamma}, kappa_exp = {cfg.kappa_exp}",
    )
    try:
        grid = Grid(cfg.length, cfg.n_cells)
        model = _build_model(cfg)
        weights = DissipationWeights.for_scaling(
            cfg.eps, cfg.gamma, cfg.kappa_exp
        )
        StepperConfig(cfg.dt, cfg.t_end, weights,
                      cfg.newton_tol, cfg.newton_max_iter)
        if cfg.experiment == "convergence":
            for dt in cfg.dt_list:
                StepperConfig(dt, cfg.t_end, weights,
                              cfg.newton_tol, cfg.newton_max_iter)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    _require(np.isfinite(cfg.mass), "mass must be finite")
    _require(np.isfinite(cfg.amplitude), "amplitude must be finite")
    _require(
        1 <= cfg.mode < cfg.n_cells,
        f"mode must lie in 1..{cfg.n_cells - 1}, got {cfg.mode}",
    )
    _require(len(cfg.eps_list) > 0, "eps_list must be non-empty")
    _require(all(e > 0.0 for e in cfg.eps_list),
             "eps_list entries must be positive")
    _require(
        all(a > b for a, b in zip(cfg.eps_list, cfg.eps_list[1:])),
        "eps_list must be strictly decreasing",
    )
    _require(cfg.perturbation_size >= 0.0,
             "perturbation_size must be nonnegative")
    _require(
        cfg.perturbation_size * max(cfg.eps_list) <= 1.0,
        "perturbation_size times the largest eps must not exceed 1",
    )
    _require(len(cfg.dt_list) > 0, "dt_list must be non-empty")
    _require(
        all(a > b for a, b in zip(cfg.dt_list, cfg.dt_list[1:])),
        "dt_list must be strictly decreasing",
    )
    del grid, model


def _build_model(cfg: RunConfig) -> Model:
    if cfg.model_kind == "asymmetric":
        return default_asymmetric_A_tau()
    if cfg.model_kind == "double_well":
        return default_double_well()
    return constant_coupling(cfg.a_value, cfg.tau_value)


def _build_weights(cfg: RunConfig) -> DissipationWeights:
    return DissipationWeights.for_scaling(cfg.eps, cfg.gamma, cfg.kappa_exp)


def _stepper_config(cfg: RunConfig, dt: Optional[float] = None,
                    t_end: Optional[float] = None) -> StepperConfig:
    return StepperConfig(
        dt=cfg.dt if dt is None else dt,
        t_end=cfg.t_end if t_end is None else t_end,
        weights=_build_weights(cfg),
        newton_tol=cfg.newton_tol,
        newton_max_iter=cfg.newton_max_iter,
    )


def _initial_state(cfg: RunConfig, grid: Grid, model: Model) -> State:
    return spinodal_state(grid, model, cfg.mass, cfg.amplitude, cfg.mode)


def _fmt(value: object) -> str:
    """Shortest round-trip text for a cell; floats stay exactly replayable."""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is NOT_APPLICABLE:
        return "NA"
    return repr(float(value))


def _write_csv(path: pathlib.Path, header: Sequence[str],
               rows: Sequence[Sequence[object]]) -> None:
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row width {len(row)} != header {len(header)}")
        lines.append(",".join(_fmt(cell) for cell in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_timeseries(path: pathlib.Path, traj: Trajectory, model: Model,
                      weights: DissipationWeights) -> None:
    residual = edb_residual(traj, model, weights)
    rows: List[Sequence[object]] = []
    for k, state in enumerate(traj.states):
        e = traj.energies[k]
        rows.append((
            k,
            traj.times[k],
            e.total,
            e.gradient_part,
            e.potential_part,
            e.stress_part,
            traj.diss_increments[k],
            float(np.mean(state.u.values)),
            stress_excess_max(state, model),
            residual[k],
        ))
    _write_csv(path, TIMESERIES_COLUMNS, rows)


def _write_snapshots(path: pathlib.Path, traj: Trajectory,
                     dt: float) -> None:
    grid = traj.states[0].grid
    header = json.dumps(
        {"N": grid.n_cells, "L": grid.length, "dt": dt,
         "count": len(traj.states)},
        sort_keys=True,
    )
    with path.open("wb") as sink:
        sink.write(header.encode("utf-8") + b"\n")
        for k, state in enumerate(traj.states):
            sink.write(struct.pack("<Q", k))
            sink.write(state.u.values.astype("<f8", copy=False).tobytes())
            sink.write(state.z.values.astype("<f8", copy=False).tobytes())


SnapshotRecord = Tuple[int, np.ndarray, np.ndarray]


def read_snapshots(path) -> Tuple[dict, List[SnapshotRecord]]:
    """Load a snapshot stream back into (header, [(step, u, z), ...])."""
    with pathlib.Path(path).open("rb") as source:
        header = json.loads(source.readline().decode("utf-8"))
        n = int(header["N"])
        record = struct.calcsize("<Q") + 2 * n * 8
        records = []
        for _ in range(int(header["count"])):
            chunk = source.read(record)
            if len(chunk) != record:
                raise ValueError("snapshot stream truncated")
            (step,) = struct.unpack_from("<Q", chunk, 0)
            flat = np.frombuffer(chunk, dtype="<f8", offset=8, count=2 * n)
            records.append((int(step), flat[:n].copy(), flat[n:].copy()))
    return header, records


def _reference_run(cfg: RunConfig) -> Tuple[Trajectory, Model,
                                            DissipationWeights]:
    grid = Grid(cfg.length, cfg.n_cells)
    model = _build_model(cfg)
    traj = run(_initial_state(cfg, grid, model), model, _stepper_config(cfg))
    return traj, model, _build_weights(cfg)


def _run_simulate(cfg: RunConfig, out: pathlib.Path) -> int:
    traj, model, weights = _reference_run(cfg)
    _write_timeseries(out / "timeseries.csv", traj, model, weights)
    _write_snapshots(out / "snapshots.bin", traj, cfg.dt)
    return 0


def _run_relax(cfg: RunConfig, out: pathlib.Path) -> int:
    traj, model, weights = _reference_run(cfg)
    _write_timeseries(out / "timeseries.csv", traj, model, weights)
    _write_snapshots(out / "snapshots.bin", traj, cfg.dt)

    case = ScalingCase.classify(cfg.gamma, cfg.kappa_exp)
    report = relax_sweep(
        traj.states[0].u,
        model,
        case,
        cfg.eps_list,
        _stepper_config(cfg),
        perturbation_size=cfg.perturbation_size,
    )
    rows = [
        (case.label, report.eps_values[i], report.sup_t_u_error[i],
         report.sup_t_z_error[i], report.energy_gap[i],
         report.stress_bound_ok[i])
        for i in range(len(report.eps_values))
    ]
    _write_csv(
        out / "relax_errors.csv",
        ("case", "eps", "sup_u_error", "sup_z_error", "energy_gap",
         "stress_bound_ok"),
        rows,
    )
    return 0


def _run_verify(cfg: RunConfig, out: pathlib.Path) -> int:
    traj, model, weights = _reference_run(cfg)
    _write_timeseries(out / "timeseries.csv", traj, model, weights)
    _write_snapshots(out / "snapshots.bin", traj, cfg.dt)

    grid = traj.states[0].grid
    masses = np.array([np.mean(s.u.values) for s in traj.states])
    totals = np.array([e.total for e in traj.energies])
    residual = edb_residual(traj, model, weights)
    n_steps = max(len(traj.times) - 1, 1)

    sub = subgradient_suite(grid, model, cfg.n_samples, rng_seed=cfg.seed)
    mono = monotonicity_suite(
        grid, model, max(40, cfg.n_samples // 5), rng_seed=cfg.seed
    )
    # The deterministic ladder needs five rungs per resolvable mode to
    # reach its nonzero amplitudes, so its size follows the grid.
    west = w_estimate_suite(grid, model, 5 * max(1, grid.n_cells // 4))

    checks: List[Tuple[str, float, float]] = [
        ("mass_drift", float(np.max(np.abs(masses - masses[0]))), 1e-10),
        ("energy_increase",
         float(np.max(np.diff(totals), initial=0.0)), 1e-9),
        ("fenchel_relative_defect",
         float(np.max(traj.fenchel_defects)), 1e-10),
        ("edb_one_sided", float(np.max(residual)),
         n_steps * cfg.newton_tol),
        ("subgradient_violations", float(sub.violations), 0.0),
        ("monotonicity_max_c1", mono.max_c1, FITTED_C1_DEFAULT),
        ("w_estimate_max_ratio", west.max_ratio, np.inf),
    ]
    rows = []
    all_pass = True
    for name, value, bound in checks:
        passed = bool(np.isfinite(value) and value <= bound)
        all_pass &= passed
        rows.append((name, value, bound, passed))
    _write_csv(out / "verify.csv", ("check", "value", "bound", "passed"),
               rows)
    return 0 if all_pass else 1


def _run_stability(cfg: RunConfig, out: pathlib.Path) -> int:
    traj, model, weights = _reference_run(cfg)
    _write_timeseries(out / "timeseries.csv", traj, model, weights)
    _write_snapshots(out / "snapshots.bin", traj, cfg.dt)

    grid = traj.states[0].grid
    initial = traj.states[0]
    size = cfg.perturbation_size
    u_mode = min(2, grid.n_cells - 1)
    bump_u = Field(grid, size * cosine_mode(grid, u_mode).values)
    bump_z = Field(grid, size * cosine_mode(grid, 1).values)
    report = stability_harness(
        initial.u, initial.z, (bump_u, bump_z), model, _stepper_config(cfg)
    )
    series = [
        (k, report.times[k], report.diff_norm[k],
         report.gronwall_integrand[k])
        for k in range(len(report.times))
    ]
    _write_csv(out / "stability.csv",
               ("step", "t", "diff_norm", "gronwall_integrand"), series)
    _write_csv(out / "stability_summary.csv",
               ("fitted_c", "perturbation_size"),
               [(report.fitted_C, size)])
    return 0


def _run_convergence(cfg: RunConfig, out: pathlib.Path) -> int:
    grid = Grid(cfg.length, cfg.n_cells)
    model = _build_model(cfg)
    weights = _build_weights(cfg)
    initial = _initial_state(cfg, grid, model)

    wanted = sorted(
        {float(dt) for dt in cfg.dt_list}
        | {float(dt) / 2.0 for dt in cfg.dt_list},
        reverse=True,
    )
    runs = {
        dt: run(initial, model, _stepper_config(cfg, dt=dt)) for dt in wanted
    }
    finest = runs[wanted[-1]]
    _write_timeseries(out / "timeseries.csv", finest, model, weights)
    _write_snapshots(out / "snapshots.bin", finest, wanted[-1])

    sample_times = np.linspace(0.0, cfg.t_end, 17)
    values: Dict[str, List[float]] = {
        "cauchy_h": [], "edb_final": [], "stress_weak_form": []
    }
    for dt in cfg.dt_list:
        coarse, fine = runs[float(dt)], runs[float(dt) / 2.0]
        gap = 0.0
        for t in sample_times:
            a = interpolant_eval(coarse, float(t), "affine")
            b = interpolant_eval(fine, float(t), "affine")
            du = project_zero_mean(
                Field(grid, a.u.values - b.u.values)
            )
            dz = Field(grid, a.z.values - b.z.values)
            gap = max(gap, norm_H(du, dz))
        values["cauchy_h"].append(gap)
        values["edb_final"].append(
            float(abs(edb_residual(runs[float(dt)], model, weights)[-1]))
        )
        values["stress_weak_form"].append(
            float(np.max(original_variables_residual(runs[float(dt)], model)))
        )

    rows = [
        (study, dt, values[study][i])
        for study in ("cauchy_h", "edb_final", "stress_weak_form")
        for i, dt in enumerate(cfg.dt_list)
    ]
    _write_csv(out / "convergence.csv", ("study", "dt", "value"), rows)

    fits = []
    for study in ("cauchy_h", "edb_final", "stress_weak_form"):
        try:
            fit = fit_rate(np.asarray(cfg.dt_list), np.asarray(values[study]))
            fits.append((study, fit.slope, fit.intercept))
        except DegenerateInput:
            fits.append((study, NOT_APPLICABLE, NOT_APPLICABLE))
    _write_csv(out / "rates.csv", ("study", "slope", "intercept"), fits)
    return 0


_RUNNERS = {
    "simulate": _run_simulate,
    "relax": _run_relax,
    "verify": _run_verify,
    "stability": _run_stability,
    "convergence": _run_convergence,
}


def run_experiment(cfg: RunConfig) -> int:
    """Execute cfg's experiment, writing all outputs under cfg.output_dir.

    Returns the process exit status: 0 for success, 1 when the verify
    experiment finds a failing check.  Numerical breakdown surfaces as
    StepFailed and filesystem trouble as OSError; the command-line wrapper
    maps those onto exit codes 2 and 3.
    """
    out = pathlib.Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.source_text, encoding="utf-8")
    return _RUNNERS[cfg.experiment](cfg, out)


def _emit_error(exc: BaseException, code: int) -> int:
    line = json.dumps(
        {"error": type(exc).__name__, "exit": code, "message": str(exc)},
        sort_keys=True,
    )
    print(line, file=sys.stderr)
    return code


def _read_config_file(path: str) -> str:
    try:
        return pathlib.Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"config file is not valid UTF-8: {exc}") from exc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vps",
        description="Run gradient-flow phase separation experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        cmd = sub.add_parser(name, help=f"run the {name} experiment")
        cmd.add_argument("--config", required=True,
                         help="path to the UTF-8 config file")
        cmd.add_argument("--out", default=None,
                         help="output directory (overrides the config)")
        cmd.add_argument("--seed", type=int, default=None,
                         help="RNG seed (overrides the config)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Command-line entry point; returns the exit status."""
    args = _build_parser().parse_args(argv)
    try:
        text = _read_config_file(args.config)
        cfg = parse_config(text)
        cfg = dataclasses.replace(cfg, experiment=args.command)
        if args.out is not None:
            cfg = dataclasses.replace(cfg, output_dir=args.out)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        # The subcommand may have switched to an experiment with stricter
        # requirements than the one named in the file, so check again.
        _validate(cfg, frozenset())
        return run_experiment(cfg)
    except (ParseError, ValidationError) as exc:
        return _emit_error(exc, 1)
    except StepFailed as exc:
        return _emit_error(exc, 2)
    except OSError as exc:
        return _emit_error(exc, 3)


if __name__ == "__main__":
    sys.exit(main())
