"""Render publication-style figures from the laboratory's output files.

The renderer is deliberately dumb: it parses the documented CSV columns
and the binary snapshot layout, draws what it finds, and never derives a
physical quantity that is not already a cell in an input file (partial
sums and log scales are presentation arithmetic, nothing more).  That
keeps every number in a figure traceable to the run that produced it.

Four figure kinds exist:

* `energy` — the total energy trajectory with the dissipation ledger:
  the balance path E(0) minus accumulated increments overlays the energy
  curve and the area between start level and curve is annotated with the
  dissipated total.
* `rates` — log-log refinement values with the fitted lines and slopes
  the run itself emitted.
* `relax` — one panel per scaling case showing how the distance to the
  limit dynamics shrinks along the eps ladder.
* `kymograph` — space-time heat maps of both fields from a snapshot
  stream.

`plot(spec)` writes a PNG and returns its path; `main` wraps it in a
command line that exits nonzero when inputs are missing or malformed.
"""

from __future__ import annotations

import argparse
import json
import pathlib
import struct
import sys
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["FigureSpec", "MalformedInput", "plot", "main"]

KINDS = ("energy", "rates", "relax", "kymograph")

DOCUMENTED_FILENAMES = {
    "energy": "energy.png",
    "rates": "rates.png",
    "relax": "relax.png",
    "kymograph": "kymograph.png",
}

_PNG_METADATA = {"Software": "vpsplots"}
_DPI = 150


class MalformedInput(ValueError):
    """An input file exists but does not match the documented format."""


@dataclass(frozen=True)
class FigureSpec:
    """What to draw: input files, a figure kind, and the image path."""

    inputs: Tuple[str, ...]
    kind: str
    output: str

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(
                f"kind must be one of {', '.join(KINDS)}; got {self.kind!r}"
            )
        if not self.inputs:
            raise ValueError("at least one input file is required")


def _read_table(path: str) -> Dict[str, List[str]]:
    """Parse a comma-separated table into column lists keyed by header."""
    try:
        text = pathlib.Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise MalformedInput(f"{path}: {exc}") from exc
    lines = [line for line in text.splitlines() if line]
    if not lines:
        raise MalformedInput(f"{path}: empty file")
    header = lines[0].split(",")
    columns: Dict[str, List[str]] = {name: [] for name in header}
    if len(columns) != len(header):
        raise MalformedInput(f"{path}: repeated column names")
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise MalformedInput(
                f"{path}: line {lineno} has {len(cells)} cells, "
                f"expected {len(header)}"
            )
        for name, cell in zip(header, cells):
            columns[name].append(cell)
    return columns


def _numeric(table: Dict[str, List[str]], path: str, name: str) -> np.ndarray:
    if name not in table:
        raise MalformedInput(f"{path}: missing column {name!r}")
    try:
        return np.array([float(cell) for cell in table[name]])
    except ValueError as exc:
        raise MalformedInput(f"{path}: column {name!r}: {exc}") from exc


def _text(table: Dict[str, List[str]], path: str, name: str) -> List[str]:
    if name not in table:
        raise MalformedInput(f"{path}: missing column {name!r}")
    return table[name]


def read_snapshots(path: str) -> Tuple[dict, List[Tuple[int, np.ndarray, np.ndarray]]]:
    """Parse the binary snapshot stream: JSON header then fixed records."""
    try:
        raw = pathlib.Path(path).read_bytes()
    except OSError as exc:
        raise MalformedInput(f"{path}: {exc}") from exc
    newline = raw.find(b"\n")
    if newline < 0:
        raise MalformedInput(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
        n = int(header["N"])
        count = int(header["count"])
    except (ValueError, KeyError) as exc:
        raise MalformedInput(f"{path}: bad header: {exc}") from exc
    record = 8 + 2 * n * 8
    body = raw[newline + 1:]
    if len(body) != count * record:
        raise MalformedInput(
            f"{path}: body holds {len(body)} bytes, expected {count * record}"
        )
    records = []
    for i in range(count):
        chunk = body[i * record:(i + 1) * record]
        (step,) = struct.unpack_from("<Q", chunk, 0)
        flat = np.frombuffer(chunk, dtype="<f8", offset=8, count=2 * n)
        records.append((int(step), flat[:n].copy(), flat[n:].copy()))
    return header, records


def _energy_figure(spec: FigureSpec) -> plt.Figure:
    path = spec.inputs[0]
    table = _read_table(path)
    t = _numeric(table, path, "t")
    total = _numeric(table, path, "energy_total")
    increments = _numeric(table, path, "dissipation_increment")
    ledger = total[0] - np.cumsum(increments)

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(t, total, color="tab:blue", lw=1.8, label="energy")
    ax.plot(t, ledger, color="tab:orange", lw=1.2, ls="--",
            label="start minus accumulated dissipation")
    ax.fill_between(t, total, total[0], color="tab:blue", alpha=0.15)
    dissipated = float(np.sum(increments))
    ax.annotate(
        f"dissipated: {dissipated:.6g}",
        xy=(0.97, 0.95), xycoords="axes fraction",
        ha="right", va="top",
    )
    ax.set_xlabel("t")
    ax.set_ylabel("energy")
    ax.legend(loc="center right", fontsize=8)
    fig.tight_layout()
    return fig


def _rates_figure(spec: FigureSpec) -> plt.Figure:
    if len(spec.inputs) < 2:
        raise MalformedInput(
            "rates figures need the values table and the fits table"
        )
    values_path, fits_path = spec.inputs[0], spec.inputs[1]
    values = _read_table(values_path)
    fits = _read_table(fits_path)
    study_col = _text(values, values_path, "study")
    dt = _numeric(values, values_path, "dt")
    value = _numeric(values, values_path, "value")

    fitted: Dict[str, Tuple[Optional[float], Optional[float]]] = {}
    for row, study in enumerate(_text(fits, fits_path, "study")):
        slope_cell = _text(fits, fits_path, "slope")[row]
        intercept_cell = _text(fits, fits_path, "intercept")[row]
        if slope_cell == "NA" or intercept_cell == "NA":
            fitted[study] = (None, None)
        else:
            fitted[study] = (float(slope_cell), float(intercept_cell))

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for study in sorted(set(study_col)):
        picks = [i for i, s in enumerate(study_col) if s == study]
        xs, ys = dt[picks], value[picks]
        slope, intercept = fitted.get(study, (None, None))
        label = (f"{study} (slope {slope:.3f})" if slope is not None
                 else f"{study} (slope NA)")
        line, = ax.plot(xs, ys, "o", ms=5, label=label)
        if slope is not None:
            span = np.array([xs.min(), xs.max()])
            ax.plot(span, np.exp(intercept) * span ** slope,
                    color=line.get_color(), lw=1.0, alpha=0.7)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("dt")
    ax.set_ylabel("value")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


_CASE_ORDER = ("CH", "vCH", "mAC")


def _relax_figure(spec: FigureSpec) -> plt.Figure:
    rows: List[Tuple[str, float, float, float, float]] = []
    for path in spec.inputs:
        table = _read_table(path)
        cases = _text(table, path, "case")
        eps = _numeric(table, path, "eps")
        u_err = _numeric(table, path, "sup_u_error")
        z_err = _numeric(table, path, "sup_z_error")
        gap = _numeric(table, path, "energy_gap")
        rows.extend(zip(cases, eps, u_err, z_err, gap))
    present = [c for c in _CASE_ORDER if any(r[0] == c for r in rows)]
    extra = sorted({r[0] for r in rows} - set(_CASE_ORDER))
    panels = present + extra
    if not panels:
        raise MalformedInput("relax inputs contain no data rows")

    fig, axes = plt.subplots(
        1, len(panels), figsize=(3.6 * len(panels), 3.6),
        sharey=True, squeeze=False,
    )
    for ax, case in zip(axes[0], panels):
        picks = sorted(
            (r for r in rows if r[0] == case), key=lambda r: -r[1]
        )
        eps = np.array([r[1] for r in picks])
        ax.plot(eps, [r[2] for r in picks], "o-", label="sup-t u gap")
        ax.plot(eps, [r[3] for r in picks], "s-", label="sup-t z gap")
        ax.plot(eps, [r[4] for r in picks], "^-", label="energy gap")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.invert_xaxis()
        ax.set_title(case)
        ax.set_xlabel("eps")
    axes[0][0].set_ylabel("distance to limit")
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    return fig


def _kymograph_figure(spec: FigureSpec) -> plt.Figure:
    header, records = read_snapshots(spec.inputs[0])
    length = float(header.get("L", 1.0))
    dt = float(header.get("dt", 1.0))
    u = np.stack([rec[1] for rec in records])
    z = np.stack([rec[2] for rec in records])
    t_max = records[-1][0] * dt if len(records) > 1 else dt

    fig, axes = plt.subplots(1, 2, figsize=(9.0, 4.0), sharey=True)
    for ax, data, name in ((axes[0], u, "u"), (axes[1], z, "z")):
        image = ax.imshow(
            data, origin="lower", aspect="auto",
            extent=(0.0, length, 0.0, max(t_max, dt)),
            cmap="viridis", interpolation="nearest",
        )
        ax.set_title(name)
        ax.set_xlabel("x")
        fig.colorbar(image, ax=ax, shrink=0.9)
    axes[0].set_ylabel("t")
    fig.tight_layout()
    return fig


_BUILDERS = {
    "energy": _energy_figure,
    "rates": _rates_figure,
    "relax": _relax_figure,
    "kymograph": _kymograph_figure,
}


def plot(spec: FigureSpec) -> pathlib.Path:
    """Render the figure described by spec and return the written path."""
    fig = _BUILDERS[spec.kind](spec)
    out = pathlib.Path(spec.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.savefig(out, dpi=_DPI, metadata=_PNG_METADATA)
    finally:
        plt.close(fig)
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vps-plot",
        description="Render figures from laboratory output files.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        cmd = sub.add_parser(kind, help=f"render a {kind} figure")
        cmd.add_argument("inputs", nargs="+", help="input data files")
        cmd.add_argument("--out", required=True, help="output image path")
    batch = sub.add_parser(
        "all", help="render all four figures with their documented names"
    )
    batch.add_argument("--simulate", required=True,
                       help="directory of a simulate run")
    batch.add_argument("--convergence", required=True,
                       help="directory of a convergence run")
    batch.add_argument("--relax", required=True, nargs="+",
                       help="directories of relax runs, one per case")
    batch.add_argument("--out-dir", required=True,
                       help="directory for the four images")
    return parser


def _run_all(args: argparse.Namespace) -> List[pathlib.Path]:
    out_dir = pathlib.Path(args.out_dir)
    sim = pathlib.Path(args.simulate)
    conv = pathlib.Path(args.convergence)
    specs = [
        FigureSpec((str(sim / "timeseries.csv"),), "energy",
                   str(out_dir / DOCUMENTED_FILENAMES["energy"])),
        FigureSpec(
            (str(conv / "convergence.csv"), str(conv / "rates.csv")),
            "rates", str(out_dir / DOCUMENTED_FILENAMES["rates"])),
        FigureSpec(
            tuple(str(pathlib.Path(d) / "relax_errors.csv")
                  for d in args.relax),
            "relax", str(out_dir / DOCUMENTED_FILENAMES["relax"])),
        FigureSpec((str(sim / "snapshots.bin"),), "kymograph",
                   str(out_dir / DOCUMENTED_FILENAMES["kymograph"])),
    ]
    return [plot(spec) for spec in specs]


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Command-line entry point; exits nonzero on bad inputs."""
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "all":
            for path in _run_all(args):
                print(path)
        else:
            spec = FigureSpec(tuple(args.inputs), args.command, args.out)
            print(plot(spec))
        return 0
    except (MalformedInput, ValueError, OSError) as exc:
        print(f"vps-plot: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
