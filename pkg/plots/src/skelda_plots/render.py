"""Render figures from the twin-experiment CSV exports.

Three figure kinds: time series at one grid point with uncertainty bands,
Hovmoller (space-time) diagrams, and per-member energy traces with the
admissible band overlaid.  Sources are the pipeline's CSV files; values are
parsed as float64 without any rounding, so re-serializing a plotted array
reproduces the file contents exactly.

Colors follow the comparison convention: truth black, reference filter blue,
agent ensemble red.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

TRUTH_HEADER = ["time", "grid_index", "K", "R", "Q", "A"]
SERIES_PREFIX = ["time", "grid_index", "variable"]
ENERGY_HEADER = ["time", "member", "energy"]

COLOR_TRUTH = "black"
COLOR_REFERENCE = "tab:blue"
COLOR_AGENTS = "tab:red"

KNOWN_VARIABLES = ("K", "R", "Q", "Z", "A", "MJO", "energy")


class SchemaError(ValueError):
    """A source CSV does not carry the expected columns."""


@dataclass
class PlotSpec:
    kind: str                      # timeseries | hovmoller | energy
    output: Path
    variable: str = "A"
    grid_index: int | None = None  # None: full field (hovmoller)
    truth: Path | None = None
    reference: Path | None = None
    agents: Path | None = None
    energies: list[Path] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)
    band: tuple[float, float] = (0.015, 0.08)

    def __post_init__(self):
        if self.kind not in ("timeseries", "hovmoller", "energy"):
            raise ValueError(f"unknown figure kind {self.kind!r}")
        if self.variable not in KNOWN_VARIABLES:
            raise ValueError(f"unknown variable {self.variable!r}")


def _read_rows(path: Path):
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [row for row in reader if row]
    return header, rows


def read_truth_variable(path: Path, variable: str):
    """(times, field matrix (T, n_grid)) of one variable from a truth CSV."""
    header, rows = _read_rows(path)
    if header != TRUTH_HEADER:
        raise SchemaError(
            f"{path}: expected columns {TRUTH_HEADER}, found {header}"
        )
    if variable == "Z":
        # Z = Q - q_tilde (K + R) is not stored in truth files; the standard
        # configuration value is used for the reconstruction
        q_tilde = 0.9
    col = {"K": 2, "R": 3, "Q": 4, "A": 5}
    data: dict[float, dict[int, list[float]]] = {}
    for row in rows:
        t, j = float(row[0]), int(row[1])
        data.setdefault(t, {})[j] = [float(v) for v in row[2:]]
    times = np.array(sorted(data))
    n = max(max(d.keys()) for d in data.values()) + 1
    out = np.zeros((times.size, n))
    for i, t in enumerate(times):
        for j, vals in data[t].items():
            if variable == "Z":
                out[i, j] = vals[2] - q_tilde * (vals[0] + vals[1])
            elif variable in col:
                out[i, j] = vals[col[variable] - 2]
            else:
                raise SchemaError(f"{path}: variable {variable} not derivable")
    return times, out


def read_series_variable(path: Path, variable: str):
    """(times, mean (T, n), lo, hi) from a mean/trajectory CSV.

    Mean CSVs carry (mean, spread): the band is mean +- 2 spread; trajectory
    CSVs carry (mean, lo, hi) directly.
    """
    header, rows = _read_rows(path)
    if header is None or header[:3] != SERIES_PREFIX:
        raise SchemaError(
            f"{path}: expected leading columns {SERIES_PREFIX}, found {header}"
        )
    if header[3:] == ["mean", "spread"]:
        banded = False
    elif header[3:] == ["mean", "lo", "hi"]:
        banded = True
    else:
        raise SchemaError(f"{path}: unexpected value columns {header[3:]}")
    data: dict[float, dict[int, tuple]] = {}
    for row in rows:
        if row[2] != variable:
            continue
        t, j = float(row[0]), int(row[1])
        data.setdefault(t, {})[j] = tuple(float(v) for v in row[3:])
    if not data:
        raise SchemaError(f"{path}: no rows for variable {variable!r}")
    times = np.array(sorted(data))
    n = max(max(d.keys()) for d in data.values()) + 1
    mean = np.zeros((times.size, n))
    lo = np.zeros((times.size, n))
    hi = np.zeros((times.size, n))
    for i, t in enumerate(times):
        for j, vals in data[t].items():
            mean[i, j] = vals[0]
            if banded:
                lo[i, j], hi[i, j] = vals[1], vals[2]
            else:
                lo[i, j] = vals[0] - 2.0 * vals[1]
                hi[i, j] = vals[0] + 2.0 * vals[1]
    return times, mean, lo, hi


def read_energies(path: Path):
    """(times, energies (T, n_members)) from a member-energy CSV."""
    header, rows = _read_rows(path)
    if header != ENERGY_HEADER:
        raise SchemaError(f"{path}: expected columns {ENERGY_HEADER}, found {header}")
    data: dict[float, dict[int, float]] = {}
    for row in rows:
        data.setdefault(float(row[0]), {})[int(row[1])] = float(row[2])
    times = np.array(sorted(data))
    n = max(max(d.keys()) for d in data.values()) + 1
    out = np.full((times.size, n), np.nan)
    for i, t in enumerate(times):
        for j, v in data[t].items():
            out[i, j] = v
    return times, out


def _render_timeseries(spec: PlotSpec, ax):
    j = spec.grid_index if spec.grid_index is not None else 0
    if spec.reference is not None:
        t, mean, lo, hi = read_series_variable(spec.reference, spec.variable)
        ax.fill_between(t, lo[:, j], hi[:, j], color=COLOR_REFERENCE, alpha=0.25, lw=0)
        ax.plot(t, mean[:, j], color=COLOR_REFERENCE, lw=1.2, label="reference filter")
    if spec.agents is not None:
        t, mean, lo, hi = read_series_variable(spec.agents, spec.variable)
        ax.fill_between(t, lo[:, j], hi[:, j], color=COLOR_AGENTS, alpha=0.25, lw=0)
        ax.plot(t, mean[:, j], color=COLOR_AGENTS, lw=1.2, label="agent ensemble")
    if spec.truth is not None:
        t, truth = read_truth_variable(spec.truth, spec.variable)
        ax.plot(t, truth[:, j], color=COLOR_TRUTH, lw=1.0, label="truth")
    ax.set_xlabel("time (nondimensional)")
    ax.set_ylabel(spec.variable)
    ax.set_title(f"{spec.variable} at grid point {j}")
    ax.legend(loc="best", fontsize=8)


def _render_hovmoller(spec: PlotSpec, fig, ax):
    if spec.truth is not None:
        t, fld = read_truth_variable(spec.truth, spec.variable)
        title = "truth"
    elif spec.reference is not None:
        t, fld, _, _ = read_series_variable(spec.reference, spec.variable)
        title = "reference filter"
    elif spec.agents is not None:
        t, fld, _, _ = read_series_variable(spec.agents, spec.variable)
        title = "agent ensemble"
    else:
        raise ValueError("hovmoller needs one source file")
    scale = np.max(np.abs(fld)) or 1.0
    im = ax.pcolormesh(
        np.arange(fld.shape[1]), t, fld, cmap="RdBu_r", vmin=-scale, vmax=scale,
        shading="nearest",
    )
    fig.colorbar(im, ax=ax, label=spec.variable)
    ax.set_xlabel("grid index")
    ax.set_ylabel("time (nondimensional)")
    ax.set_title(f"{spec.variable}: {title}")


def _render_energy(spec: PlotSpec, ax):
    if not spec.energies:
        raise ValueError("energy figure needs at least one member-energy file")
    colors = [COLOR_REFERENCE, COLOR_AGENTS, "tab:green", "tab:orange"]
    labels = spec.labels or [p.stem for p in spec.energies]
    for i, path in enumerate(spec.energies):
        t, en = read_energies(path)
        color = colors[i % len(colors)]
        for m in range(en.shape[1]):
            ax.plot(t, en[:, m], color=color, lw=0.6, ls="--", alpha=0.7,
                    label=labels[i] if m == 0 else None)
    lo, hi = spec.band
    ax.axhline(lo, color="k", lw=1.0)
    ax.axhline(hi, color="k", lw=1.0)
    ax.set_xlabel("time (nondimensional)")
    ax.set_ylabel("grid-mean energy")
    ax.set_title("per-member energy and admissible band")
    ax.legend(loc="best", fontsize=8)


def render(spec: PlotSpec) -> Path:
    """Write the figure described by the spec; returns the output path."""
    fig, ax = plt.subplots(figsize=(8, 4.5), dpi=130)
    if spec.kind == "timeseries":
        _render_timeseries(spec, ax)
    elif spec.kind == "hovmoller":
        _render_hovmoller(spec, fig, ax)
    else:
        _render_energy(spec, ax)
    fig.tight_layout()
    spec.output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(spec.output)
    plt.close(fig)
    return spec.output


def parse_spec_file(path: Path) -> PlotSpec:
    """key = value spec file mirroring the command-line flags."""
    values: dict = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    kwargs = {
        "kind": values.get("kind", "timeseries"),
        "output": Path(values["output"]),
        "variable": values.get("variable", "A"),
    }
    if "grid_index" in values:
        kwargs["grid_index"] = int(values["grid_index"])
    for key in ("truth", "reference", "agents"):
        if key in values:
            kwargs[key] = Path(values[key])
    if "energies" in values:
        kwargs["energies"] = [Path(p) for p in values["energies"].split(",") if p]
    if "labels" in values:
        kwargs["labels"] = [s.strip() for s in values["labels"].split(",")]
    if "band" in values:
        lo, hi = values["band"].split(",")
        kwargs["band"] = (float(lo), float(hi))
    return PlotSpec(**kwargs)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="skelda-plot", description="Render twin-experiment figures from CSV exports"
    )
    parser.add_argument("--spec", type=Path, help="spec file with key = value lines")
    parser.add_argument("--kind", choices=["timeseries", "hovmoller", "energy"])
    parser.add_argument("--output", type=Path)
    parser.add_argument("--variable", default="A")
    parser.add_argument("--grid-index", type=int)
    parser.add_argument("--truth", type=Path)
    parser.add_argument("--reference", type=Path)
    parser.add_argument("--agents", type=Path)
    parser.add_argument("--energies", type=Path, nargs="*")
    parser.add_argument("--labels", nargs="*")
    args = parser.parse_args(argv)
    try:
        if args.spec is not None:
            spec = parse_spec_file(args.spec)
        else:
            if args.kind is None or args.output is None:
                parser.error("--kind and --output are required without --spec")
            spec = PlotSpec(
                kind=args.kind,
                output=args.output,
                variable=args.variable,
                grid_index=args.grid_index,
                truth=args.truth,
                reference=args.reference,
                agents=args.agents,
                energies=list(args.energies or []),
                labels=list(args.labels or []),
            )
        render(spec)
    except (SchemaError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
