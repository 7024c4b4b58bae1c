"""Run configuration, experiment presets, field output and the CLI.

The configuration is a flat ``key = value`` text file ('#' starts a
comment).  Recognized keys::

    preset            one of fig1..fig16, table2, table3 (applied first,
                      remaining keys override); optional inline overrides
                      as in  "preset = table3 tau=0.01"
    scheme            galerkin | low_order | fct
    theta             time-stepping parameter in [0, 1]
    mu, chi           proliferation and haptotaxis rates
    epsilon           protease time scale
    alpha_inv         diffusion coefficient of the extended model (0 = off)
    tau               requested time step
    tau_policy        enforce | warn | off
    tol               fixed-point tolerance
    damping           fixed-point damping factor in (0, 1]
    max_iterations    fixed-point iteration cap
    refinements       mesh refinement level r
    domain_min/max    corners of the square domain
    final_time        end of the simulation
    snapshot_times    comma-separated times within [0, final_time]
    output_dir        where snapshots and logs go
    output_formats    comma-separated subset of csv_grid, vtk_legacy
    initial           'tumor-corner' (default) or 'expressions'
    u0, c0, p0        expressions in x, y for initial = expressions

The environment variable ``INVASIONFCT_OUTPUT_ROOT`` prepends a root to
relative output directories.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import Mesh, build_uniform_mesh
from .stepper import (
    SchemeConfig,
    SimulationResult,
    State,
    StepFailure,
    Stepper,
    initialize,
)


class ConfigError(ValueError):
    """Malformed or out-of-range run configuration."""


def tumor_corner_initial_data():
    """Initial data of the invasion experiments: a tumor seed at the origin.

    u0 = exp(-|x|^2), c0 = 1 - exp(-|x|^2)/2, p0 = exp(-|x|^2)/2.
    """
    def u0(x, y):
        return np.exp(-(x**2 + y**2))

    def c0(x, y):
        return 1.0 - 0.5 * np.exp(-(x**2 + y**2))

    def p0(x, y):
        return 0.5 * np.exp(-(x**2 + y**2))

    return u0, c0, p0


@dataclass
class RunManifest:
    """Fully validated description of one run."""

    config: SchemeConfig = field(default_factory=SchemeConfig)
    refinements: int = 5
    domain_min: float = 0.0
    domain_max: float = 20.0
    snapshot_times: list = field(default_factory=list)
    output_dir: Path = Path("out")
    output_formats: list = field(default_factory=lambda: ["csv_grid"])
    initial: str = "tumor-corner"
    expressions: dict = field(default_factory=dict)

    def build_mesh(self) -> Mesh:
        lo, hi = self.domain_min, self.domain_max
        return build_uniform_mesh(((lo, lo), (hi, hi)), self.refinements)

    def initial_functions(self):
        if self.initial == "tumor-corner":
            return tumor_corner_initial_data()
        if self.initial == "expressions":
            return tuple(
                _expression_function(self.expressions.get(k, d), k)
                for k, d in (("u0", "0"), ("c0", "1"), ("p0", "0"))
            )
        raise ConfigError(f"initial: unknown initial-condition preset {self.initial!r}")

    def resolved_output_dir(self) -> Path:
        root = os.environ.get("INVASIONFCT_OUTPUT_ROOT")
        out = self.output_dir
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


_SAFE_FUNCS = {
    "exp": np.exp, "sin": np.sin, "cos": np.cos, "tan": np.tan,
    "sqrt": np.sqrt, "abs": np.abs, "minimum": np.minimum,
    "maximum": np.maximum, "pi": np.pi, "e": np.e,
}


def _expression_function(expr: str, key: str):
    code = compile(expr, f"<{key}>", "eval")
    for name in code.co_names:
        if name not in _SAFE_FUNCS and name not in ("x", "y"):
            raise ConfigError(f"{key}: name {name!r} is not allowed in expressions")

    def f(x, y):
        return eval(code, {"__builtins__": {}}, {**_SAFE_FUNCS, "x": x, "y": y})

    return f


# keys that map straight onto SchemeConfig fields
_CONFIG_KEYS = {
    "scheme": ("scheme", str),
    "theta": ("theta", float),
    "mu": ("mu", float),
    "chi": ("chi", float),
    "epsilon": ("eps", float),
    "alpha_inv": ("alpha_inv", float),
    "tau": ("tau", float),
    "tau_policy": ("tau_policy", str),
    "tol": ("tol", float),
    "damping": ("damping", float),
    "max_iterations": ("max_iterations", int),
    "final_time": ("final_time", float),
}
_MANIFEST_KEYS = {
    "refinements": int,
    "domain_min": float,
    "domain_max": float,
    "snapshot_times": str,
    "output_dir": str,
    "output_formats": str,
    "initial": str,
    "u0": str,
    "c0": str,
    "p0": str,
}

# Experiment presets.  Figure presets reproduce the qualitative runs of the
# invasion study; table presets the quantitative convergence studies.  The
# paper's figure numbering has no fig15; here it is the line-extract
# companion of the haptotaxis-dominated comparison (fig13/fig14/fig16).
_HAPTO = {"mu": 1e-4, "chi": 1.0, "final_time": 40.0,
          "snapshot_times": "10,20,30,40", "tau": 0.1, "tau_policy": "warn"}
PRESETS: dict[str, dict] = {
    "fig1": {"scheme": "galerkin", "alpha_inv": 0.1, "final_time": 30.0,
             "snapshot_times": "0,10,20,30", "tau": 0.1},
    "fig3": {"scheme": "fct", "alpha_inv": 0.1, "final_time": 30.0,
             "snapshot_times": "0,10,20,30", "tau": 0.1, "tau_policy": "warn"},
    "fig5": {"scheme": "galerkin", "alpha_inv": 1e-3, "final_time": 30.0,
             "snapshot_times": "0,10,20,30", "tau": 0.1},
    "fig7": {"scheme": "fct", "alpha_inv": 1e-3, "final_time": 30.0,
             "snapshot_times": "0,10,20,30", "tau": 0.1, "tau_policy": "warn"},
    "fig9": {"scheme": "fct", "final_time": 30.0,
             "snapshot_times": "0,10,20,30", "tau": 0.1, "tau_policy": "warn"},
    "fig11": {"scheme": "fct", "final_time": 20.0, "snapshot_times": "10,20",
              "tau": 0.1, "tau_policy": "warn"},
    "fig12": {"scheme": "galerkin", "mu": 1e-4, "final_time": 15.0,
              "snapshot_times": "0,5,15", "tau": 0.1},
    "fig13": dict(_HAPTO, scheme="low_order"),
    "fig14": dict(_HAPTO, scheme="fct"),
    "fig15": dict(_HAPTO, scheme="fct"),
    "fig16": dict(_HAPTO, scheme="fct", theta=1.0),
    "table2": {"scheme": "fct", "tau": 0.1, "tau_policy": "enforce",
               "final_time": 50.0},
    "table3": {"scheme": "fct", "tau": 1.0, "tau_policy": "warn",
               "final_time": 50.0},
}
# even-numbered early figures plot the same runs along the line y = x
PRESETS["fig2"] = PRESETS["fig1"]
PRESETS["fig4"] = PRESETS["fig3"]
PRESETS["fig6"] = PRESETS["fig5"]
PRESETS["fig8"] = PRESETS["fig7"]
PRESETS["fig10"] = PRESETS["fig9"]


def parse_config(text: str) -> RunManifest:
    """Parse a key-value run configuration into a validated manifest."""
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        raw[key.strip().lower().replace("-", "_")] = value.strip()
    return manifest_from_mapping(raw)


def manifest_from_mapping(raw: dict) -> RunManifest:
    raw = dict(raw)
    merged: dict[str, str] = {}
    preset = raw.pop("preset", None)
    if preset is not None:
        tokens = str(preset).split()
        name = tokens[0]
        if name not in PRESETS:
            raise ConfigError(f"preset: unknown preset {name!r}")
        merged.update({k: str(v) for k, v in PRESETS[name].items()})
        for tok in tokens[1:]:
            if "=" not in tok:
                raise ConfigError(f"preset: bad inline override {tok!r}")
            k, _, v = tok.partition("=")
            merged[k.strip().lower().replace("-", "_")] = v.strip()
    merged.update(raw)

    cfg_kwargs: dict = {}
    manifest = RunManifest()
    expressions: dict[str, str] = {}
    snapshot_spec = None
    for key, value in merged.items():
        if key in _CONFIG_KEYS:
            fieldname, conv = _CONFIG_KEYS[key]
            try:
                cfg_kwargs[fieldname] = conv(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        elif key in _MANIFEST_KEYS:
            conv = _MANIFEST_KEYS[key]
            try:
                parsed = conv(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
            if key == "snapshot_times":
                snapshot_spec = parsed
            elif key == "output_formats":
                manifest.output_formats = [
                    f.strip() for f in parsed.split(",") if f.strip()
                ]
            elif key == "output_dir":
                manifest.output_dir = Path(parsed)
            elif key in ("u0", "c0", "p0"):
                expressions[key] = parsed
            else:
                setattr(manifest, key, parsed)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")

    try:
        manifest.config = SchemeConfig(**cfg_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    manifest.expressions = expressions
    if expressions and manifest.initial == "tumor-corner":
        manifest.initial = "expressions"

    if manifest.refinements < 0:
        raise ConfigError("refinements: must be non-negative")
    if manifest.domain_max <= manifest.domain_min:
        raise ConfigError("domain_max must exceed domain_min")
    for fmt in manifest.output_formats:
        if fmt not in ("csv_grid", "vtk_legacy"):
            raise ConfigError(f"output_formats: unknown format {fmt!r}")
    if snapshot_spec is not None:
        try:
            times = [float(t) for t in snapshot_spec.split(",") if t.strip()]
        except ValueError as exc:
            raise ConfigError(f"snapshot_times: {exc}") from exc
        T = manifest.config.final_time
        for t in times:
            if not 0.0 <= t <= T:
                raise ConfigError(
                    f"snapshot_times: {t} outside the run interval [0, {T}]"
                )
        manifest.snapshot_times = sorted(times)
    manifest.initial_functions()  # validate expressions early
    return manifest


# -- field post-processing -------------------------------------------------

def integral_value(field_vals: np.ndarray, lumped_mass: np.ndarray) -> float:
    """Exact integral of the Q1 interpolant: sum_i m_i v_i."""
    return float(lumped_mass @ field_vals)


def mean_value(field_vals: np.ndarray, lumped_mass: np.ndarray, area: float) -> float:
    """Mean value of the Q1 interpolant over the domain."""
    if len(field_vals) != len(lumped_mass):
        raise ValueError("field length does not match the lumped mass vector")
    return integral_value(field_vals, lumped_mass) / area


def point_value(field_vals: np.ndarray, mesh: Mesh, point) -> float:
    """Q1 interpolation of a nodal field at a point of the closed domain."""
    x, y = float(point[0]), float(point[1])
    n = 2**mesh.level
    tol = 1e-12 * max(1.0, mesh.extent)
    sx = (x - mesh.origin[0]) / mesh.h
    sy = (y - mesh.origin[1]) / mesh.h
    if not (-tol <= sx * mesh.h <= mesh.extent + tol) or not (
        -tol <= sy * mesh.h <= mesh.extent + tol
    ):
        raise ValueError(f"point {point} lies outside the domain")
    i = min(int(sx), n - 1)
    j = min(int(sy), n - 1)
    xi, eta = sx - i, sy - j
    k = j * (n + 1) + i
    v00, v10 = field_vals[k], field_vals[k + 1]
    v01, v11 = field_vals[k + n + 1], field_vals[k + n + 2]
    return float(
        v00 * (1 - xi) * (1 - eta)
        + v10 * xi * (1 - eta)
        + v11 * xi * eta
        + v01 * (1 - xi) * eta
    )


def line_extract(field_vals: np.ndarray, mesh: Mesh, samples: int = 201):
    """Sample the field along the diagonal line y = x of the square domain.

    Returns (arc_length, values) at uniform arc-length spacing from the
    lower-left to the upper-right corner.
    """
    lo = mesh.origin[0]
    hi = lo + mesh.extent
    xs = np.linspace(lo, hi, samples)
    vals = np.array([point_value(field_vals, mesh, (x, x)) for x in xs])
    arc = (xs - lo) * math.sqrt(2.0)
    return arc, vals


# -- snapshot and log output -------------------------------------------------

def write_snapshot(state: State, mesh: Mesh, directory, formats=("csv_grid",),
                   tag: str | None = None) -> list[Path]:
    """Write one snapshot in the requested formats; returns written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tag = tag if tag is not None else f"t{state.t:g}"
    paths = []
    for fmt in formats:
        if fmt == "csv_grid":
            path = directory / f"snapshot_{tag}.csv"
            _write_csv_grid(path, state, mesh)
        elif fmt == "vtk_legacy":
            path = directory / f"snapshot_{tag}.vtk"
            _write_vtk_legacy(path, state, mesh)
        else:
            raise ValueError(f"unknown snapshot format {fmt!r}")
        paths.append(path)
    return paths


def _write_csv_grid(path: Path, state: State, mesh: Mesh) -> None:
    try:
        with open(path, "w") as fh:
            fh.write("x,y,u,c,p\n")
            for k in range(mesh.n_nodes):
                x, y = mesh.coords[k]
                fh.write(
                    f"{x:.17g},{y:.17g},{state.u[k]:.17g},"
                    f"{state.c[k]:.17g},{state.p[k]:.17g}\n"
                )
    except OSError as exc:
        raise OSError(f"cannot write snapshot {path}: {exc}") from exc


def read_csv_grid(path) -> dict[str, np.ndarray]:
    """Read back a csv_grid snapshot into column arrays."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    return {name: np.atleast_1d(data[name]) for name in data.dtype.names}


def _write_vtk_legacy(path: Path, state: State, mesh: Mesh) -> None:
    n = mesh.nodes_per_side
    try:
        with open(path, "w") as fh:
            fh.write("# vtk DataFile Version 3.0\n")
            fh.write(f"invasion fields at t={state.t:.17g}\n")
            fh.write("ASCII\nDATASET STRUCTURED_GRID\n")
            fh.write(f"DIMENSIONS {n} {n} 1\n")
            fh.write(f"POINTS {mesh.n_nodes} double\n")
            for k in range(mesh.n_nodes):
                x, y = mesh.coords[k]
                fh.write(f"{x:.17g} {y:.17g} 0\n")
            fh.write(f"POINT_DATA {mesh.n_nodes}\n")
            for name, vals in (("u", state.u), ("c", state.c), ("p", state.p)):
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in vals:
                    fh.write(f"{v:.17g}\n")
    except OSError as exc:
        raise OSError(f"cannot write snapshot {path}: {exc}") from exc


def write_diagnostics_log(result: SimulationResult, path) -> Path:
    """One JSON record per time step."""
    path = Path(path)
    with open(path, "w") as fh:
        for rec in result.log.records():
            fh.write(json.dumps(dataclasses.asdict(rec)) + "\n")
    return path


def table3_row(result: SimulationResult) -> dict:
    """Terminal-step summary in the layout of the time-step study table."""
    mesh = result.mesh
    corner = (mesh.origin[0] + mesh.extent, mesh.origin[1] + mesh.extent)
    last = result.log.record(len(result.log) - 1)
    return {
        "tau": result.config.tau,
        "c_corner": point_value(result.state.c, mesh, corner),
        "dc": last.dc,
        "p_corner": point_value(result.state.p, mesh, corner),
        "dp": last.dp,
        "u_corner": point_value(result.state.u, mesh, corner),
        "du": last.du,
        "iterations": last.iterations,
    }


def summarize(result: SimulationResult) -> dict:
    """Integral/mean summary of the final state plus iteration statistics."""
    mesh = result.mesh
    from .assembly import assembler_for

    m = assembler_for(mesh).lumped_mass()
    area = mesh.extent**2
    out = {"t": result.state.t, "steps": result.n_steps}
    for name, vals in (("u", result.state.u), ("c", result.state.c),
                       ("p", result.state.p)):
        out[f"integral_{name}"] = integral_value(vals, m)
        out[f"mean_{name}"] = mean_value(vals, m, area)
        out[f"min_{name}"] = float(vals.min())
        out[f"max_{name}"] = float(vals.max())
    if result.n_steps:
        out["last_iterations"] = int(result.log.column("iterations")[-1])
    return out


def execute(manifest: RunManifest) -> SimulationResult:
    """Run a manifest and write its outputs."""
    mesh = manifest.build_mesh()
    state = initialize(mesh, *manifest.initial_functions())
    outdir = manifest.resolved_output_dir()
    outdir.mkdir(parents=True, exist_ok=True)
    if not os.access(outdir, os.W_OK):
        raise OSError(f"output directory {outdir} is not writable")
    stepper = Stepper(mesh, manifest.config)
    result = stepper.run(state, snapshot_times=manifest.snapshot_times)
    for t, snap in result.snapshots:
        write_snapshot(snap, mesh, outdir, manifest.output_formats, tag=f"t{t:g}")
    write_snapshot(result.state, mesh, outdir, manifest.output_formats, tag="final")
    write_diagnostics_log(result, outdir / "diagnostics.jsonl")
    with open(outdir / "summary.json", "w") as fh:
        json.dump(summarize(result), fh, indent=2)
    return result


# -- command line ------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="invasionfct",
        description="Positivity-preserving FEM-FCT solver for the "
                    "cancer-invasion chemotaxis system",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a simulation from a config file")
    run.add_argument("config", nargs="?", help="key=value configuration file")
    run.add_argument("--preset", choices=sorted(PRESETS))
    run.add_argument("--scheme", choices=("galerkin", "low_order", "fct"))
    run.add_argument("--tau", type=float)
    run.add_argument("--refinements", type=int)
    run.add_argument("--theta", type=float)
    run.add_argument("--mu", type=float)
    run.add_argument("--chi", type=float)
    run.add_argument("--alpha-inv", type=float, dest="alpha_inv")
    run.add_argument("--tau-policy", choices=("enforce", "warn", "off"),
                     dest="tau_policy")
    run.add_argument("--out", dest="output_dir")
    run.add_argument("--snapshot-times", dest="snapshot_times")
    run.add_argument("--final-time", type=float, dest="final_time")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        raw: dict[str, str] = {}
        if args.config:
            raw.update(
                {
                    k: v
                    for k, v in _read_config_file(args.config).items()
                }
            )
        if args.preset:
            # command-line preset is applied first, file keys override
            raw = {"preset": args.preset, **raw}
        for key in ("scheme", "tau", "refinements", "theta", "mu", "chi",
                    "alpha_inv", "tau_policy", "output_dir", "snapshot_times",
                    "final_time"):
            val = getattr(args, key)
            if val is not None:
                raw[key] = str(val)
        manifest = manifest_from_mapping(raw)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        result = execute(manifest)
    except StepFailure as exc:
        print(f"step failure: {exc}", file=sys.stderr)
        return 1
    summary = summarize(result)
    print(json.dumps(summary, indent=2))
    return 0


def _read_config_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc}") from exc
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, _, value = line.partition("=")
        raw[key.strip().lower().replace("-", "_")] = value.strip()
    return raw


if __name__ == "__main__":
    sys.exit(main())
