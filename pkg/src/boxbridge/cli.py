"""Command line front end: scenario files in, plot-ready artifacts out.

Subcommands
-----------
solve         run the fixed-point solver for a scenario; emit per-time
              snapshot CSVs, the residual trace, and a JSON manifest
simulate      sample reflected paths for a scenario (open or closed loop);
              emit the path ensemble and a terminal-marginal comparison
kernel-check  cross-validate the interval heat kernel against the image
              oracle on a 101-node lattice and report the deviations
validate      re-run the invariant checks on artifacts already on disk

A scenario is one self-contained JSON document (see load_scenario for the
schema).  All numeric artifacts are CSV with shortest round-trip float
formatting so an external reader can re-check every invariant bit-exactly;
manifests are JSON and record every parameter needed to reproduce the run.
Files are written to a temporary name and atomically renamed.

Exit codes: 0 ok, 2 configuration error, 3 no convergence, 4 invariant
failure, 5 missing prerequisite artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .bridge import FpkEngine, KernelEngine, solve
from .core import (
    BoxDomain,
    ConfigError,
    ControlOutOfRangeError,
    DivergedError,
    DomainMismatchError,
    DriftSpec,
    ExpressionError,
    FloorDominantError,
    Grid,
    GridDensity,
    LinearSolveFailure,
    MaxIterationsError,
    MissingSolutionError,
    NonPositiveError,
    OutOfDomainError,
    SolverConfig,
    ZeroMassError,
    l1_distance,
    normalize,
)
from .expressions import parse_expression
from .fpk import FpkProblem
from .kernel1d import ReflectedHeatKernel
from .sde import (
    ControlField,
    empirical_marginal,
    ks_statistic,
    simulate,
    write_ensemble_csv,
)

__all__ = ["Scenario", "load_scenario", "main"]

FORMAT_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3
EXIT_INVARIANT = 4
EXIT_MISSING = 5

_SCENARIO_KEYS = {
    "schema_version", "name", "domain", "theta", "drift", "rho0_expr",
    "rho1_expr", "grid", "time_steps", "series_terms", "fp_tol",
    "fp_max_iter", "density_floor", "engine", "n_snapshots", "outputs",
}
_OUTPUT_KINDS = ("snapshots", "residuals")


# ---------------------------------------------------------------------------
# Scenario loading.


@dataclass(frozen=True)
class Scenario:
    """A fully resolved scenario: parsed fields plus the canonical dict.

    `raw` carries every field with defaults applied; its canonical JSON
    serialization is what the manifest stores and hashes, so a manifest
    alone suffices to reproduce the run.
    """

    raw: dict
    name: str
    grid: Grid
    drift: DriftSpec
    config: SolverConfig
    engine: str
    rho0: GridDensity
    rho1: GridDensity
    n_snapshots: int
    outputs: tuple

    def sha256(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def make_engine(self):
        if self.engine == "kernel":
            return KernelEngine(self.grid, self.config.theta,
                                self.config.series_terms,
                                self.config.density_floor)
        problem = FpkProblem(self.grid, self.drift, self.config.theta,
                             dt=self.config.dt)
        return FpkEngine(problem, self.config.density_floor)


def _need(doc: dict, key: str, kind, where: str):
    if key not in doc:
        raise ConfigError(f"{where}: missing field {key!r}")
    value = doc[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ConfigError(f"{where}: field {key!r} has type "
                          f"{type(value).__name__}")
    return value


def _scenario_text(ref) -> str:
    path = Path(ref)
    if path.is_file():
        return path.read_text()
    res = resources.files("boxbridge.scenarios").joinpath(f"{ref}.json")
    if res.is_file():
        return res.read_text()
    raise ConfigError(f"scenario {ref!r} is neither a file nor a bundled name")


def load_scenario(ref) -> Scenario:
    """Load and validate a scenario by file path or bundled name.

    The document must carry schema_version 1 and the fields: name, domain
    (lower/upper lists), theta, drift (kind zero | potential with an
    expression), rho0_expr, rho1_expr, grid (points_per_axis list),
    time_steps, series_terms, fp_tol, fp_max_iter, density_floor, engine
    (kernel | fpk), and optionally n_snapshots and outputs.  Both density
    expressions are evaluated on the grid at load time and must be finite
    and nonnegative everywhere.
    """
    where = f"scenario {ref!r}"
    try:
        doc = json.loads(_scenario_text(ref))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{where}: invalid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: top level must be an object")
    unknown = set(doc) - _SCENARIO_KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    if doc.get("schema_version") != 1:
        raise ConfigError(f"{where}: schema_version must be 1")

    name = _need(doc, "name", str, where)
    dom_doc = _need(doc, "domain", dict, where)
    domain = BoxDomain(_need(dom_doc, "lower", list, where),
                       _need(dom_doc, "upper", list, where))
    grid_doc = _need(doc, "grid", dict, where)
    grid = Grid(domain, _need(grid_doc, "points_per_axis", list, where))

    config = SolverConfig(
        theta=_need(doc, "theta", float, where),
        time_steps=_need(doc, "time_steps", int, where),
        series_terms=_need(doc, "series_terms", int, where),
        fp_tol=_need(doc, "fp_tol", float, where),
        fp_max_iter=_need(doc, "fp_max_iter", int, where),
        density_floor=_need(doc, "density_floor", float, where),
    )

    drift_doc = _need(doc, "drift", dict, where)
    drift_kind = _need(drift_doc, "kind", str, where)
    if drift_kind == "zero":
        drift = DriftSpec.zero()
        drift_raw = {"kind": "zero"}
    elif drift_kind == "potential":
        text = _need(drift_doc, "expression", str, where)
        expr = parse_expression(text, grid.dim)
        parts = expr.gradient()

        def grad(*coords, _parts=parts):
            return tuple(p(*coords) for p in _parts)

        drift = DriftSpec.from_potential(expr.evaluate, grad)
        try:
            drift.potential_on(grid)
        except NonPositiveError as exc:
            raise ConfigError(f"{where}: potential: {exc}")
        drift_raw = {"kind": "potential", "expression": text}
    else:
        raise ConfigError(f"{where}: drift kind must be zero or potential, "
                          f"got {drift_kind!r}")

    engine = _need(doc, "engine", str, where)
    if engine not in ("kernel", "fpk"):
        raise ConfigError(f"{where}: engine must be kernel or fpk")
    if engine == "kernel" and drift.kind != "zero":
        raise ConfigError(f"{where}: the kernel engine propagates zero-drift "
                          "diffusion only; use engine fpk with a potential")

    densities = {}
    for key in ("rho0_expr", "rho1_expr"):
        text = _need(doc, key, str, where)
        vals = parse_expression(text, grid.dim).evaluate(*grid.meshgrid())
        if not np.all(np.isfinite(vals)):
            raise ConfigError(f"{where}: {key} is not finite on all nodes")
        if np.any(vals < 0):
            raise ConfigError(f"{where}: {key} is negative on some nodes")
        densities[key] = normalize(GridDensity(grid, vals))

    n_snapshots = doc.get("n_snapshots", 11)
    if not isinstance(n_snapshots, int) or isinstance(n_snapshots, bool):
        raise ConfigError(f"{where}: n_snapshots must be an integer")
    outputs = doc.get("outputs", list(_OUTPUT_KINDS))
    if (not isinstance(outputs, list)
            or any(o not in _OUTPUT_KINDS for o in outputs)):
        raise ConfigError(f"{where}: outputs entries must be among "
                          f"{_OUTPUT_KINDS}")

    raw = {
        "schema_version": 1,
        "name": name,
        "domain": {"lower": list(domain.lower), "upper": list(domain.upper)},
        "theta": config.theta,
        "drift": drift_raw,
        "rho0_expr": doc["rho0_expr"],
        "rho1_expr": doc["rho1_expr"],
        "grid": {"points_per_axis": list(grid.points_per_axis)},
        "time_steps": config.time_steps,
        "series_terms": config.series_terms,
        "fp_tol": config.fp_tol,
        "fp_max_iter": config.fp_max_iter,
        "density_floor": config.density_floor,
        "engine": engine,
        "n_snapshots": n_snapshots,
        "outputs": list(outputs),
    }
    return Scenario(raw, name, grid, drift, config, engine,
                    densities["rho0_expr"], densities["rho1_expr"],
                    n_snapshots, tuple(outputs))


# ---------------------------------------------------------------------------
# Artifact writers and readers.


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path: Path, doc: dict) -> None:
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_table(path: Path, columns, fields) -> None:
    """CSV with shortest round-trip doubles, one field array per column."""
    lines = [",".join(columns)]
    flat = [np.asarray(f, dtype=float).ravel().tolist() for f in fields]
    for row in zip(*flat):
        lines.append(",".join(repr(v) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def _read_table(path: Path):
    """Header list and a float matrix of shape (rows, columns)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        body = fh.read()
    if not body.strip():
        return header, np.zeros((0, len(header)))
    data = np.array([[float(v) for v in line.split(",")]
                     for line in body.splitlines() if line.strip()])
    return header, data


def _write_snapshot_csv(path: Path, grid: Grid, snap, u_slice) -> None:
    dim = grid.dim
    cols = ([f"x{j + 1}" for j in range(dim)]
            + ["rho_opt", "phi", "phihat"]
            + [f"u{j + 1}" for j in range(dim)])
    fields = (list(grid.meshgrid())
              + [snap.rho_opt.values, snap.phi.values, snap.phihat.values]
              + [u_slice[..., j] for j in range(dim)])
    _write_table(path, cols, fields)


def _write_residuals_csv(path: Path, trace: np.ndarray) -> None:
    its = np.arange(1, trace.shape[0] + 1)
    cols = ["iteration", "d_hilbert_phi1", "d_hilbert_phihat0"]
    _write_table(path, cols, [its, trace[:, 0], trace[:, 1]])


def _write_comparison_csv(path: Path, grid: Grid, empirical: GridDensity,
                          target: GridDensity,
                          uncontrolled: GridDensity) -> None:
    cols = ([f"x{j + 1}" for j in range(grid.dim)]
            + ["empirical", "target", "uncontrolled"])
    fields = (list(grid.meshgrid())
              + [empirical.values, target.values, uncontrolled.values])
    _write_table(path, cols, fields)


def _trapezoid(values: np.ndarray, x: np.ndarray) -> float:
    return float(np.sum((values[:-1] + values[1:]) * np.diff(x)) / 2.0)


def _table_mass(header, data) -> float:
    """Trapezoid mass of the rho_opt column, rebuilt from coordinates only."""
    rho = data[:, header.index("rho_opt")]
    x1 = data[:, header.index("x1")]
    if "x2" not in header:
        return _trapezoid(rho, x1)
    x2 = data[:, header.index("x2")]
    n2 = int(np.count_nonzero(x1 == x1[0]))
    n1 = data.shape[0] // n2
    inner = np.sum((rho.reshape(n1, n2)[:, :-1]
                    + rho.reshape(n1, n2)[:, 1:]) * np.diff(x2[:n2]), axis=1) / 2.0
    return _trapezoid(inner, x1.reshape(n1, n2)[:, 0])


# ---------------------------------------------------------------------------
# solve


def _cmd_solve(args) -> int:
    t_start = time.perf_counter()
    sc = load_scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_snapshots = sc.n_snapshots if args.snapshots is None else args.snapshots

    sol = solve(sc.rho0, sc.rho1, sc.config, sc.make_engine(),
                n_snapshots=n_snapshots)

    snapshot_files = []
    if "snapshots" in sc.outputs:
        pad = max(2, len(str(n_snapshots - 1)))
        for i, snap in enumerate(sol.snapshots):
            fname = f"snapshot_{i:0{pad}d}.csv"
            _write_snapshot_csv(out / fname, sc.grid, snap, sol.control[i])
            snapshot_files.append(
                {"index": i, "t": float(sol.times[i]), "file": fname})
    residuals_file = None
    if "residuals" in sc.outputs:
        residuals_file = "residuals.csv"
        _write_residuals_csv(out / residuals_file, sol.residual_trace)

    final = {"phi1": float(sol.residual_trace[-1, 0]),
             "phihat0": float(sol.residual_trace[-1, 1])}
    _write_json(out / "manifest.json", {
        "format_version": FORMAT_VERSION,
        "command": "solve",
        "scenario": sc.raw,
        "scenario_sha256": sc.sha256(),
        "n_snapshots": n_snapshots,
        "engine": sol.engine_kind,
        "iterations": sol.n_iterations,
        "final_residuals": final,
        "snapshot_files": snapshot_files,
        "residuals_file": residuals_file,
        "wall_time_s": time.perf_counter() - t_start,
    })
    print(f"solve {sc.name}: converged in {sol.n_iterations} iterations, "
          f"final residuals {final['phi1']:.3e} / {final['phihat0']:.3e}, "
          f"artifacts in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _control_from_artifacts(sc: Scenario, out: Path) -> ControlField:
    manifest_path = out / "manifest.json"
    if not manifest_path.is_file():
        raise MissingSolutionError(
            f"closed loop needs solve artifacts in {out}; run solve first")
    doc = json.loads(manifest_path.read_text())
    if doc.get("scenario_sha256") != sc.sha256():
        raise MissingSolutionError(
            "solve artifacts in the output directory belong to a different "
            "scenario")
    entries = doc.get("snapshot_files") or []
    if not entries:
        raise MissingSolutionError("solve manifest lists no snapshot files")
    times, slices = [], []
    for entry in sorted(entries, key=lambda e: e["index"]):
        path = out / entry["file"]
        if not path.is_file():
            raise MissingSolutionError(f"missing snapshot file {path}")
        header, data = _read_table(path)
        u = np.stack(
            [data[:, header.index(f"u{j + 1}")].reshape(sc.grid.shape)
             for j in range(sc.grid.dim)], axis=-1)
        times.append(float(entry["t"]))
        slices.append(u)
    return ControlField(np.asarray(times), sc.grid, np.stack(slices, axis=0))


def _uncontrolled_terminal(sc: Scenario) -> GridDensity:
    vals = sc.make_engine().run_forward(sc.rho0.values, [1.0])[0]
    return GridDensity(sc.grid, vals)


def _cmd_simulate(args) -> int:
    t_start = time.perf_counter()
    sc = load_scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    control = _control_from_artifacts(sc, out) if args.closed_loop else None
    ensemble = simulate(args.paths, sc.drift, sc.rho0, sc.config, args.seed,
                        control=control)
    write_ensemble_csv(ensemble, out / "ensemble.csv", config={
        "scenario": sc.name,
        "scenario_sha256": sc.sha256(),
        "closed_loop": bool(args.closed_loop),
    })

    stats = {"ks_terminal_vs_target": None,
             "l1_terminal_vs_target": None,
             "l1_terminal_vs_uncontrolled": None}
    comparison_file = None
    if args.paths > 0:
        empirical = empirical_marginal(ensemble, 1.0, sc.grid)
        uncontrolled = _uncontrolled_terminal(sc)
        comparison_file = "terminal_comparison.csv"
        _write_comparison_csv(out / comparison_file, sc.grid, empirical,
                              sc.rho1, uncontrolled)
        stats["l1_terminal_vs_target"] = l1_distance(empirical, sc.rho1)
        stats["l1_terminal_vs_uncontrolled"] = l1_distance(empirical,
                                                           uncontrolled)
        if sc.grid.dim == 1:
            stats["ks_terminal_vs_target"] = ks_statistic(
                ensemble.states[:, -1, 0], sc.rho1)

    _write_json(out / "simulate_manifest.json", {
        "format_version": FORMAT_VERSION,
        "command": "simulate",
        "scenario": sc.raw,
        "scenario_sha256": sc.sha256(),
        "seed": args.seed,
        "n_paths": args.paths,
        "closed_loop": bool(args.closed_loop),
        "dt": sc.config.dt,
        "ensemble_file": "ensemble.csv",
        "sidecar": "ensemble.json",
        "comparison_file": comparison_file,
        "statistics": stats,
        "wall_time_s": time.perf_counter() - t_start,
    })
    loop = "closed" if args.closed_loop else "open"
    print(f"simulate {sc.name}: {args.paths} {loop}-loop paths, seed "
          f"{args.seed}, artifacts in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# kernel-check


def _cmd_kernel_check(args) -> int:
    lo, hi = args.interval
    domain = BoxDomain([lo], [hi])
    kern = ReflectedHeatKernel(domain, args.theta, args.terms)
    lattice = Grid(domain, 101)
    x = lattice.axes[0]
    w = lattice.axis_weights[0]

    K_img = kern.eval_images(x[:, None], x[None, :], args.t,
                             n_images=args.images)
    K_cos = kern.eval_cosine(x[:, None], x[None, :], args.t, terms=args.terms)
    try:
        needed = kern.required_terms(args.t, 1e-10)
        truncation_ok = args.terms >= needed
    except DivergedError:
        needed = None
        truncation_ok = False

    K_half = kern.eval_images(x[:, None], x[None, :], args.t / 2.0,
                              n_images=args.images)
    discrepancy = float(np.max(np.abs(K_cos - K_img)))
    row_dev = float(np.max(np.abs(K_img @ w - 1.0)))
    ck_dev = float(np.max(np.abs((K_half * w[None, :]) @ K_half - K_img)))
    # quadrature checks are meaningful only when the lattice resolves the
    # kernel width sqrt(2 theta t/2)
    resolved = float(np.sqrt(args.theta * args.t)) >= 2.0 * (hi - lo) / 100.0

    failures = []
    if truncation_ok and discrepancy > 1e-10:
        failures.append("cosine and image kernels disagree beyond 1e-10 "
                        "despite sufficient truncation")
    # at tiny t the Gaussian tails underflow to exactly 0.0 in doubles, so
    # strict positivity is only checkable where the lattice resolves the
    # kernel; a negative entry is a genuine failure at any t
    if float(K_img.min()) < 0.0:
        failures.append("image kernel has negative entries")
    elif resolved and not float(K_img.min()) > 0.0:
        failures.append("image kernel is not strictly positive")
    if resolved and row_dev > 1e-8:
        failures.append("kernel row sums deviate from 1 beyond 1e-8")
    if resolved and ck_dev > 1e-6:
        failures.append("Chapman-Kolmogorov deviation beyond 1e-6")

    report = {
        "interval": [lo, hi],
        "theta": args.theta,
        "t": args.t,
        "terms": args.terms,
        "images": args.images,
        "required_terms_1e-10": needed,
        "truncation_sufficient": truncation_ok,
        "max_discrepancy_cosine_vs_images": discrepancy,
        "min_kernel_images": float(K_img.min()),
        "max_kernel_images": float(K_img.max()),
        "min_kernel_cosine": float(K_cos.min()),
        "row_sum_deviation": row_dev,
        "chapman_kolmogorov_deviation": ck_dev,
        "lattice_resolves_kernel": resolved,
        "failures": failures,
    }
    for key in ("required_terms_1e-10", "truncation_sufficient",
                "max_discrepancy_cosine_vs_images", "min_kernel_images",
                "max_kernel_images", "row_sum_deviation",
                "chapman_kolmogorov_deviation", "lattice_resolves_kernel"):
        print(f"{key} = {report[key]}")
    if not truncation_ok:
        print(f"note: cosine truncation insufficient at t = {args.t} "
              "(discrepancy not gated; the image kernel is authoritative)")
    for message in failures:
        print(f"FAIL: {message}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "kernel_check.json", report)
    return EXIT_INVARIANT if failures else EXIT_OK


# ---------------------------------------------------------------------------
# validate


def _validate_solve_artifacts(out: Path, doc: dict) -> list:
    fails = []
    fp_tol = doc["scenario"]["fp_tol"]
    final = doc["final_residuals"]
    if not (final["phi1"] < fp_tol and final["phihat0"] < fp_tol):
        fails.append("manifest final residuals are not below fp_tol")

    if doc.get("residuals_file"):
        path = out / doc["residuals_file"]
        if not path.is_file():
            fails.append(f"missing {doc['residuals_file']}")
        else:
            header, data = _read_table(path)
            if data.shape[0] != doc["iterations"]:
                fails.append("residual trace row count differs from the "
                             "manifest iteration count")
            col = data[:, header.index("d_hilbert_phi1")]
            if col.size > 1 and not np.all(np.diff(col) < 0):
                fails.append("phi1 residual trace is not strictly decreasing")

    for entry in doc.get("snapshot_files") or []:
        path = out / entry["file"]
        if not path.is_file():
            fails.append(f"missing {entry['file']}")
            continue
        header, data = _read_table(path)
        rho = data[:, header.index("rho_opt")]
        phi = data[:, header.index("phi")]
        phihat = data[:, header.index("phihat")]
        scale = max(1.0, float(np.abs(rho).max()))
        if float(np.abs(rho - phi * phihat).max()) > 1e-12 * scale:
            fails.append(f"{entry['file']}: rho_opt deviates from phi*phihat")
        mass = _table_mass(header, data)
        if abs(mass - 1.0) > 1e-6:
            fails.append(f"{entry['file']}: mass {mass:.9f} outside 1e-6")
    return fails


def _validate_simulate_artifacts(out: Path, doc: dict) -> list:
    fails = []
    path = out / doc["ensemble_file"]
    if not path.is_file():
        return [f"missing {doc['ensemble_file']}"]
    header, data = _read_table(path)
    lower = doc["scenario"]["domain"]["lower"]
    upper = doc["scenario"]["domain"]["upper"]
    dim = len(lower)
    if data.shape[0] == 0:
        if doc["n_paths"] != 0:
            fails.append("ensemble file is empty but n_paths > 0")
        return fails
    for j in range(dim):
        xj = data[:, header.index(f"x{j + 1}")]
        if np.any(xj < lower[j]) or np.any(xj > upper[j]):
            fails.append(f"x{j + 1} leaves the domain")
    dL = data[:, header.index("dL")]
    dU = data[:, header.index("dU")]
    step = data[:, header.index("step")]
    if np.any(dL < 0) or np.any(dU < 0):
        fails.append("negative local-time increments")
    if np.any((dL > 0) & (dU > 0)):
        fails.append("simultaneous lower and upper local-time increments")
    if np.any(dL[step == 0] != 0) or np.any(dU[step == 0] != 0):
        fails.append("nonzero local time at the initial step")
    if dim == 1:
        x1 = data[:, header.index("x1")]
        if np.any(x1[dL > 0] != lower[0]) or np.any(x1[dU > 0] != upper[0]):
            fails.append("local time increments away from the wall")
    return fails


def _cmd_validate(args) -> int:
    out = Path(args.out)
    solve_manifest = out / "manifest.json"
    sim_manifest = out / "simulate_manifest.json"
    if not solve_manifest.is_file() and not sim_manifest.is_file():
        print(f"error: no manifest found in {out}", file=sys.stderr)
        return EXIT_MISSING
    failures = []
    if solve_manifest.is_file():
        doc = json.loads(solve_manifest.read_text())
        found = _validate_solve_artifacts(out, doc)
        failures += found
        print(f"solve artifacts: {len(doc.get('snapshot_files') or [])} "
              f"snapshots checked, {len(found)} failures")
    if sim_manifest.is_file():
        doc = json.loads(sim_manifest.read_text())
        found = _validate_simulate_artifacts(out, doc)
        failures += found
        print(f"simulate artifacts: {doc['n_paths']} paths checked, "
              f"{len(found)} failures")
    for message in failures:
        print(f"FAIL: {message}")
    return EXIT_INVARIANT if failures else EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxbridge",
        description="Steer probability densities under reflected diffusions "
                    "on box domains.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run the fixed-point solver")
    p.add_argument("--scenario", required=True,
                   help="scenario JSON file or bundled name")
    p.add_argument("--out", default=".", help="artifact directory")
    p.add_argument("--snapshots", type=int, default=None,
                   help="override the scenario snapshot count")
    p.set_defaults(handler=_cmd_solve)

    p = sub.add_parser("simulate", help="sample reflected paths")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paths", type=int, default=100)
    p.add_argument("--closed-loop", action="store_true",
                   help="apply the control from prior solve artifacts")
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("kernel-check",
                       help="cross-validate the interval heat kernel")
    p.add_argument("--interval", nargs=2, type=float, default=[-1.0, 1.0],
                   metavar=("LO", "HI"))
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--terms", type=int, default=100)
    p.add_argument("--images", type=int, default=50)
    p.add_argument("--out", default=None,
                   help="also write kernel_check.json here")
    p.set_defaults(handler=_cmd_kernel_check)

    p = sub.add_parser("validate",
                       help="re-check invariants on existing artifacts")
    p.add_argument("--out", required=True, help="artifact directory")
    p.set_defaults(handler=_cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, ExpressionError, DomainMismatchError,
            OutOfDomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MaxIterationsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except MissingSolutionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ControlOutOfRangeError, DivergedError, FloorDominantError,
            LinearSolveFailure, NonPositiveError, ZeroMassError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
