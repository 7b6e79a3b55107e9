"""Batch driver: ``ma-mesh run`` and ``ma-mesh compare``.

Exit codes: 0 when every run converged, 1 when some failed, 2 on
configuration or I/O errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from . import io
from .linalg import LinSolveConfig
from .monitor import MonitorSpec
from .solvers import SolverConfig, canonical_algorithm, run

log = logging.getLogger("ma_mesh")

SUMMARY_COLUMNS = ("algorithm", "params", "N", "converged", "iterations", "final_equi", "wall_seconds")

_FLOAT_KEYS = {
    "fp_gamma", "pma_gamma", "pma_dt", "newton_delta_scale", "shift_epsilon", "equi_tol",
    "divergence_factor", "pin_value", "lin_abs_tol", "lin_rel_tol",
}
_INT_KEYS = {"max_outer", "tangle_patience", "pin_cell", "lin_max_iter", "correctors"}
_KNOWN_KEYS = _FLOAT_KEYS | _INT_KEYS | {
    "name", "monitor", "algorithm", "mesh_sizes", "output_dir", "formats",
    "fp_gamma_sweep", "pma_sweep", "newton_analytic_gradient",
}
_FORMATS = ("csv", "vtk")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    algorithm: str
    monitor: MonitorSpec
    mesh_sizes: list
    name: str = ""
    output_dir: str = "."
    formats: tuple = ("csv",)
    fp_gamma_sweep: list = field(default_factory=list)
    pma_sweep: list = field(default_factory=list)
    solver_options: dict = field(default_factory=dict)
    linear_options: dict = field(default_factory=dict)

    def runs(self):
        """Yield ``(run_name, params_label, N, SolverConfig)`` for every sweep entry."""
        if self.algorithm == "FP":
            grid = [({"fp_gamma": g}, f"gamma={g:g}", f"g{g:g}") for g in self.fp_gamma_sweep]
        elif self.algorithm == "PMA":
            grid = [
                ({"pma_gamma": g, "pma_dt": dt}, f"gamma={g:g};dt={dt:g}", f"g{g:g}_dt{dt:g}")
                for g, dt in self.pma_sweep
            ]
        else:
            grid = [({}, "none", "")]
        prefix = self.name or f"{self.algorithm.lower()}_{self.monitor.name}"
        for params, label, tag in grid:
            for n in self.mesh_sizes:
                options = dict(self.solver_options)
                options.update(params)
                cfg = SolverConfig(self.algorithm, linear=LinSolveConfig(**self.linear_options), **options)
                parts = [prefix, tag, f"n{n}"]
                yield "_".join(p for p in parts if p), label, n, cfg


def _line_of(text: str, key: str) -> int:
    needle = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return lineno
    return 1


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Validate a JSON experiment document; errors name the offending line."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}:1: top level must be a JSON object")

    def fail(key, msg):
        raise ConfigError(f"{source}:{_line_of(text, key)}: {key}: {msg}")

    for key in doc:
        if key not in _KNOWN_KEYS:
            fail(key, "unknown key")

    for key in ("algorithm", "monitor", "mesh_sizes"):
        if key not in doc:
            raise ConfigError(f"{source}:1: missing required key {key!r}")

    try:
        algorithm = canonical_algorithm(doc["algorithm"])
    except ValueError as exc:
        fail("algorithm", str(exc))

    mon = doc["monitor"]
    try:
        if isinstance(mon, str):
            monitor = MonitorSpec.preset(mon)
        elif isinstance(mon, dict) and set(mon) == {"alpha1", "alpha2", "alpha3"}:
            monitor = MonitorSpec(float(mon["alpha1"]), float(mon["alpha2"]), float(mon["alpha3"]))
        else:
            fail("monitor", "expected a preset name or {alpha1, alpha2, alpha3}")
    except (TypeError, ValueError) as exc:
        fail("monitor", str(exc))

    sizes = doc["mesh_sizes"]
    if not isinstance(sizes, list) or not sizes or not all(
        isinstance(n, int) and not isinstance(n, bool) and n >= 3 for n in sizes
    ):
        fail("mesh_sizes", "expected a non-empty list of integers >= 3")

    solver, linear = {}, {}
    for key in _FLOAT_KEYS | _INT_KEYS:
        if key not in doc:
            continue
        value = doc[key]
        ok = isinstance(value, int) if key in _INT_KEYS else isinstance(value, (int, float))
        if isinstance(value, bool) or not ok:
            fail(key, f"expected a number, got {value!r}")
        if key.startswith("lin_") or key == "correctors":
            linear[{"lin_abs_tol": "abs_tol", "lin_rel_tol": "rel_tol",
                    "lin_max_iter": "max_iter"}.get(key, key)] = value
        else:
            solver[key] = value
    if "newton_analytic_gradient" in doc:
        if not isinstance(doc["newton_analytic_gradient"], bool):
            fail("newton_analytic_gradient", "expected true or false")
        solver["newton_analytic_gradient"] = doc["newton_analytic_gradient"]

    fp_sweep = doc.get("fp_gamma_sweep", [])
    pma_sweep = doc.get("pma_sweep", [])
    if not isinstance(fp_sweep, list) or not all(isinstance(g, (int, float)) for g in fp_sweep):
        fail("fp_gamma_sweep", "expected a list of numbers")
    if not isinstance(pma_sweep, list) or not all(
        isinstance(p, list) and len(p) == 2 and all(isinstance(v, (int, float)) for v in p)
        for p in pma_sweep
    ):
        fail("pma_sweep", "expected a list of [gamma, dt] pairs")

    if algorithm == "FP":
        if not fp_sweep:
            if "fp_gamma" not in solver:
                raise ConfigError(f"{source}:1: FP requires key 'fp_gamma' (or 'fp_gamma_sweep')")
            fp_sweep = [solver.pop("fp_gamma")]
    elif algorithm == "PMA":
        if not pma_sweep:
            for key in ("pma_gamma", "pma_dt"):
                if key not in solver:
                    raise ConfigError(f"{source}:1: PMA requires key {key!r} (or 'pma_sweep')")
            pma_sweep = [[solver.pop("pma_gamma"), solver.pop("pma_dt")]]

    formats = doc.get("formats", ["csv"])
    if not isinstance(formats, list) or any(f not in _FORMATS for f in formats):
        fail("formats", f"expected a list drawn from {list(_FORMATS)}")
    name = doc.get("name", "")
    if not isinstance(name, str):
        fail("name", "expected a string")
    output_dir = doc.get("output_dir", ".")
    if not isinstance(output_dir, str):
        fail("output_dir", "expected a string")

    cfg = ExperimentConfig(
        algorithm=algorithm, monitor=monitor, mesh_sizes=list(sizes), name=name,
        output_dir=output_dir, formats=tuple(formats), fp_gamma_sweep=list(fp_sweep),
        pma_sweep=[list(p) for p in pma_sweep], solver_options=solver, linear_options=linear,
    )
    try:
        list(cfg.runs())
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}:1: {exc}") from None
    return cfg


def _run_one(job):
    name, label, n, solver_cfg, monitor, out_dir, formats = job
    t0 = time.perf_counter()
    try:
        result = run(solver_cfg, monitor, n)
        converged, iterations, final = result.converged, result.iterations, result.final_equi
        if not converged:
            log.warning("%s failed: %s", name, result.failure)
        io.write_history_csv(result.history, os.path.join(out_dir, f"{name}_equi.csv"))
        if "csv" in formats:
            io.write_mesh_csv(result.pair.physical, os.path.join(out_dir, f"{name}_mesh.csv"))
        if "vtk" in formats:
            io.write_vtk(result.pair.physical, os.path.join(out_dir, f"{name}.vtk"), name)
    except OSError:
        raise
    except Exception as exc:  # one bad sweep entry must not abort the others
        log.error("%s crashed: %s", name, exc)
        converged, iterations, final = False, 0, float("nan")
    wall = time.perf_counter() - t0
    return {
        "algorithm": solver_cfg.algorithm, "params": label, "N": n,
        "converged": "true" if converged else "false", "iterations": iterations,
        "final_equi": format(final, ".17g"), "wall_seconds": f"{wall:.3f}",
    }


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None, jobs: int = 1) -> int:
    """Run every sweep entry, write per-run files and ``summary.csv``.

    Returns the process exit status (0 all converged, 1 otherwise).
    """
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    work = [
        (name, label, n, scfg, cfg.monitor, out_dir, cfg.formats)
        for name, label, n, scfg in cfg.runs()
    ]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_one, work))
    else:
        rows = [_run_one(job) for job in work]
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        log.info("%s %s N=%s converged=%s iterations=%s", row["algorithm"], row["params"],
                 row["N"], row["converged"], row["iterations"])
    return 0 if all(r["converged"] == "true" for r in rows) else 1


def _configure_logging():
    level = {
        "quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG,
    }.get(os.environ.get("MA_MESH_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ma-mesh", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a single solve or a parameter sweep")
    p_run.add_argument("config", help="JSON experiment file")
    p_run.add_argument("--out", help="output directory (overrides output_dir)")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p_cmp = sub.add_parser("compare", help="max corner distance between two mesh CSVs")
    p_cmp.add_argument("mesh_a")
    p_cmp.add_argument("mesh_b")
    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            print(format(io.compare_meshes(args.mesh_a, args.mesh_b), ".17g"))
            return 0
        with open(args.config) as fh:
            text = fh.read()
        cfg = parse_config(text, args.config)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        return run_experiment(cfg, args.out, args.jobs)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"ma-mesh: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
