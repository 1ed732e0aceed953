"""Experiment harness: JSON configs, single runs, sweeps and result tables."""
import csv
import io
import itertools
import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .core import SolverConfig, verify_trace, vmpt_solve
from .fem import LoadCase, StiffnessModel, TriMesh
from .io import write_nodal_csv, write_vtk
from .metrics import KINDS, MetricFactory
from .phasefield import PhaseFieldProblem, ProblemParams

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("h", "metric", "iters", "cpu_seconds", "j_final", "compliance",
                  "gl_energy", "terminate_reason")
TABLE_KINDS = ("mesh_sweep", "metric_compare", "bfgs_sweep", "single")
RUN_KEYS = {"h", "metric", "epsilon", "gamma", "tol", "seed", "init", "k_max", "m",
            "stiffness", "load", "solver", "lx", "ly"}
SOLVER_KEYS = {f.name for f in fields(SolverConfig)}


class ConfigError(ValueError):
    pass


@dataclass
class RunSpec:
    h: float = 2.0 ** -4
    metric: str = "h1"
    epsilon: float = 0.04
    gamma: float = 0.5
    tol: float = 1e-5
    seed: int = 0
    init: str = "uniform"
    k_max: int = 20000
    m: tuple = (0.5, 0.5)
    lx: float = 2.0
    ly: float = 1.0
    stiffness: dict = field(default_factory=dict)
    load: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)

    @property
    def label(self):
        return f"{self.metric}_h{-math.log2(self.h):g}_seed{self.seed}"

    def problem(self):
        params = ProblemParams(epsilon=self.epsilon, gamma=self.gamma, m=tuple(self.m),
                               stiffness=StiffnessModel(**self.stiffness),
                               load=LoadCase(**self.load))
        return PhaseFieldProblem(TriMesh.from_h(self.h, self.lx, self.ly), params)

    def solver_config(self, strict=False):
        opts = {"tol": self.tol, "k_max": self.k_max, "stop_norm": "scaled", **self.solver}
        if strict:
            opts["strict"] = True
        return SolverConfig(**opts)


@dataclass
class ExperimentSpec:
    runs: list = field(default_factory=list)
    out_dir: str = "results"
    table: str = "single"
    record_timing: bool = True

    def validate(self):
        if self.table not in TABLE_KINDS:
            raise ConfigError(f"table must be one of {', '.join(TABLE_KINDS)}")
        for i, run in enumerate(self.runs):
            if run.metric not in KINDS:
                raise ConfigError(f"runs[{i}].metric: unknown metric {run.metric!r}")
            if not run.h > 0:
                raise ConfigError(f"runs[{i}].h must be positive")
            if self.table != "single":
                e = -math.log2(run.h)
                if abs(e - round(e)) > 1e-12 or not 3 <= round(e) <= 8:
                    raise ConfigError(f"runs[{i}].h = {run.h} is not a power of two in [2^-8, 2^-3]")
            if run.init not in ("uniform", "random"):
                raise ConfigError(f"runs[{i}].init must be 'uniform' or 'random'")
        return self


def _key_line(text, key):
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _check_keys(obj, allowed, where, text, path):
    for key in obj:
        if key not in allowed:
            line = _key_line(text, key)
            at = f"{path}:{line}" if line else path
            raise ConfigError(f"{at}: unknown key {key!r} in {where}")


def parse_config(text, path="<config>"):
    """ExperimentSpec from JSON text.

    Top level: ``table``, ``out``, ``record_timing``, ``defaults`` (run
    fields), and either ``runs`` (list of run overrides) or ``sweep``
    (lists of values, expanded as a product in key order).
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _check_keys(raw, {"table", "out", "record_timing", "defaults", "runs", "sweep"},
                "top level", text, path)
    defaults = raw.get("defaults", {})
    _check_keys(defaults, RUN_KEYS, "defaults", text, path)
    entries = list(raw.get("runs", []))
    if "sweep" in raw:
        sweep = raw["sweep"]
        _check_keys(sweep, RUN_KEYS, "sweep", text, path)
        keys = list(sweep)
        for combo in itertools.product(*(sweep[k] for k in keys)):
            entries.append(dict(zip(keys, combo)))
    runs = []
    for i, entry in enumerate(entries):
        _check_keys(entry, RUN_KEYS, f"runs[{i}]", text, path)
        merged = {**defaults, **entry}
        for sub in ("solver",):
            merged[sub] = {**defaults.get(sub, {}), **entry.get(sub, {})}
            _check_keys(merged[sub], SOLVER_KEYS, f"runs[{i}].{sub}", text, path)
        try:
            runs.append(RunSpec(**merged))
        except TypeError as exc:
            raise ConfigError(f"{path}: runs[{i}]: {exc}") from None
    spec = ExperimentSpec(runs=runs, out_dir=raw.get("out", "results"),
                          table=raw.get("table", "single"),
                          record_timing=bool(raw.get("record_timing", True)))
    return spec.validate()


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), path)


def run_single(run, out_dir=None, strict=False, record_timing=True):
    """One solve; writes trace.csv, final.vtk and final.csv when out_dir is given."""
    problem = run.problem()
    factory = MetricFactory(run.metric)
    phi0 = problem.initial_guess(run.init, run.seed)
    t0 = time.process_time()
    s, trace = vmpt_solve(problem, factory, run.solver_config(strict), phi0)
    cpu = time.process_time() - t0
    st = problem.state(s)
    gl = problem.gl_energy(s)
    row = {"h": run.h, "metric": run.metric, "iters": trace.iterations,
           "cpu_seconds": cpu if record_timing else float("nan"),
           "j_final": st.compliance + problem.params.gamma * gl,
           "compliance": st.compliance, "gl_energy": gl, "terminate_reason": trace.reason}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        trace.to_csv(os.path.join(out_dir, "trace.csv"))
        write_vtk(os.path.join(out_dir, "final.vtk"), problem.mesh, s + problem.m1, st.u)
        write_nodal_csv(os.path.join(out_dir, "final.csv"), problem.mesh, s + problem.m1, st.u)
    return row, s, trace


def run_experiment(spec, strict=False):
    """Runs in spec order; a failing run becomes a row with its error as terminate_reason."""
    rows = []
    for i, run in enumerate(spec.runs):
        run_dir = os.path.join(spec.out_dir, f"run{i:02d}_{run.label}")
        try:
            row, _, trace = run_single(run, run_dir, strict, spec.record_timing)
            issues = verify_trace(trace)
            if issues:
                log.warning("run %d: %d trace invariant violations", i, len(issues))
        except Exception as exc:  # recorded per row, the sweep goes on
            log.error("run %d failed: %s", i, exc)
            row = {"h": run.h, "metric": run.metric, "iters": 0, "cpu_seconds": float("nan"),
                   "j_final": float("nan"), "compliance": float("nan"),
                   "gl_energy": float("nan"),
                   "terminate_reason": f"error: {type(exc).__name__}: {exc}"}
        rows.append(row)
    os.makedirs(spec.out_dir, exist_ok=True)
    report_table(rows, os.path.join(spec.out_dir, "results.csv"))
    return rows


def _fmt(col, val):
    if col in ("metric", "terminate_reason"):
        return str(val)
    if col == "iters":
        return str(int(val))
    val = float(val)
    if not math.isfinite(val):
        return "nan" if math.isnan(val) else ("inf" if val > 0 else "-inf")
    return repr(val)


def report_table(rows, csv_path=None):
    """Aligned text table (returned) and CSV with RESULT_COLUMNS order."""
    cells = [[_fmt(c, r[c]) for c in RESULT_COLUMNS] for r in rows]
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(RESULT_COLUMNS)
            wr.writerows(cells)
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(RESULT_COLUMNS)]
    out = io.StringIO()
    out.write("  ".join(c.rjust(w) for c, w in zip(RESULT_COLUMNS, widths)).rstrip() + "\n")
    for row in cells:
        out.write("  ".join(v.rjust(w) for v, w in zip(row, widths)).rstrip() + "\n")
    return out.getvalue()


def read_results(path):
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected header")
        rows = []
        for rec in rd:
            row = dict(rec)
            row["iters"] = int(row["iters"])
            for c in ("h", "cpu_seconds", "j_final", "compliance", "gl_energy"):
                row[c] = float(row[c])
            rows.append(row)
    return rows


def lambda_tail_median(trace, fraction=0.2):
    """Median of lambda_k over the final ``fraction`` of the iterations."""
    lam = trace.column("lambda")
    start = int(np.floor((1.0 - fraction) * len(lam)))
    return float(np.median(lam[start:]))
