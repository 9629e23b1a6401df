"""Scenario-driven command-line frontend for the solvers.

A scenario is a JSON document declaring a tree, a model payload and optional
solver settings.  Each subcommand parses and validates the scenario,
dispatches to the matching solver, prints a summary to stdout and, when
``--out DIR`` is given, writes one CSV table per solution process plus a
machine-readable ``summary.json``.  Reruns with the same scenario and flags
produce byte-identical output.

Exit codes:
    0   success
    2   solver failure: singular backward step, stalled continuation,
        non-convergent reference solve, or an oracle comparison above the
        acceptance threshold
    3   validation failure: bad increment moments, incomplete or
        inconsistent payload, bad settings, or a failed monotonicity check
    4   input problems: unreadable files, malformed JSON, expression syntax
        errors, bad command-line usage
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .bsde import Generator, bsde_residuals, solve_bsde
from .filtration import (
    MOMENT_TOL,
    AdaptedProcess,
    IncrementDistribution,
    ProbabilityTree,
    validate_increments,
)
from .linear_fbsde import (
    SINGULAR_TOL,
    LinearCoefficients,
    NotSolvableError,
    riccati_matrices,
    solve_linear,
)
from .model_dsl import ExprEvalError, ExprSyntaxError, eval_expr, parse_expr
from .nonlinear_fbsde import (
    ContinuationConfig,
    ContinuationFailedError,
    NonlinearModel,
    check_monotone,
    solve_continuation,
)
from .oracle import OracleFailedError, build_residual_system, solve_global_newton

SCHEMA_VERSION = 1
KINDS = ("bsde", "linear", "nonlinear")

EXIT_OK = 0
EXIT_SOLVER = 2
EXIT_VALIDATION = 3
EXIT_INPUT = 4


class ScenarioError(ValueError):
    """The scenario was read but its content is invalid (exit 3)."""


class InputError(ValueError):
    """The input could not be read or parsed at all (exit 4)."""


# -- small parsing utilities ---------------------------------------------------


def _check_keys(mapping: dict, allowed: set[str], where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ScenarioError(f"{where} has unknown keys: {', '.join(sorted(unknown))}")


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ScenarioError(f"{where} is missing required key {key!r}")
    return mapping[key]


def _as_number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{where} must be a number, got {value!r}")
    out = float(value)
    if not math.isfinite(out):
        raise ScenarioError(f"{where} must be finite")
    return out


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError(f"{where} must be an integer, got {value!r}")
    return value


def _parse_array(value, where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where} is not a numeric array: {exc}") from exc
    if arr.size == 0:
        raise ScenarioError(f"{where} must not be empty")
    if not np.isfinite(arr).all():
        raise ScenarioError(f"{where} must be finite")
    return arr


def _parse_dsl(text, m: int, n: int, where: str):
    if not isinstance(text, str):
        raise ScenarioError(f"{where} must be a string expression")
    try:
        return parse_expr(text, m, n)
    except ExprSyntaxError as exc:
        raise InputError(f"{where}: {exc}") from exc


def _parse_expr_list(value, count: int, m: int, n: int, where: str) -> list:
    if not isinstance(value, list) or len(value) != count:
        raise ScenarioError(f"{where} must be a list of {count} expressions")
    return [_parse_dsl(text, m, n, f"{where}[{i}]") for i, text in enumerate(value)]


def _build_checked(factory, *args, **kwargs):
    """Turn a library-level ValueError into a scenario validation failure."""
    try:
        return factory(*args, **kwargs)
    except (ScenarioError, InputError):
        raise
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc


# -- tree parsing ----------------------------------------------------------------


def _parse_step(raw, where: str) -> IncrementDistribution:
    if isinstance(raw, str):
        if raw == "rademacher":
            return IncrementDistribution.rademacher()
        match = re.fullmatch(r"trinomial\(([^)]*)\)", raw)
        if match:
            try:
                p = float(match.group(1))
            except ValueError as exc:
                raise ScenarioError(f"{where}: bad trinomial parameter {match.group(1)!r}") from exc
            return _build_checked(IncrementDistribution.trinomial, p)
        raise ScenarioError(f"{where}: unknown step shorthand {raw!r} (use 'rademacher' or 'trinomial(p)')")
    if isinstance(raw, dict):
        _check_keys(raw, {"points", "probs"}, where)
        points = _parse_array(_require(raw, "points", where), f"{where}.points")
        probs = _parse_array(_require(raw, "probs", where), f"{where}.probs")
        return _build_checked(IncrementDistribution, points=points, probs=probs)
    raise ScenarioError(f"{where} must be a shorthand string or an object with points and probs")


def _parse_tree(value) -> ProbabilityTree:
    if not isinstance(value, dict):
        raise ScenarioError("tree must be an object")
    _check_keys(value, {"horizon", "step", "steps"}, "tree")
    if "steps" in value:
        if "step" in value:
            raise ScenarioError("tree takes either one repeated step or a steps list, not both")
        entries = value["steps"]
        if not isinstance(entries, list) or not entries:
            raise ScenarioError("tree.steps must be a non-empty list")
        steps = [_parse_step(raw, f"tree.steps[{t}]") for t, raw in enumerate(entries)]
        if "horizon" in value and _as_int(value["horizon"], "tree.horizon") != len(steps):
            raise ScenarioError(f"tree.horizon disagrees with the {len(steps)} listed steps")
    else:
        horizon = _as_int(_require(value, "horizon", "tree"), "tree.horizon")
        if horizon < 1:
            raise ScenarioError("tree.horizon must be at least 1")
        steps = [_parse_step(_require(value, "step", "tree"), "tree.step")] * horizon
    tree = _build_checked(ProbabilityTree, steps)
    for t, step in enumerate(tree.steps):
        report = validate_increments(step)
        if not report.ok:
            names = ", ".join(name for name, _ in report.failures)
            raise ScenarioError(f"tree step {t} fails the moment checks: {names}")
    return tree


# -- offset (inhomogeneous term) parsing -----------------------------------------


def _slab_from_table(tree: ProbabilityTree, t: int, table, rows: int, where: str) -> np.ndarray:
    if not isinstance(table, dict):
        raise ScenarioError(f"{where} must map node paths to component vectors")
    expected = {".".join(str(k) for k in node): i for i, node in enumerate(tree.nodes(t))}
    extra = sorted(set(table) - set(expected))
    if extra:
        raise ScenarioError(f"{where} has entries for unknown nodes: {extra}")
    missing = sorted(set(expected) - set(table))
    if missing:
        raise ScenarioError(f"{where} is missing nodes: {missing}")
    slab = np.empty((len(expected), rows, 1))
    for key, i in expected.items():
        vec = _parse_array(table[key], f"{where}[{key!r}]")
        if vec.size != rows:
            raise ScenarioError(f"{where}[{key!r}] must have {rows} components")
        slab[i] = vec.reshape(rows, 1)
    return slab


def _parse_offset(tree: ProbabilityTree, value, rows: int, t_lo: int, t_hi: int, where: str):
    """Constant vector, t-only expressions, or a per-time per-node table."""
    if value is None:
        return None
    if isinstance(value, dict):
        _check_keys(value, {"expr", "table"}, where)
        if ("expr" in value) == ("table" in value):
            raise ScenarioError(f"{where} needs exactly one of 'expr' or 'table'")
        if "expr" in value:
            exprs = _parse_expr_list(value["expr"], rows, 0, 0, f"{where}.expr")
            slabs = []
            for t in range(t_lo, t_hi + 1):
                try:
                    vec = np.array([[eval_expr(e, t=t)] for e in exprs])
                except ExprEvalError as exc:
                    raise ScenarioError(f"{where}.expr failed at t={t}: {exc}") from exc
                slabs.append(np.broadcast_to(vec, (tree.node_count(t), rows, 1)).copy())
            return AdaptedProcess(tree, t_lo, t_hi, tuple(slabs))
        table = value["table"]
        if not isinstance(table, dict):
            raise ScenarioError(f"{where}.table must map times to node tables")
        wanted = {str(t) for t in range(t_lo, t_hi + 1)}
        if set(table) != wanted:
            raise ScenarioError(f"{where}.table must have exactly the time keys {sorted(wanted, key=int)}")
        slabs = tuple(
            _slab_from_table(tree, t, table[str(t)], rows, f"{where}.table[{str(t)!r}]")
            for t in range(t_lo, t_hi + 1)
        )
        return AdaptedProcess(tree, t_lo, t_hi, slabs)
    arr = _parse_array(value, where)
    if arr.size != rows:
        raise ScenarioError(f"{where} must have {rows} components")
    return arr.reshape(rows, 1)


# -- model payload parsing --------------------------------------------------------


def _parse_bsde(tree: ProbabilityTree, payload: dict) -> tuple[Generator, AdaptedProcess]:
    _check_keys(payload, {"n", "d", "driver", "terminal"}, "model")
    n = _as_int(_require(payload, "n", "model"), "model.n")
    if n < 1:
        raise ScenarioError("model.n must be at least 1")
    if "d" in payload and _as_int(payload["d"], "model.d") != tree.d:
        raise ScenarioError(f"model.d disagrees with the tree noise dimension {tree.d}")
    exprs = _parse_expr_list(_require(payload, "driver", "model"), n, 0, n, "model.driver")

    def driver(t, y, z, node):
        z = np.asarray(z)
        z_first = z[:, 0] if z.ndim == 2 else z.reshape(-1)
        return np.array([eval_expr(e, t=t, y=y, z=z_first) for e in exprs])

    gen = _build_checked(Generator, n=n, d=tree.d, fn=driver)
    horizon = tree.horizon
    raw = _require(payload, "terminal", "model")
    if isinstance(raw, dict):
        slab = _slab_from_table(tree, horizon, raw, n, "model.terminal")
        eta = AdaptedProcess(tree, horizon, horizon, (slab,))
    else:
        vec = _parse_array(raw, "model.terminal")
        if vec.size != n:
            raise ScenarioError(f"model.terminal must have {n} components")
        eta = AdaptedProcess.constant(tree, vec.reshape(n, 1), horizon, horizon)
    return gen, eta


_LINEAR_MATRIX_KEYS = ("A", "Abar", "B", "Bbar", "C", "Cbar", "Ahat", "Bhat", "Chat")


def _parse_linear(tree: ProbabilityTree, payload: dict) -> LinearCoefficients:
    allowed = {"m", "n", "G", "x0", "D", "Dbar", "Dhat", "g", *_LINEAR_MATRIX_KEYS}
    _check_keys(payload, allowed, "model")
    m = _as_int(_require(payload, "m", "model"), "model.m")
    n = _as_int(_require(payload, "n", "model"), "model.n")
    if m < 1 or n < 1:
        raise ScenarioError("model.m and model.n must be at least 1")
    matrices = {
        key: _parse_array(payload[key], f"model.{key}")
        for key in _LINEAR_MATRIX_KEYS
        if payload.get(key) is not None
    }
    horizon = tree.horizon
    offsets = {
        "D": _parse_offset(tree, payload.get("D"), m, 0, horizon - 1, "model.D"),
        "Dbar": _parse_offset(tree, payload.get("Dbar"), m, 0, horizon - 1, "model.Dbar"),
        "Dhat": _parse_offset(tree, payload.get("Dhat"), n, 1, horizon, "model.Dhat"),
        "g": _parse_offset(tree, payload.get("g"), n, horizon, horizon, "model.g"),
    }
    return _build_checked(
        LinearCoefficients.build,
        tree,
        m,
        n,
        G=_parse_array(_require(payload, "G", "model"), "model.G"),
        x0=_parse_array(_require(payload, "x0", "model"), "model.x0"),
        **matrices,
        **offsets,
    )


def _parse_nonlinear(tree: ProbabilityTree, payload: dict) -> NonlinearModel:
    allowed = {"m", "n", "G", "beta1", "beta2", "x0", "drift", "noise_loading", "driver", "terminal"}
    _check_keys(payload, allowed, "model")
    m = _as_int(_require(payload, "m", "model"), "model.m")
    n = _as_int(_require(payload, "n", "model"), "model.n")
    if m < 1 or n < 1:
        raise ScenarioError("model.m and model.n must be at least 1")

    def forward_fn(exprs):
        def fn(t, x, y, z, node):
            return np.array([eval_expr(e, t=t, x=x[:, 0], y=y[:, 0], z=z[:, 0]) for e in exprs])

        return fn

    def terminal_fn(exprs, horizon):
        def fn(x, node):
            return np.array([eval_expr(e, t=horizon, x=x[:, 0]) for e in exprs])

        return fn

    fns = {}
    for key, count in (("drift", m), ("noise_loading", m), ("driver", n)):
        if payload.get(key) is not None:
            fns[key] = forward_fn(_parse_expr_list(payload[key], count, m, n, f"model.{key}"))
    terminal = None
    if payload.get("terminal") is not None:
        # terminal maps depend on the forward state (and implicitly t = horizon)
        exprs = _parse_expr_list(payload["terminal"], n, m, 0, "model.terminal")
        terminal = terminal_fn(exprs, tree.horizon)
    return _build_checked(
        NonlinearModel,
        m=m,
        n=n,
        G=_parse_array(_require(payload, "G", "model"), "model.G"),
        beta1=_as_number(_require(payload, "beta1", "model"), "model.beta1"),
        beta2=_as_number(_require(payload, "beta2", "model"), "model.beta2"),
        x0=_parse_array(_require(payload, "x0", "model"), "model.x0"),
        b=fns.get("drift"),
        sigma=fns.get("noise_loading"),
        f=fns.get("driver"),
        h=terminal,
    )


# -- solver settings -----------------------------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    """Settings shared by the commands; flags override scenario values."""

    tol: float | None = None
    seed: int = 0
    delta_init: float = 0.5
    delta_min: float = 1e-3
    picard_tol: float = 1e-11
    picard_max_iters: int = 80
    validation_tol: float = 1e-8
    samples: int = 200
    monotone_beta1: float | None = None
    monotone_beta2: float | None = None

    def tol_or(self, default: float) -> float:
        return default if self.tol is None else self.tol


def _parse_solver(value) -> SolverConfig:
    if value is None:
        return SolverConfig()
    if not isinstance(value, dict):
        raise ScenarioError("solver must be an object")
    allowed = {
        "tol",
        "seed",
        "delta_init",
        "delta_min",
        "picard_tol",
        "picard_max_iters",
        "validation_tol",
        "samples",
        "monotone_beta1",
        "monotone_beta2",
    }
    _check_keys(value, allowed, "solver")
    kwargs = {}
    for key in ("tol", "delta_init", "delta_min", "picard_tol", "validation_tol"):
        if key in value:
            number = _as_number(value[key], f"solver.{key}")
            if number <= 0.0:
                raise ScenarioError(f"solver.{key} must be positive")
            kwargs[key] = number
    for key in ("monotone_beta1", "monotone_beta2"):
        if key in value:
            number = _as_number(value[key], f"solver.{key}")
            if number < 0.0:
                raise ScenarioError(f"solver.{key} must be nonnegative")
            kwargs[key] = number
    if "seed" in value:
        seed = _as_int(value["seed"], "solver.seed")
        if seed < 0:
            raise ScenarioError("solver.seed must be nonnegative")
        kwargs["seed"] = seed
    for key in ("picard_max_iters", "samples"):
        if key in value:
            count = _as_int(value[key], f"solver.{key}")
            if count < 1:
                raise ScenarioError(f"solver.{key} must be at least 1")
            kwargs[key] = count
    return SolverConfig(**kwargs)


def _continuation_config(solver: SolverConfig) -> ContinuationConfig:
    return _build_checked(
        ContinuationConfig,
        delta_init=solver.delta_init,
        delta_min=min(solver.delta_min, solver.delta_init),
        picard_tol=solver.picard_tol,
        picard_max_iters=solver.picard_max_iters,
        validation_tol=solver.tol_or(solver.validation_tol),
    )


# -- scenario ---------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    kind: str
    tree: ProbabilityTree
    solver: SolverConfig
    bsde: tuple[Generator, AdaptedProcess] | None = None
    linear: LinearCoefficients | None = None
    nonlinear: NonlinearModel | None = None


def parse_scenario(data) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("the top level of a scenario must be an object")
    _check_keys(data, {"schema_version", "kind", "tree", "model", "solver"}, "scenario")
    version = _require(data, "schema_version", "scenario")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {version!r}; this build reads {SCHEMA_VERSION}")
    kind = _require(data, "kind", "scenario")
    if kind not in KINDS:
        raise ScenarioError(f"kind must be one of {', '.join(KINDS)}, got {kind!r}")
    tree = _parse_tree(_require(data, "tree", "scenario"))
    solver = _parse_solver(data.get("solver"))
    payload = _require(data, "model", "scenario")
    if not isinstance(payload, dict):
        raise ScenarioError("model must be an object")
    scenario = Scenario(kind=kind, tree=tree, solver=solver)
    if kind == "bsde":
        return replace(scenario, bsde=_parse_bsde(tree, payload))
    if kind == "linear":
        return replace(scenario, linear=_parse_linear(tree, payload))
    return replace(scenario, nonlinear=_parse_nonlinear(tree, payload))


def load_scenario(path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc
    return parse_scenario(data)


# -- output helpers -----------------------------------------------------------------


def _component_names(prefix: str, rows: int, cols: int) -> list[str]:
    if cols == 1:
        return [f"{prefix}{r + 1}" for r in range(rows)]
    return [f"{prefix}{r + 1}_{c + 1}" for r in range(rows) for c in range(cols)]


def _process_csv(tree: ProbabilityTree, proc: AdaptedProcess, prefix: str) -> str:
    rows, cols = proc.shape
    lines = ["time,node," + ",".join(_component_names(prefix, rows, cols))]
    for t in range(proc.t_lo, proc.t_hi + 1):
        slab = proc.at(t)
        for i, node in enumerate(tree.nodes(t)):
            path = ".".join(str(k) for k in node)
            values = ",".join(f"{v:.17g}" for v in slab[i].reshape(-1))
            lines.append(f"{t},{path},{values}")
    return "\n".join(lines) + "\n"


def _solution_tables(tree: ProbabilityTree, sol) -> dict[str, str]:
    tables = {}
    for name, prefix in (("X", "x"), ("Y", "y"), ("Z", "z"), ("N", "n")):
        proc = getattr(sol, name, None)
        if proc is not None:
            tables[f"{name}.csv"] = _process_csv(tree, proc, prefix)
    return tables


def _matrix_text(a: np.ndarray) -> str:
    body = ["[" + ", ".join(f"{v:.12g}" for v in row) + "]" for row in np.atleast_2d(a)]
    return "[" + ", ".join(body) + "]"


def _report_dict(report) -> dict:
    out = {key: float(value) for key, value in asdict(report).items()}
    out["max"] = float(report.max)
    return out


def _print_report(report) -> None:
    for key, value in asdict(report).items():
        print(f"residual {key}: {value:.12g}")
    print(f"residual max: {report.max:.12g}")


def _base_summary(command: str, scenario: Scenario) -> dict:
    return {
        "command": command,
        "kind": scenario.kind,
        "schema_version": SCHEMA_VERSION,
        "horizon": scenario.tree.horizon,
        "noise_dimension": scenario.tree.d,
    }


def _emit(args, summary: dict, tables: dict[str, str]) -> None:
    if args.out is None:
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in tables.items():
        (out / name).write_text(text, encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands -------------------------------------------------------------------------


def _expect_kind(scenario: Scenario, kind: str, command: str) -> None:
    if scenario.kind != kind:
        raise ScenarioError(f"{command} needs a scenario of kind {kind!r}, got {scenario.kind!r}")


def _cmd_validate(scenario: Scenario, solver: SolverConfig, args) -> int:
    tree = scenario.tree
    tol = solver.tol_or(MOMENT_TOL)
    print(f"kind {scenario.kind}, horizon {tree.horizon}, noise dimension {tree.d}")
    steps = []
    for t, step in enumerate(tree.steps):
        report = validate_increments(step, tol=tol)
        verdict = "ok" if report.ok else "FAIL: " + ", ".join(name for name, _ in report.failures)
        print(f"step {t}: branching {step.branch_count}, {verdict}")
        steps.append(
            {
                "t": t,
                "branch_count": step.branch_count,
                "ok": bool(report.ok),
                "failures": [[name, float(residual)] for name, residual in report.failures],
            }
        )
    descriptions = {
        "bsde": lambda: f"backward equation with n={scenario.bsde[0].n}",
        "linear": lambda: f"linear system with m={scenario.linear.m}, n={scenario.linear.n}",
        "nonlinear": lambda: f"nonlinear model with m={scenario.nonlinear.m}, n={scenario.nonlinear.n}",
    }
    print(f"payload: {descriptions[scenario.kind]()}")
    ok = all(entry["ok"] for entry in steps)
    print("scenario OK" if ok else "scenario FAILED the moment checks")
    _emit(args, _base_summary("validate", scenario) | {"steps": steps, "ok": ok}, {})
    return EXIT_OK if ok else EXIT_VALIDATION


def _cmd_solve_bsde(scenario: Scenario, solver: SolverConfig, args) -> int:
    _expect_kind(scenario, "bsde", "solve-bsde")
    gen, eta = scenario.bsde
    tree = scenario.tree
    sol = solve_bsde(tree, gen, eta)
    report = bsde_residuals(tree, gen, eta, sol)
    sup_n = sol.N.sup_norm()
    print(f"solved backward equation: horizon {tree.horizon}, {tree.node_count(tree.horizon)} terminal nodes")
    _print_report(report)
    complete = "  (complete: the orthogonal part vanishes)" if sup_n <= 1e-12 else ""
    print(f"sup |N| = {sup_n:.12g}{complete}")
    summary = _base_summary("solve-bsde", scenario) | {
        "residuals": _report_dict(report),
        "sup_N": float(sup_n),
        "ok": bool(report.max <= solver.tol_or(1e-10)),
    }
    _emit(args, summary, _solution_tables(tree, sol))
    return EXIT_OK


def _cmd_solve_linear(scenario: Scenario, solver: SolverConfig, args) -> int:
    _expect_kind(scenario, "linear", "solve-linear")
    coeffs, tree = scenario.linear, scenario.tree
    tol = solver.tol_or(SINGULAR_TOL)
    matrices = riccati_matrices(coeffs, singular_tol=tol)
    print("Gamma_t invertibility:")
    print("  t  sigma_min        invertible")
    for entry in matrices.gamma_reports:
        print(f"  {entry.t}  {entry.sigma_min:<15.12g}  {'yes' if entry.invertible else 'NO'}")
    sol = solve_linear(coeffs, tree, matrices=matrices, singular_tol=tol)
    print("decoupling sequence P_t (defined for t = 1..T):")
    for t in range(1, coeffs.horizon + 1):
        print(f"  P[{t}] = {_matrix_text(matrices.P[t])}")
    report = sol.residual_report
    _print_report(report)
    gamma = [
        {"t": entry.t, "sigma_min": float(entry.sigma_min), "invertible": bool(entry.invertible)}
        for entry in matrices.gamma_reports
    ]
    summary = _base_summary("solve-linear", scenario) | {
        "residuals": _report_dict(report),
        "gamma": gamma,
        "P": [{"t": t, "matrix": matrices.P[t].tolist()} for t in range(1, coeffs.horizon + 1)],
        "ok": bool(report.max <= solver.tol_or(1e-10)),
    }
    tables = _solution_tables(tree, sol)
    names = ",".join(_component_names("p", coeffs.n, coeffs.m))
    lines = [f"time,sigma_min,invertible,{names}"]
    blank_p = "," * (coeffs.n * coeffs.m - 1)
    for t in range(coeffs.horizon + 1):
        if t < coeffs.horizon:
            sig, inv = f"{matrices.sigma_min[t]:.17g}", str(bool(matrices.gamma_reports[t].invertible)).lower()
        else:
            sig = inv = ""
        values = ",".join(f"{v:.17g}" for v in matrices.P[t].reshape(-1)) if t >= 1 else blank_p
        lines.append(f"{t},{sig},{inv},{values}")
    tables["riccati.csv"] = "\n".join(lines) + "\n"
    _emit(args, summary, tables)
    return EXIT_OK


def _monotone_summary(report) -> dict:
    return {
        "ok": bool(report.ok),
        "worst_coupling_slack": float(report.worst_coupling_slack),
        "worst_terminal_slack": float(report.worst_terminal_slack),
        "samples": int(report.samples),
        "tol": float(report.tol),
    }


def _cmd_solve_nonlinear(scenario: Scenario, solver: SolverConfig, args) -> int:
    _expect_kind(scenario, "nonlinear", "solve-nonlinear")
    model, tree = scenario.nonlinear, scenario.tree
    config = _continuation_config(solver)
    mono = check_monotone(
        model,
        tree,
        samples=solver.samples,
        seed=solver.seed,
        beta1=solver.monotone_beta1,
        beta2=solver.monotone_beta2,
    )
    tag = "verified" if mono.ok else "assumption-unverified"
    print(
        f"monotonicity: {tag} (worst coupling slack {mono.worst_coupling_slack:.12g}, "
        f"worst terminal slack {mono.worst_terminal_slack:.12g}, {mono.samples} samples)"
    )
    result = solve_continuation(model, tree, config)
    trace = result.trace
    print("continuation grid: " + " -> ".join(f"{alpha:g}" for alpha in trace.grid))
    for stage in trace.stages:
        status = "accepted" if stage.accepted else "rejected"
        print(
            f"  stage alpha {stage.alpha_from:g} -> {stage.alpha_to:g}: delta {stage.delta:g}, "
            f"{stage.iterations} iterations, distance {stage.distance:.12g}, {status}"
        )
    print(f"inner linear solves: {trace.linear_solves}")
    report = result.solution.residual_report
    _print_report(report)
    summary = _base_summary("solve-nonlinear", scenario) | {
        "residuals": _report_dict(report),
        "monotone": _monotone_summary(mono) | {"tag": tag},
        "trace": {
            "grid": [float(alpha) for alpha in trace.grid],
            "linear_solves": int(trace.linear_solves),
            "final_residual": float(trace.final_residual),
            "stages": [
                {
                    "alpha_from": float(stage.alpha_from),
                    "alpha_to": float(stage.alpha_to),
                    "delta": float(stage.delta),
                    "iterations": int(stage.iterations),
                    "distance": float(stage.distance),
                    "accepted": bool(stage.accepted),
                }
                for stage in trace.stages
            ],
        },
    }
    _emit(args, summary, _solution_tables(tree, result.solution))
    return EXIT_OK


def _cmd_check_monotone(scenario: Scenario, solver: SolverConfig, args) -> int:
    _expect_kind(scenario, "nonlinear", "check-monotone")
    report = check_monotone(
        scenario.nonlinear,
        scenario.tree,
        samples=solver.samples,
        seed=solver.seed,
        tol=solver.tol_or(1e-9),
        beta1=solver.monotone_beta1,
        beta2=solver.monotone_beta2,
    )
    print(f"samples: {report.samples}, tolerance: {report.tol:g}")
    print(f"worst coupling slack: {report.worst_coupling_slack:.12g}")
    print(f"worst terminal slack: {report.worst_terminal_slack:.12g}")
    print("monotone condition holds" if report.ok else "monotone condition VIOLATED")
    _emit(args, _base_summary("check-monotone", scenario) | _monotone_summary(report), {})
    return EXIT_OK if report.ok else EXIT_VALIDATION


def _cmd_compare_oracle(scenario: Scenario, solver: SolverConfig, args) -> int:
    tree = scenario.tree
    threshold = solver.tol_or(1e-6)
    if scenario.kind == "bsde":
        gen, eta = scenario.bsde
        reference = solve_bsde(tree, gen, eta)
        system = build_residual_system(tree, gen, eta=eta)
    elif scenario.kind == "linear":
        reference = solve_linear(scenario.linear, tree)
        system = build_residual_system(tree, scenario.linear)
    else:
        config = _continuation_config(solver)
        reference = solve_continuation(scenario.nonlinear, tree, config).solution
        system = build_residual_system(tree, scenario.nonlinear)
    oracle = solve_global_newton(system)
    print(
        f"oracle: {system.size} unknowns, {oracle.trace.iterations} damped Newton iterations, "
        f"equation residual {oracle.equation_residual:.12g}"
    )
    gaps = {}
    for name in ("X", "Y", "Z", "N"):
        ours, theirs = getattr(reference, name, None), getattr(oracle, name)
        gaps[name] = None if ours is None or theirs is None else float((ours - theirs).sup_norm())
        if gaps[name] is not None:
            print(f"sup |{name}_solver - {name}_oracle| = {gaps[name]:.12g}")
    total = max(value for value in gaps.values() if value is not None)
    ok = total <= threshold
    print(f"sup-difference {total:.12g} against threshold {threshold:g}: {'ok' if ok else 'FAILED'}")
    summary = _base_summary("compare-oracle", scenario) | {
        "gaps": gaps,
        "sup_difference": float(total),
        "threshold": float(threshold),
        "ok": bool(ok),
        "newton": {
            "converged": bool(oracle.trace.converged),
            "iterations": int(oracle.trace.iterations),
            "equation_residual": float(oracle.equation_residual),
        },
    }
    _emit(args, summary, _solution_tables(tree, reference))
    return EXIT_OK if ok else EXIT_SOLVER


_HANDLERS = {
    "validate": _cmd_validate,
    "solve-bsde": _cmd_solve_bsde,
    "solve-linear": _cmd_solve_linear,
    "solve-nonlinear": _cmd_solve_nonlinear,
    "check-monotone": _cmd_check_monotone,
    "compare-oracle": _cmd_compare_oracle,
}


# -- entry point ------------------------------------------------------------------


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="fbsdelta", description="Scenario-driven solvers for coupled stochastic difference systems.")
    commands = (
        ("validate", "check the tree moments and the model payload"),
        ("solve-bsde", "solve a backward equation and report residuals"),
        ("solve-linear", "solve a linear coupled system; prints the Gamma table and P sequence"),
        ("solve-nonlinear", "solve a nonlinear coupled system by continuation; prints the stage trace"),
        ("check-monotone", "sample the dissipativity inequalities of a nonlinear model"),
        ("compare-oracle", "solve and cross-check against the global Newton oracle"),
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)
    for name, text in commands:
        command = sub.add_parser(name, help=text, description=text)
        command.add_argument("scenario", help="path to a scenario JSON file")
        command.add_argument("--out", metavar="DIR", default=None, help="write CSV tables and summary.json here")
        command.add_argument("--tol", metavar="X", type=float, default=None, help="main tolerance of the command")
        command.add_argument("--seed", metavar="N", type=int, default=None, help="sampling seed (monotonicity checks)")
        command.add_argument(
            "--delta-init", metavar="X", type=float, dest="delta_init", default=None, help="initial continuation step"
        )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        scenario = load_scenario(args.scenario)
        overrides = {
            key: value
            for key, value in (("tol", args.tol), ("seed", args.seed), ("delta_init", args.delta_init))
            if value is not None
        }
        if "tol" in overrides and overrides["tol"] <= 0.0:
            raise ScenarioError("--tol must be positive")
        if "seed" in overrides and overrides["seed"] < 0:
            raise ScenarioError("--seed must be nonnegative")
        if "delta_init" in overrides and overrides["delta_init"] <= 0.0:
            raise ScenarioError("--delta-init must be positive")
        solver = replace(scenario.solver, **overrides)
        return _HANDLERS[args.command](scenario, solver, args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ExprSyntaxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NotSolvableError, ContinuationFailedError, OracleFailedError, ExprEvalError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_SOLVER


def app() -> None:
    sys.exit(main())


if __name__ == "__main__":
    app()
