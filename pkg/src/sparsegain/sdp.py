"""Thin semidefinite-programming layer shared by synthesis and the l1 sparsifier.

A problem is a declarative bundle: variable/parameter descriptors plus
constraint builders. Each builder is an affine map written against the
small dispatch helpers below, so the same builder produces a cvxpy
expression when solving and a numpy matrix when verifying a candidate
solution's residuals. cvxpy (with CLARABEL by default) is the single
solver dependency.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import cvxpy as cp
import numpy as np

__all__ = [
    "VarSpec",
    "ParamSpec",
    "ConstraintSpec",
    "SdpProblem",
    "SdpResult",
    "SolverFailure",
    "CvxpySdpBackend",
    "block",
    "em",
    "msum",
    "tr",
    "evaluate_constraints",
]


def _is_cvx(*objs) -> bool:
    return any(isinstance(o, cp.expressions.expression.Expression) for o in objs)


def block(rows):
    """2-D block composition working for cvxpy expressions and numpy arrays."""
    flat = [x for row in rows for x in row]
    if _is_cvx(*flat):
        return cp.bmat(rows)
    return np.block([[np.atleast_2d(x) for x in row] for row in rows])


def em(a, b):
    """Elementwise product."""
    if _is_cvx(a, b):
        return cp.multiply(a, b)
    return np.multiply(a, b)


def msum(x):
    if _is_cvx(x):
        return cp.sum(x)
    return np.sum(x)


def tr(x):
    if _is_cvx(x):
        return cp.trace(x)
    return np.trace(x)


@dataclass(frozen=True)
class VarSpec:
    name: str
    rows: int
    cols: int
    symmetric: bool = False

    def __post_init__(self):
        if self.symmetric and self.rows != self.cols:
            raise ValueError(f"symmetric variable {self.name} must be square")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"variable {self.name} has empty shape")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    rows: int
    cols: int


@dataclass(frozen=True)
class ConstraintSpec:
    """``build(env) >= 0`` in the PSD cone (kind 'psd') or entrywise ('nonneg')."""

    label: str
    kind: str
    build: Callable[[Mapping[str, Any]], Any]

    def __post_init__(self):
        if self.kind not in ("psd", "nonneg"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")


@dataclass
class SdpProblem:
    variables: tuple[VarSpec, ...]
    constraints: tuple[ConstraintSpec, ...]
    parameters: tuple[ParamSpec, ...] = ()
    # (sense, build) with sense in {"minimize", "maximize"}; None = feasibility
    objective: tuple[str, Callable[[Mapping[str, Any]], Any]] | None = None

    def __post_init__(self):
        names = [v.name for v in self.variables] + [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise ValueError("variable/parameter names must be unique")
        if self.objective is not None and self.objective[0] not in (
            "minimize",
            "maximize",
        ):
            raise ValueError("objective sense must be 'minimize' or 'maximize'")


@dataclass
class SdpResult:
    status: str
    values: dict[str, np.ndarray]
    objective_value: float | None
    solver_status: str

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "optimal_inaccurate")


class SolverFailure(RuntimeError):
    """The backend crashed or returned an unusable status."""


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def evaluate_constraints(
    problem: SdpProblem, values: Mapping[str, np.ndarray], params=None
) -> dict[str, float]:
    """Constraint margins at a numeric point: min eigenvalue for 'psd'
    constraints, min entry for 'nonneg'. Nonnegative margins mean feasible."""
    env = dict(values)
    if params:
        env.update(params)
    margins = {}
    for con in problem.constraints:
        val = np.atleast_2d(np.asarray(con.build(env), dtype=float))
        if con.kind == "psd":
            margins[con.label] = float(np.linalg.eigvalsh(_sym(val)).min())
        else:
            margins[con.label] = float(val.min())
    return margins


class CvxpySdpBackend:
    """Solves :class:`SdpProblem` instances through cvxpy.

    Compiled cvxpy problems are cached per SdpProblem object, so re-solving
    the same problem with new parameter values (the re-weighting loop) skips
    canonicalization.
    """

    def __init__(self, solver: str = "CLARABEL", solver_opts: dict | None = None):
        self.solver = solver
        self.solver_opts = dict(solver_opts or {})
        self._cache: dict[int, tuple] = {}

    def _compile(self, problem: SdpProblem):
        key = id(problem)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is problem:
            return hit
        env: dict[str, Any] = {}
        for v in problem.variables:
            env[v.name] = cp.Variable((v.rows, v.cols), symmetric=v.symmetric)
        for pspec in problem.parameters:
            env[pspec.name] = cp.Parameter((pspec.rows, pspec.cols))
        cons = []
        for con in problem.constraints:
            expr = con.build(env)
            if con.kind == "psd":
                cons.append(0.5 * (expr + expr.T) >> 0)
            else:
                cons.append(expr >= 0)
        if problem.objective is None:
            obj = cp.Minimize(0)
        else:
            sense, build = problem.objective
            expr = build(env)
            obj = cp.Minimize(expr) if sense == "minimize" else cp.Maximize(expr)
        cvx_problem = cp.Problem(obj, cons)
        entry = (problem, cvx_problem, env)
        self._cache[key] = entry
        return entry

    def solve(self, problem: SdpProblem, params=None) -> SdpResult:
        _, cvx_problem, env = self._compile(problem)
        for pspec in problem.parameters:
            if params is None or pspec.name not in params:
                raise ValueError(f"missing value for parameter {pspec.name!r}")
            env[pspec.name].value = np.asarray(params[pspec.name], dtype=float)
        try:
            cvx_problem.solve(solver=self.solver, **self.solver_opts)
        except cp.error.SolverError as exc:
            raise SolverFailure(str(exc)) from exc
        raw = cvx_problem.status
        if raw in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            status = "optimal" if raw == cp.OPTIMAL else "optimal_inaccurate"
        elif raw in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            status = "infeasible"
        elif raw in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
            status = "unbounded"
        else:
            status = "failed"
        values = {}
        if status.startswith("optimal"):
            for v in problem.variables:
                val = np.asarray(env[v.name].value, dtype=float)
                values[v.name] = _sym(val) if v.symmetric else val
        return SdpResult(
            status=status,
            values=values,
            objective_value=None if cvx_problem.value is None else float(cvx_problem.value),
            solver_status=raw,
        )
