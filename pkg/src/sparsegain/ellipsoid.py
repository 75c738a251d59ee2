"""Ellipsoidal regions of gamma-admissible state-feedback gains.

Stage 1 of the toolkit: solve the synthesis LMIs for certificates
(P, Xhat, Yhat, Zhat), derive the controller ellipsoid
``(F - F_o) Z (F - F_o)^T <= R`` with center ``F_o = -Yhat P^{-1}``,
and provide membership tests, the Schur-form constraint matrix, and
boundary sampling. Every region returned by :func:`synthesize_region`
has been re-verified: certificate residuals by direct eigenvalue checks
and the center gain by the independent H-infinity engine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import fileio
from .lti import StateSpaceSystem, close_loop, hinf_norm, is_hurwitz
from .sdp import (
    ConstraintSpec,
    CvxpySdpBackend,
    SdpProblem,
    VarSpec,
    block,
    evaluate_constraints,
    tr,
)

__all__ = [
    "SdpSolution",
    "EllipsoidRegion",
    "SynthesisOptions",
    "Infeasible",
    "VerificationFailed",
    "assemble_theorem1",
    "synthesize_region",
    "derive_ellipsoid",
    "membership",
    "schur_constraint",
    "sample_boundary",
    "save_region",
    "load_region",
    "region_to_obj",
    "region_from_obj",
]

OBJECTIVES = ("feasibility", "margin", "radius", "rich")


class Infeasible(RuntimeError):
    """The synthesis LMIs admit no solution at the requested gamma."""

    def __init__(self, message: str, solver_status: str = ""):
        super().__init__(message)
        self.solver_status = solver_status


class VerificationFailed(RuntimeError):
    """A solver-reported solution did not survive independent verification."""

    def __init__(self, message: str, achieved_norm: float | None = None):
        super().__init__(message)
        self.achieved_norm = achieved_norm


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _psd_sqrt(M: np.ndarray, name: str, clip_rel: float = 1e-10) -> np.ndarray:
    w, V = np.linalg.eigh(_sym(M))
    scale = max(w.max(), 0.0)
    if w.min() < -clip_rel * max(scale, 1.0):
        raise ValueError(
            f"{name} is not positive semidefinite (lambda_min={w.min():.3e})"
        )
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


@dataclass(frozen=True)
class SdpSolution:
    """Certificates from the synthesis LMIs.

    ``margin`` is the smallest strictness slack among the strict
    inequalities (P > 0, Zhat > 0, main block < 0) at the returned point.
    """

    P: np.ndarray
    Xhat: np.ndarray
    Yhat: np.ndarray
    Zhat: np.ndarray
    margin: float


@dataclass(frozen=True)
class SynthesisOptions:
    """Knobs for Stage-1 synthesis.

    strictness_eps
        Margin converting strict LMIs to non-strict ones; ``None`` picks
        ``1e-6 * (1 + ||A||_2)``.
    condition_cap
        Bound kappa on cond(P), imposed as ``I <= P <= kappa I`` (the lower
        bound also fixes the scale of the otherwise nearly-homogeneous
        certificates). ``None`` disables the cap.
    objective
        Which feasible certificate to return: ``feasibility`` (any),
        ``margin`` (maximize the main-block slack), ``radius`` (maximize
        trace of the ellipsoid radius), or ``rich`` (default; maximize the
        radius, then flatten the shape matrix Z so the region is usable by
        the sparsifiers -- see notes in synthesize_region).
    """

    strictness_eps: float | None = None
    condition_cap: float | None = 1e6
    solver_tol: float = 1e-8
    allow_theta_above_one: bool = False
    objective: str = "rich"
    z_cap_slack: float = 1e-3

    def __post_init__(self):
        if self.strictness_eps is not None and self.strictness_eps <= 0:
            raise ValueError("strictness_eps must be positive")
        if self.condition_cap is not None and self.condition_cap < 1:
            raise ValueError("condition_cap must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.solver_tol <= 0:
            raise ValueError("solver_tol must be positive")


@dataclass(frozen=True)
class EllipsoidRegion:
    """Controller ellipsoid ``(F - F_o) Z (F - F_o)^T <= R`` certified at
    attenuation level ``gamma``; ``Zinv`` caches the inverse shape."""

    F_o: np.ndarray
    Z: np.ndarray
    R: np.ndarray
    Zinv: np.ndarray
    gamma: float

    def __post_init__(self):
        m, n = self.F_o.shape
        if self.Z.shape != (n, n) or self.R.shape != (m, m):
            raise ValueError("region matrices dimensionally inconsistent")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        wz = np.linalg.eigvalsh(_sym(self.Z))
        if wz.min() <= 0:
            raise ValueError("shape matrix Z must be positive definite")
        wr = np.linalg.eigvalsh(_sym(self.R))
        if wr.min() < -1e-8 * max(1.0, wr.max()):
            raise ValueError("radius matrix R must be positive semidefinite")
        resid = np.linalg.norm(self.Zinv @ self.Z - np.eye(n))
        if resid > 1e-6 * n:
            raise ValueError(f"cached Zinv inconsistent with Z (||Zinv Z - I||={resid:.2e})")

    @property
    def m(self) -> int:
        return self.F_o.shape[0]

    @property
    def n(self) -> int:
        return self.F_o.shape[1]


def _check_theta(theta: float, allow_theta_above_one: bool) -> None:
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    if theta > 1 and not allow_theta_above_one:
        raise ValueError(
            "theta > 1 shrinks nothing and voids the resilience reading; "
            "pass allow_theta_above_one=True to search the inflated region"
        )


def _theorem1_constraints(
    sys: StateSpaceSystem, gamma: float, eps: float, kappa: float | None
) -> list[ConstraintSpec]:
    A, B, Bv = sys.A, sys.B, sys.Bv
    C, Dgu, Dgv = sys.C, sys.Dgu, sys.Dgv
    n, m, p = sys.n, sys.m, sys.p
    stack = np.vstack([Bv, Dgv])
    dist = stack @ stack.T
    In, Im, Ip = np.eye(n), np.eye(m), np.eye(p)
    Inp = np.eye(n + p)

    def main_block(env):
        P, Xh, Yh, Zh = env["P"], env["Xhat"], env["Yhat"], env["Zhat"]
        APBY = A @ P - B @ Yh
        Q11 = APBY + APBY.T - B @ Xh @ B.T + Zh
        Q21 = C @ P - Dgu @ Xh @ B.T - Dgu @ Yh
        Q22 = -(gamma**2) * Ip - Dgu @ Xh @ Dgu.T
        M = block([[Q11, Q21.T], [Q21, Q22]]) + dist
        return -M - eps * Inp

    cons = [
        ConstraintSpec("Xhat_nsd", "psd", lambda env: -env["Xhat"]),
        ConstraintSpec("P_pd", "psd", lambda env: env["P"] - eps * In),
        ConstraintSpec("Zhat_pd", "psd", lambda env: env["Zhat"] - eps * In),
        ConstraintSpec("main", "psd", main_block),
    ]
    if kappa is not None:
        cons.append(ConstraintSpec("P_scale_lo", "psd", lambda env: env["P"] - In))
        cons.append(
            ConstraintSpec("P_scale_hi", "psd", lambda env: kappa * In - env["P"])
        )
    return cons


def _resolve_eps(sys: StateSpaceSystem, opts: SynthesisOptions) -> float:
    if opts.strictness_eps is not None:
        return opts.strictness_eps
    return 1e-6 * (1.0 + np.linalg.norm(sys.A, 2))


def _base_vars(sys: StateSpaceSystem) -> tuple[VarSpec, ...]:
    n, m = sys.n, sys.m
    return (
        VarSpec("P", n, n, symmetric=True),
        VarSpec("Xhat", m, m, symmetric=True),
        VarSpec("Yhat", m, n),
        VarSpec("Zhat", n, n, symmetric=True),
    )


def assemble_theorem1(
    sys: StateSpaceSystem, gamma: float, opts: SynthesisOptions = SynthesisOptions()
) -> SdpProblem:
    """Feasibility form of the synthesis LMIs.

    Feasible points are exactly certificates (P, Xhat, Yhat, Zhat) with
    ``Xhat <= 0``, ``P >= eps I``, ``Zhat >= eps I`` and the main block
    (including the disturbance outer-product term) ``<= -eps I``; with a
    condition cap kappa, additionally ``I <= P <= kappa I``.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    eps = _resolve_eps(sys, opts)
    return SdpProblem(
        variables=_base_vars(sys),
        constraints=tuple(_theorem1_constraints(sys, gamma, eps, opts.condition_cap)),
    )


def _assemble_variant(sys, gamma, opts, mode, radius_bound=None):
    """Internal objective variants sharing the Theorem-1 feasible set."""
    eps = _resolve_eps(sys, opts)
    cons = _theorem1_constraints(sys, gamma, eps, opts.condition_cap)
    variables = list(_base_vars(sys))
    n = sys.n
    objective = None
    if mode == "margin":
        variables.append(VarSpec("slack", 1, 1))
        Inp = np.eye(sys.n + sys.p)

        base_main = next(c for c in cons if c.label == "main")
        cons = [c for c in cons if c.label != "main"]
        cons.append(
            ConstraintSpec(
                "main",
                "psd",
                lambda env: base_main.build(env) - (env["slack"][0, 0] - eps) * Inp,
            )
        )
        cons.append(
            ConstraintSpec("slack_floor", "nonneg", lambda env: env["slack"] - eps)
        )
        objective = ("maximize", lambda env: env["slack"][0, 0])
    elif mode == "radius":
        objective = ("minimize", lambda env: tr(env["Xhat"]))
    elif mode == "zcap":
        variables.append(VarSpec("zcap", 1, 1))
        In = np.eye(n)
        cons.append(
            ConstraintSpec(
                "z_bound",
                "psd",
                lambda env: block(
                    [[env["zcap"][0, 0] * In, env["P"]], [env["P"], env["Zhat"]]]
                ),
            )
        )
        cons.append(
            ConstraintSpec(
                "radius_keep", "nonneg", lambda env: radius_bound - tr(env["Xhat"])
            )
        )
        objective = ("minimize", lambda env: env["zcap"][0, 0])
    elif mode != "feasibility":
        raise ValueError(f"unknown objective mode {mode}")
    return SdpProblem(
        variables=tuple(variables), constraints=tuple(cons), objective=objective
    )


def _extract_certificates(sys, gamma, opts, result):
    """Repair and independently verify a solver point; returns SdpSolution."""
    P = _sym(result.values["P"])
    Xh = _sym(result.values["Xhat"])
    Yh = result.values["Yhat"]
    Zh = _sym(result.values["Zhat"])

    # Solvers may leave Xhat a hair on the wrong side of the PSD boundary;
    # shifting it down restores Xhat <= 0 at the cost of a tiny main-block
    # margin, which is re-verified below.
    bump = np.linalg.eigvalsh(Xh).max()
    if bump > 0:
        Xh = Xh - (bump + 1e-12 * (1.0 + abs(bump))) * np.eye(Xh.shape[0])

    margins = evaluate_constraints(
        assemble_theorem1(sys, gamma, opts), {"P": P, "Xhat": Xh, "Yhat": Yh, "Zhat": Zh}
    )
    scale = 1.0 + abs(gamma) ** 2 + np.linalg.norm(sys.A, 2) * np.linalg.norm(P, 2)
    tol = 1e-9 * scale
    bad = {k: v for k, v in margins.items() if v < -tol}
    if bad:
        raise VerificationFailed(
            f"solver point violates the synthesis LMIs beyond tolerance: {bad}"
        )
    eps = _resolve_eps(sys, opts)
    strict = min(
        margins["P_pd"] + eps, margins["Zhat_pd"] + eps, margins["main"] + eps
    )
    return SdpSolution(P=P, Xhat=Xh, Yhat=Yh, Zhat=Zh, margin=float(strict))


def derive_ellipsoid(sol: SdpSolution, gamma: float) -> EllipsoidRegion:
    """Region quantities from certificates.

    ``F_o = -Yhat P^{-1}``, ``Z = P Zhat^{-1} P`` and
    ``R = Y Z^{-1} Y^T - X`` (which collapses algebraically to ``-Xhat``;
    the identity is asserted here because the completed-square form is what
    the membership guarantee relies on).
    """
    P, Xh, Yh, Zh = sol.P, sol.Xhat, sol.Yhat, sol.Zhat
    for name, M in (("P", P), ("Zhat", Zh)):
        w = np.linalg.eigvalsh(_sym(M))
        if w.min() <= 1e-14 * max(1.0, w.max()):
            raise ValueError(f"{name} is numerically singular; cannot derive region")
    X = Xh + Yh @ np.linalg.solve(Zh, Yh.T)
    Y = Yh @ np.linalg.solve(Zh, P)
    Z = _sym(P @ np.linalg.solve(Zh, P))
    F_o = -np.linalg.solve(P.T, Yh.T).T
    R = _sym(Y @ np.linalg.solve(Z, Y.T) - X)
    drift = np.linalg.norm(R + Xh, ord="fro")
    if drift > 1e-8 * (1.0 + np.linalg.norm(Xh, ord="fro")):
        raise VerificationFailed(
            f"radius identity R = -Xhat violated (drift {drift:.2e}); "
            "certificates too ill-conditioned to trust"
        )
    Zinv = _sym(np.linalg.inv(Z))
    return EllipsoidRegion(F_o=F_o, Z=Z, R=R, Zinv=Zinv, gamma=float(gamma))


def synthesize_region(
    sys: StateSpaceSystem,
    gamma: float,
    opts: SynthesisOptions = SynthesisOptions(),
    backend: CvxpySdpBackend | None = None,
) -> tuple[SdpSolution, EllipsoidRegion]:
    """Solve Stage 1 and return verified certificates plus the region.

    The default objective ``rich`` solves twice: first maximizing
    ``trace(R) = -trace(Xhat)`` (total radius), then, holding that trace
    within ``z_cap_slack`` of its optimum, minimizing a cap c with
    ``Z <= c I`` (imposed through the Schur block
    ``[[c I, P], [P, Zhat]] >= 0``). Flattening Z is what keeps
    ``E = blockdiag(theta R, Z^{-1})`` away from singularity so the
    sparsifiers have room to move; margin maximization, by contrast,
    provably squeezes the radius to zero through the output block of the
    main LMI.

    Raises :class:`Infeasible` when the LMIs reject gamma and
    :class:`VerificationFailed` when a solver point fails re-verification
    (certificate residuals, center stability, or the H-infinity check).
    """
    backend = backend or CvxpySdpBackend()
    if gamma <= 0:
        raise ValueError("gamma must be positive")

    def run(mode, radius_bound=None):
        problem = _assemble_variant(sys, gamma, opts, mode, radius_bound=radius_bound)
        result = backend.solve(problem)
        if result.status == "infeasible":
            raise Infeasible(
                f"synthesis LMIs infeasible at gamma={gamma}", result.solver_status
            )
        if not result.ok:
            raise Infeasible(
                f"solver returned status {result.status!r} at gamma={gamma}",
                result.solver_status,
            )
        return result

    if opts.objective == "rich":
        first = run("radius")
        r_star = float(np.trace(_sym(first.values["Xhat"])))
        bound = r_star + opts.z_cap_slack * abs(r_star) + 1e-9
        try:
            result = run("zcap", radius_bound=bound)
            sol = _extract_certificates(sys, gamma, opts, result)
        except (Infeasible, VerificationFailed):
            # The flattening pass is an enrichment; fall back to the
            # radius-optimal certificates rather than failing synthesis.
            sol = _extract_certificates(sys, gamma, opts, first)
    else:
        mode = "feasibility" if opts.objective == "feasibility" else opts.objective
        result = run(mode)
        sol = _extract_certificates(sys, gamma, opts, result)

    region = derive_ellipsoid(sol, gamma)
    cl = close_loop(sys, region.F_o)
    if not is_hurwitz(cl.Acl):
        raise VerificationFailed("center gain does not stabilize the plant")
    res = hinf_norm(cl, rel_tol=1e-8)
    if res.value > gamma * (1.0 + 1e-6):
        raise VerificationFailed(
            f"center gain H-infinity norm {res.value:.6g} exceeds gamma={gamma}",
            achieved_norm=res.value,
        )
    return sol, region


def membership(
    region: EllipsoidRegion,
    F: np.ndarray,
    theta: float,
    tol: float = 1e-8,
    allow_theta_above_one: bool = False,
) -> bool:
    """True iff ``lambda_min(theta R - (F - F_o) Z (F - F_o)^T) >= -tol``."""
    _check_theta(theta, allow_theta_above_one)
    F = np.asarray(F, dtype=float)
    if F.shape != region.F_o.shape:
        raise ValueError(f"gain must be {region.F_o.shape}, got {F.shape}")
    D = F - region.F_o
    gap = theta * region.R - D @ region.Z @ D.T
    return bool(np.linalg.eigvalsh(_sym(gap)).min() >= -tol)


def schur_constraint(
    region: EllipsoidRegion,
    F: np.ndarray,
    theta: float,
    allow_theta_above_one: bool = True,
) -> np.ndarray:
    """Block matrix ``[[theta R, F - F_o], [(F - F_o)^T, Z^{-1}]]``.

    Positive semidefiniteness of this matrix is equivalent to membership
    whenever ``theta > 0`` and ``R`` is nonsingular.
    """
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    F = np.asarray(F, dtype=float)
    if F.shape != region.F_o.shape:
        raise ValueError(f"gain must be {region.F_o.shape}, got {F.shape}")
    D = F - region.F_o
    return np.block([[theta * region.R, D], [D.T, region.Zinv]])


def sample_boundary(
    region: EllipsoidRegion,
    theta: float,
    U: np.ndarray,
    allow_theta_above_one: bool = False,
) -> np.ndarray:
    """Gain ``F_o + sqrt(theta) R^{1/2} U Z^{-1/2}`` for ``sigma_max(U) <= 1``.

    Lands exactly on the theta-ellipsoid boundary when ``sigma_max(U) = 1``,
    strictly inside when smaller.
    """
    _check_theta(theta, allow_theta_above_one)
    U = np.asarray(U, dtype=float)
    if U.shape != region.F_o.shape:
        raise ValueError(f"direction must be {region.F_o.shape}, got {U.shape}")
    smax = np.linalg.norm(U, 2) if U.size else 0.0
    if smax > 1.0 + 1e-12:
        raise ValueError(f"sigma_max(U) = {smax} exceeds 1")
    if theta == 0:
        return region.F_o.copy()
    R_half = _psd_sqrt(region.R, "R")
    wz, Vz = np.linalg.eigh(_sym(region.Z))
    if wz.min() <= 0:
        raise ValueError("Z must be positive definite to sample the boundary")
    Z_inv_half = (Vz / np.sqrt(wz)) @ Vz.T
    return region.F_o + np.sqrt(theta) * R_half @ U @ Z_inv_half


def region_to_obj(region: EllipsoidRegion) -> dict:
    return {
        "gamma": float(region.gamma),
        "F_o": fileio.matrix_to_obj(region.F_o),
        "Z": fileio.matrix_to_obj(region.Z),
        "R": fileio.matrix_to_obj(region.R),
    }


def region_from_obj(obj: dict) -> EllipsoidRegion:
    Z = fileio.matrix_from_obj(obj["Z"])
    return EllipsoidRegion(
        F_o=fileio.matrix_from_obj(obj["F_o"]),
        Z=Z,
        R=fileio.matrix_from_obj(obj["R"]),
        Zinv=_sym(np.linalg.inv(Z)),
        gamma=float(obj["gamma"]),
    )


def save_region(path, region: EllipsoidRegion) -> None:
    Path(path).write_text(json.dumps(region_to_obj(region), indent=2) + "\n")


def load_region(path) -> EllipsoidRegion:
    return region_from_obj(json.loads(Path(path).read_text()))
