"""Solver-agnostic conic programs and semidefinite-relaxation recovery.

A thin, inspectable wrapper over cvxpy: named variables, labelled
constraints, a pluggable back-end registry with cone-capability checks, a
self-describing text dump for cross-checking against external modeling
tools, and the rank-one solution reconstruction used to undo the
semidefinite relaxation.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cvxpy as cp
import numpy as np

__all__ = [
    "SolverCapabilityError",
    "ReconstructionError",
    "SolveOutcome",
    "ConicProgram",
    "registered_solvers",
    "register_solver",
    "complex_to_real_embedding",
    "rank_ratio",
    "rank_one_reconstruct",
]

DEFAULT_TOL = 1e-8


class SolverCapabilityError(RuntimeError):
    """A required cone is not supported by the registered back-end."""


class ReconstructionError(RuntimeError):
    """Rank-one recovery is undefined or violates its feasibility guarantee."""


# back-end name -> supported cone kinds
_SOLVERS: Dict[str, frozenset] = {
    "CLARABEL": frozenset({"lin", "soc", "psd", "exp"}),
    "SCS": frozenset({"lin", "soc", "psd", "exp"}),
}


def registered_solvers() -> Dict[str, frozenset]:
    return dict(_SOLVERS)


def register_solver(name: str, cones: Sequence[str]) -> None:
    """Register (or override) a back-end and the cones it supports.

    A PSD-only back-end is legitimate for programs without exponential
    cones (the sensing phase); capability mismatch raises at solve time,
    never silently relaxes.
    """
    _SOLVERS[name.upper()] = frozenset(cones)


@dataclass(frozen=True)
class SolveOutcome:
    """Result of one conic solve.

    ``assignments`` maps variable names to values and is present iff the
    status is 'optimal'.
    """

    status: str                      # optimal | infeasible | numerical-failure
    objective: Optional[float]
    assignments: Optional[Dict[str, np.ndarray]]
    stats: Dict[str, object] = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


_EXP_ATOMS = ("exp", "log", "entr", "rel_entr", "kl_div", "logistic", "log_sum_exp")
_SOC_ATOMS = ("quad_over_lin", "norm", "pnorm", "power", "quad_form", "sum_squares", "abs")


def _cones_of_constraint(con) -> set:
    kinds = set()
    if isinstance(con, cp.constraints.PSD):
        kinds.add("psd")
    elif isinstance(con, cp.constraints.SOC):
        kinds.add("soc")
    elif isinstance(con, cp.constraints.ExpCone):
        kinds.add("exp")
    else:
        kinds.add("lin")
    for expr in con.args:
        for atom in expr.atoms():
            name = atom.__name__.lower()
            if name in _EXP_ATOMS:
                kinds.add("exp")
            elif name in _SOC_ATOMS:
                kinds.add("soc")
    return kinds


def _describe_constraint(con) -> str:
    if isinstance(con, cp.constraints.PSD):
        n = con.args[0].shape[0]
        kind = f"PSD dim={n}"
        if con.args[0].is_complex():
            kind += " (hermitian)"
    elif isinstance(con, cp.constraints.SOC):
        kind = f"SOC dim={con.size}"
    elif isinstance(con, cp.constraints.ExpCone):
        kind = f"EXP triples={con.size // 3}"
    elif isinstance(con, cp.constraints.Equality):
        kind = f"EQ size={con.size}"
    else:
        kind = f"INEQ size={con.size}"
    return kind


class ConicProgram:
    """A named conic model: variables, labelled constraints, linear objective."""

    def __init__(self, name: str = "program"):
        self.name = name
        self.variables: Dict[str, cp.Variable] = {}
        self.parameters: Dict[str, cp.Parameter] = {}
        self._constraints: List[Tuple[str, cp.constraints.constraint.Constraint]] = []
        self._objective: Optional[cp.problems.objective.Objective] = None
        self._problem: Optional[cp.Problem] = None

    # -- construction -----------------------------------------------------

    def variable(self, name: str, shape=(), **attrs) -> cp.Variable:
        if name in self.variables:
            raise ValueError(f"variable {name!r} already declared")
        v = cp.Variable(shape, name=name, **attrs)
        self.variables[name] = v
        return v

    def parameter(self, name: str, shape=(), **attrs) -> cp.Parameter:
        if name in self.parameters:
            raise ValueError(f"parameter {name!r} already declared")
        p = cp.Parameter(shape, name=name, **attrs)
        self.parameters[name] = p
        return p

    def add(self, constraint, label: str = "") -> None:
        if isinstance(constraint, (list, tuple)):
            for i, c in enumerate(constraint):
                self.add(c, f"{label}[{i}]" if label else "")
            return
        self._constraints.append((label, constraint))
        self._problem = None

    def minimize(self, expr) -> None:
        self._objective = cp.Minimize(expr)
        self._problem = None

    def maximize(self, expr) -> None:
        self._objective = cp.Maximize(expr)
        self._problem = None

    @property
    def constraints(self) -> List[cp.constraints.constraint.Constraint]:
        return [c for _, c in self._constraints]

    # -- solving ----------------------------------------------------------

    def required_cones(self) -> set:
        kinds = set()
        for _, c in self._constraints:
            kinds |= _cones_of_constraint(c)
        return kinds

    def _pick_solver(self, solver: Optional[str]) -> str:
        needed = self.required_cones()
        if solver is not None:
            caps = _SOLVERS.get(solver.upper())
            if caps is None:
                raise SolverCapabilityError(f"unknown solver {solver!r}")
            missing = needed - caps
            if missing:
                raise SolverCapabilityError(
                    f"solver {solver} lacks cones {sorted(missing)} required by {self.name}"
                )
            return solver.upper()
        for name, caps in _SOLVERS.items():
            if not needed - caps:
                return name
        raise SolverCapabilityError(
            f"no registered solver supports cones {sorted(needed)}"
        )

    def _build(self) -> cp.Problem:
        if self._objective is None:
            self._objective = cp.Minimize(0)
        if self._problem is None:
            self._problem = cp.Problem(self._objective, self.constraints)
        return self._problem

    def solve(self, tol: float = DEFAULT_TOL, solver: Optional[str] = None,
              warm_start: bool = True) -> SolveOutcome:
        chosen = self._pick_solver(solver)
        problem = self._build()
        opts = solver_options(chosen, tol)
        try:
            problem.solve(solver=chosen, warm_start=warm_start, **opts)
        except cp.error.SolverError as exc:
            return SolveOutcome("numerical-failure", None, None, {"error": str(exc)})
        return outcome_from_problem(problem, self.variables, chosen)

    # -- inspection ---------------------------------------------------------

    def dump(self) -> str:
        """Self-describing text form: variables, cones, objective sense."""
        out = io.StringIO()
        sense = "minimize" if isinstance(self._objective, cp.Minimize) or self._objective is None else "maximize"
        print(f"conic-program {self.name}", file=out)
        print(f"sense {sense}", file=out)
        print(f"objective {self._objective.expr if self._objective else 0}", file=out)
        print(f"variables {len(self.variables)}", file=out)
        for name, v in self.variables.items():
            attrs = []
            if v.is_hermitian() and v.is_complex():
                attrs.append("hermitian")
            elif v.is_symmetric():
                attrs.append("symmetric")
            if v.is_nonneg():
                attrs.append("nonneg")
            print(f"  {name} shape={v.shape} {' '.join(attrs)}".rstrip(), file=out)
        if self.parameters:
            print(f"parameters {len(self.parameters)}", file=out)
            for name, p in self.parameters.items():
                print(f"  {name} shape={p.shape}", file=out)
        print(f"constraints {len(self._constraints)}", file=out)
        for label, c in self._constraints:
            tag = f" [{label}]" if label else ""
            print(f"  {_describe_constraint(c)}{tag}", file=out)
        print(f"cones {sorted(self.required_cones())}", file=out)
        return out.getvalue()


def solver_options(solver: str, tol: float) -> dict:
    if solver == "CLARABEL":
        return {
            "tol_gap_abs": tol, "tol_gap_rel": tol, "tol_feas": tol,
            "tol_infeas_abs": tol, "tol_infeas_rel": tol,
        }
    if solver == "SCS":
        return {"eps_abs": tol, "eps_rel": tol, "max_iters": 200_000}
    return {}


def outcome_from_problem(problem: cp.Problem, variables: Dict[str, cp.Variable],
                         solver: str) -> SolveOutcome:
    """Map a solved cvxpy problem to the back-end-agnostic outcome record."""
    status = problem.status
    stats = {"solver": solver, "raw_status": status}
    ss = problem.solver_stats
    if ss is not None:
        stats["iterations"] = ss.num_iters
        stats["solve_time"] = ss.solve_time
    if status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        stats["inaccurate"] = status == cp.OPTIMAL_INACCURATE
        assignments = {name: np.array(v.value) for name, v in variables.items()}
        return SolveOutcome("optimal", float(problem.value), assignments, stats)
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return SolveOutcome("infeasible", None, None, stats)
    return SolveOutcome("numerical-failure", None, None, stats)


# --------------------------------------------------------------------------
# Complex-to-real embedding
# --------------------------------------------------------------------------

def complex_to_real_embedding(H: np.ndarray) -> np.ndarray:
    """Symmetric [[Re H, -Im H], [Im H, Re H]] of a Hermitian matrix.

    Positive semidefiniteness is preserved in both directions; every
    eigenvalue of H appears twice in the embedding (trace doubles).
    """
    H = np.asarray(H)
    n = H.shape[0]
    if H.shape != (n, n):
        raise ValueError("embedding requires a square matrix")
    if not np.allclose(H, H.conj().T, atol=1e-10 * max(1.0, np.abs(H).max())):
        raise ValueError("embedding requires a Hermitian matrix")
    re, im = np.real(H), np.imag(H)
    return np.block([[re, -im], [im, re]])


# --------------------------------------------------------------------------
# Rank-one recovery (undoing the semidefinite relaxation)
# --------------------------------------------------------------------------

def rank_ratio(W: np.ndarray) -> float:
    """Dominant-eigenvalue share of the trace: 1.0 iff numerically rank one."""
    W = np.asarray(W, dtype=complex)
    tr = float(np.real(np.trace(W)))
    if tr <= 0:
        raise ValueError("rank ratio undefined for a zero or indefinite matrix")
    return float(np.linalg.eigvalsh(0.5 * (W + W.conj().T)).max() / tr)


def rank_one_reconstruct(
    W_list: Sequence[np.ndarray],
    R: np.ndarray,
    h_list: Sequence[np.ndarray],
    mask: np.ndarray,
    psd_tol: float = 1e-8,
):
    """Closed-form rank-one solution with the same aggregate covariance.

    Each lifted beam covariance is replaced by its projection onto the
    effective user channel; the radar covariance absorbs the difference so
    the sum is preserved exactly.  Raises if a user has no effective channel
    power, or if the residual radar covariance fails PSD beyond tolerance
    (surfaced, never clipped).
    """
    W_list = [np.asarray(W, complex) for W in W_list]
    R = np.asarray(R, complex)
    S_total = sum(W_list) + R
    W_tilde = []
    for k, (W, h) in enumerate(zip(W_list, h_list)):
        h_eff = np.asarray(mask, float) * np.asarray(h, complex)
        denom = float(np.real(h_eff.conj() @ W @ h_eff))
        scale = max(float(np.real(np.trace(W))), 1e-300)
        if denom <= 1e-12 * scale * float(np.real(h_eff.conj() @ h_eff)):
            raise ReconstructionError(
                f"user {k}: effective channel power through the beam covariance is zero"
            )
        v = W @ h_eff
        W_tilde.append(np.outer(v, v.conj()) / denom)
    R_tilde = S_total - sum(W_tilde)
    R_tilde = 0.5 * (R_tilde + R_tilde.conj().T)
    min_eig = float(np.linalg.eigvalsh(R_tilde).min())
    floor = -psd_tol * max(float(np.real(np.trace(R_tilde))), 1e-300)
    if min_eig < floor:
        raise ReconstructionError(
            f"residual radar covariance indefinite (min eig {min_eig:.3e}); "
            "rank-one recovery assumptions violated"
        )
    return W_tilde, R_tilde
