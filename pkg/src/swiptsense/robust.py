"""Constraint factories for the robust conic designs.

Each factory turns one construct of the robust formulation into conic
material: the Schur embedding of the location-error objective, the
sign-definiteness certificate for norm-bounded FIM perturbations (both the
literal block form and an exactly equivalent arrow decomposition that
solvers can digest), the S-procedure certificate for the harvested-power
floor, big-M lifting families binding selector bits to matrix variables,
the trace-inverse epigraph, and the exponential-cone form of the
harvesting-circuit constraint.

All emitted blocks are affine in the decision variables; factories accept
numpy arrays or cvxpy expressions interchangeably.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import cvxpy as cp
import numpy as np

from .scenario import EhModelParams, UncertaintyBox

__all__ = [
    "LmiBlock",
    "BigMFamily",
    "trace_inverse_epigraph",
    "schur_embed_crb",
    "petersen_lmi",
    "petersen_arrow_reduction",
    "s_procedure_lmi",
    "bigM_family",
    "exp_cone_eh_constraint",
]

ArrayLike = Union[np.ndarray, cp.Expression]


def _ctranspose(x: ArrayLike) -> ArrayLike:
    if isinstance(x, cp.Expression):
        return cp.conj(x).T if x.is_complex() else x.T
    x = np.asarray(x)
    return x.conj().T


@dataclass
class LmiBlock:
    """An affine matrix expression constrained to the PSD cone.

    ``block_sizes`` records the top-level partition for inspection;
    ``expr`` is affine in every decision variable it references.
    """

    expr: cp.Expression
    description: str = ""
    block_sizes: Tuple[int, ...] = ()

    def __post_init__(self):
        if not isinstance(self.expr, cp.Expression):
            self.expr = cp.Constant(np.asarray(self.expr))

    def constraint(self):
        return self.expr >> 0

    @property
    def dim(self) -> int:
        return self.expr.shape[0]

    def value(self) -> np.ndarray:
        v = self.expr.value
        if v is None:
            raise ValueError("block contains unsolved variables")
        return np.asarray(v)


@dataclass
class BigMFamily:
    """The four matrix inequalities tying a lifted variable to selector*base.

    At a binary selector the family pinches the lifted variable to exactly
    ``base`` (selector = 1) or zero (selector = 0), provided ``base`` stays
    under the cap.
    """

    upper_sel: LmiBlock     # lifted <= sel*cap*I
    lower_base: LmiBlock    # lifted >= base - (1-sel)*cap*I
    upper_base: LmiBlock    # lifted <= base
    nonneg: LmiBlock        # lifted >= 0

    def constraints(self) -> list:
        return [
            self.upper_sel.constraint(),
            self.lower_base.constraint(),
            self.upper_base.constraint(),
            self.nonneg.constraint(),
        ]


# --------------------------------------------------------------------------
# Trace-inverse epigraph
# --------------------------------------------------------------------------

def trace_inverse_epigraph(J_var: ArrayLike) -> Tuple[cp.Variable, LmiBlock]:
    """Auxiliary V with [[V, I], [I, J]] >= 0: min Tr(V) == min Tr(J^-1).

    The block is PSD iff V >= J^-1 (for J > 0), so minimizing Tr(V) presses
    the block onto the PSD boundary with V = J^-1.
    """
    n = J_var.shape[0]
    V = cp.Variable((n, n), symmetric=True, name="trace_inv_epi")
    eye = np.eye(n)
    block = cp.bmat([[V, eye], [eye, J_var]])
    return V, LmiBlock(block, "trace-inverse epigraph", (n, n))


# --------------------------------------------------------------------------
# Schur embedding of the location block
# --------------------------------------------------------------------------

def schur_embed_crb(J_var: ArrayLike, fim_affine: ArrayLike) -> LmiBlock:
    """Embed `Schur complement of position block >= J` as one LMI.

    ``fim_affine`` is the full (2Q x 2Q) information matrix, affine in the
    transmit covariance; the returned block subtracts J from its position
    corner: [[F_pp - J, F_pa], [F_pa^T, F_aa]] >= 0.
    """
    n = fim_affine.shape[0]
    m = J_var.shape[0]
    if J_var.shape != (m, m) or n <= m:
        raise ValueError("position block must be strictly smaller than the FIM")
    pad = np.zeros((n, n))
    embed = cp.bmat([
        [J_var, np.zeros((m, n - m))],
        [np.zeros((n - m, m)), np.zeros((n - m, n - m))],
    ]) if isinstance(J_var, cp.Expression) else None
    if embed is None:
        embed = pad.copy()
        embed[:m, :m] = np.asarray(J_var)
    return LmiBlock(fim_affine - embed, "CRB Schur embedding", (m, n - m))


# --------------------------------------------------------------------------
# Sign-definiteness certificate for norm-bounded perturbations
# --------------------------------------------------------------------------

def petersen_lmi(
    M_affine: ArrayLike,
    P_list: Sequence[ArrayLike],
    q_list: Sequence[np.ndarray],
    rho_list: Sequence[float],
    eps_vars: Sequence[ArrayLike],
) -> LmiBlock:
    """Single certificate LMI for M >= sum_i (P_i^H X_i q_i + q_i^H X_i^H P_i)
    over all ||X_i||_F <= rho_i.

    Emits the literal block form [[M - sum_i eps_i q_i^H q_i, Phat^H],
    [Phat, T]] with Phat stacking -rho_i P_i and T = diag(eps) (x) I.  The
    multipliers must be constrained nonnegative by the caller (they are
    emitted as part of the feasible region, not created here).  Exact - not
    conservative - for the norm-bounded uncertainty model, but its identity
    blocks grow with the perturbation dimension; use
    :func:`petersen_arrow_reduction` when P_i has a single loaded column.
    """
    n_terms = len(P_list)
    if not (n_terms == len(q_list) == len(rho_list) == len(eps_vars)):
        raise ValueError("certificate term lists must have equal length")
    if any(np.asarray(r) < 0 for r in rho_list):
        raise ValueError("perturbation bounds must be nonnegative")
    d = M_affine.shape[0]

    corner = M_affine
    for q, eps in zip(q_list, eps_vars):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if q.shape[1] != d:
            raise ValueError("q row dimension must match the certificate matrix")
        corner = corner - eps * (q.T @ q)

    row_dims = []
    stacked = []
    for P, rho in zip(P_list, rho_list):
        if P.shape[1] != d:
            raise ValueError("P column dimension must match the certificate matrix")
        row_dims.append(P.shape[0])
        stacked.append(-float(rho) * P)

    rows = [[corner] + [_ctranspose(B) for B in stacked]]
    for i, (m_i, eps) in enumerate(zip(row_dims, eps_vars)):
        row = [stacked[i]]
        for j, m_j in enumerate(row_dims):
            row.append(eps * np.eye(m_i) if i == j else np.zeros((m_i, m_j)))
        rows.append(row)
    block = cp.bmat(rows)
    return LmiBlock(block, "sign-definiteness certificate", (d, *row_dims))


def petersen_arrow_reduction(
    M_affine: ArrayLike,
    load_indices: Sequence[int],
    u_list: Sequence[ArrayLike],
    q_list: Sequence[np.ndarray],
    eps_vars: Sequence[ArrayLike],
    tau_vars: Sequence[ArrayLike],
) -> Tuple[LmiBlock, list]:
    """Exact solver-friendly equivalent of :func:`petersen_lmi` when every
    P_i = u_i e_{l_i}^T has one loaded column.

    The big block has arrow sparsity (head coupled to per-term identity
    blocks), so it is PSD iff it splits into per-clique PSD pieces; each
    clique collapses through a rank-one Schur complement into the scalar
    condition ||u_i||^2 <= tau_i * eps_i.  The result: one head LMI

        M - sum_i eps_i q_i^H q_i - sum_i tau_i e_{l_i} e_{l_i}^T >= 0

    plus one rotated second-order cone per term.  Callers must keep
    eps_i, tau_i >= 0 (use nonneg variables).
    """
    n_terms = len(u_list)
    if not (n_terms == len(load_indices) == len(q_list) == len(eps_vars) == len(tau_vars)):
        raise ValueError("reduction term lists must have equal length")
    d = M_affine.shape[0]
    corner = M_affine
    for li, q, eps, tau in zip(load_indices, q_list, eps_vars, tau_vars):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        e = np.zeros((d, 1))
        e[li, 0] = 1.0
        corner = corner - eps * (q.T @ q) - tau * (e @ e.T)
    socs = [cp.quad_over_lin(u, eps) <= tau
            for u, eps, tau in zip(u_list, eps_vars, tau_vars)]
    head = LmiBlock(corner, "certificate head (arrow-reduced)", (d,))
    return head, socs


# --------------------------------------------------------------------------
# S-procedure certificate for the robust harvested-power floor
# --------------------------------------------------------------------------

def s_procedure_lmi(
    S_bar_affine: ArrayLike,
    E: np.ndarray,
    h_bar: np.ndarray,
    psi_plus: UncertaintyBox,
    kappa_var: ArrayLike,
    p_in_var: ArrayLike,
    U_kron: Optional[ArrayLike] = None,
) -> LmiBlock:
    """Certificate that the received power stays above ``p_in_var`` for every
    location offset in the ball circumscribing the refined box.

    With U = [E, h_bar] the block is diag(kappa, kappa, -kappa*r^2 - P_IN)
    + U^H S_bar U >= 0, r^2 = psi1^2 + psi2^2.  The identity part matches
    the offset dimension (2), making the block 3x3.  ``U_kron`` optionally
    supplies the precomputed operator kron(U^T, U^H) so the quadratic form
    can be applied as a single linear map (needed when U is a solver
    parameter).
    """
    E = np.asarray(E)
    h_bar = np.asarray(h_bar).reshape(-1)
    if E.shape != (h_bar.size, 2):
        raise ValueError("derivative matrix must be (channel dim, 2)")
    r_sq = psi_plus.psi1 ** 2 + psi_plus.psi2 ** 2
    corner = cp.reshape(-kappa_var * r_sq - p_in_var, (1, 1), order="F")
    diag_part = cp.bmat([
        [kappa_var * np.eye(2), np.zeros((2, 1))],
        [np.zeros((1, 2)), corner],
    ])
    if U_kron is not None:
        quad = cp.reshape(U_kron @ cp.vec(S_bar_affine, order="F"), (3, 3), order="F")
    else:
        U = np.column_stack([E, h_bar])
        quad = U.conj().T @ S_bar_affine @ U
    return LmiBlock(diag_part + quad, "harvest floor S-procedure", (2, 1))


# --------------------------------------------------------------------------
# Big-M lifting families
# --------------------------------------------------------------------------

def bigM_family(
    lifted_var: ArrayLike,
    base_var: ArrayLike,
    selector_var: ArrayLike,
    cap: float,
) -> BigMFamily:
    """Four PSD inequalities making lifted = selector * base at binary values.

    ``cap`` must dominate any feasible trace of the base variable (total
    radiated power for beam/radar covariances; the information-bound cap
    for the auxiliary objective block).
    """
    if cap <= 0:
        raise ValueError("big-M cap must be positive")
    n = lifted_var.shape[0]
    eye = np.eye(n)
    return BigMFamily(
        upper_sel=LmiBlock(selector_var * cap * eye - lifted_var, "lifted <= sel*cap*I", (n,)),
        lower_base=LmiBlock(
            lifted_var - base_var + (1 - selector_var) * cap * eye,
            "lifted >= base - (1-sel)*cap*I", (n,),
        ),
        upper_base=LmiBlock(base_var - lifted_var, "lifted <= base", (n,)),
        nonneg=LmiBlock(lifted_var, "lifted >= 0", (n,)),
    )


# --------------------------------------------------------------------------
# Exponential-cone form of the harvesting-circuit constraint
# --------------------------------------------------------------------------

def exp_cone_eh_constraint(
    p_in_var: ArrayLike,
    p_eh_var: ArrayLike,
    varpi,
    eh: EhModelParams,
    t_var: Optional[ArrayLike] = None,
) -> list:
    """Quadratic-transform surrogate of the circuit curve as convex material.

    Emits ``t >= exp(a*(b - P_IN))`` (an exponential cone) and the linear
    inequality ``2w - w^2 (1 + t) >= (1-Xi) P_EH / P_sat + Xi``.  ``varpi``
    is either a fixed scalar in (0, 1] or a pair (2w, w^2) of precomputed
    coefficients (scalars or solver parameters) for use inside the
    alternating update loop.  At the matched coefficient value the
    surrogate is tight: it certifies exactly the harvested power of the
    true curve at the current operating point.
    """
    if isinstance(varpi, tuple):
        lin_coef, sq_coef = varpi
    else:
        w = float(varpi)
        if not (0.0 < w <= 1.0):
            raise ValueError(f"quadratic-transform coefficient must be in (0, 1], got {w}")
        lin_coef, sq_coef = 2.0 * w, w * w
    if t_var is None:
        t_var = cp.Variable(nonneg=True, name="eh_exp_epi")
    xi = eh.Xi
    cons = [
        cp.exp(eh.a * eh.b - eh.a * p_in_var) <= t_var,
        lin_coef - sq_coef * (1.0 + t_var) >= (1.0 - xi) * p_eh_var / eh.P_sat + xi,
    ]
    return cons


def varpi_update(p_in: float, eh: EhModelParams) -> float:
    """Closed-form refresh of the quadratic-transform coefficient."""
    return 1.0 / (1.0 + np.exp(eh.a * (eh.b - p_in)))
