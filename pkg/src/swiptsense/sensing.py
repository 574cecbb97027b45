"""Closed-form sensing mathematics.

Steering vectors and their position derivatives, bistatic target-response
matrices, Fisher information and its position-block Schur complement (the
location CRB), plus the first-order expansion of the vectorized FIM kernels
with the norm bounds that feed the robust certificate LMIs.

Conventions
-----------
* All positions are 2-D Cartesian [m]; antennas per AP ``N`` is even.
* The parameter vector for receiver ``q`` stacks the two position
  coordinates followed by the real parts and then the imaginary parts of
  the reflection coefficients of the other ``Q-1`` APs (the receiver's own
  self-path coefficient is excluded and never observable).
* ``vec`` is column-major throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .scenario import Geometry, SystemConfig, UncertaintyBox, cos_theta

__all__ = [
    "SingularFimError",
    "CrbMatrix",
    "FimDecomposition",
    "steering",
    "steering_derivative",
    "steering_second_derivative",
    "response_matrix",
    "response_matrix_stack",
    "chi_dimension",
    "g_derivative_stacks",
    "lambda_vectors",
    "lambda_taylor",
    "fim",
    "crb_from_fim",
    "crb_trace_worst",
    "receiver_mask",
    "transmit_block",
    "eh_channel",
    "eh_channel_jacobian",
    "received_power",
    "sinr_value",
]

COND_SINGULAR = 1e12


class SingularFimError(np.linalg.LinAlgError):
    """Fisher information too ill-conditioned to invert meaningfully."""


# --------------------------------------------------------------------------
# Steering vectors and their position derivatives
# --------------------------------------------------------------------------

def _cos_grad(p: np.ndarray, r_ap: np.ndarray) -> np.ndarray:
    """Gradient of the direction cosine w.r.t. the target position."""
    u = np.asarray(r_ap, float) - np.asarray(p, float)
    d = float(np.hypot(u[0], u[1]))
    if d == 0.0:
        raise ValueError("target position coincides with the AP")
    return np.array([-1.0 / d + u[0] * u[0] / d**3, u[0] * u[1] / d**3])


def _cos_hess(p: np.ndarray, r_ap: np.ndarray) -> np.ndarray:
    """Hessian of the direction cosine w.r.t. the target position."""
    u = np.asarray(r_ap, float) - np.asarray(p, float)
    d = float(np.hypot(u[0], u[1]))
    if d == 0.0:
        raise ValueError("target position coincides with the AP")
    H = np.empty((2, 2))
    for i in range(2):
        for l in range(2):
            val = 3.0 * u[0] * u[i] * u[l] / d**5
            if i == 0:
                val -= u[l] / d**3
            if l == 0:
                val -= u[i] / d**3
            if i == l:
                val -= u[0] / d**3
            H[i, l] = val
    return H


def _phase_slopes(N: int) -> np.ndarray:
    """Per-antenna phase multipliers (2m - N + 1)/2 for m = 0..N-1."""
    return (2.0 * np.arange(N) - N + 1.0) / 2.0


def steering(p, r_ap, N: int) -> np.ndarray:
    """Unit-modulus ULA response of the AP at ``r_ap`` toward a target at ``p``.

    Entry m equals exp(j*pi*(2m-N+1)/2 * cos(theta)); squared norm is N.
    """
    if N % 2 != 0:
        raise ValueError("the array response formula assumes an even antenna count")
    c = cos_theta(p, r_ap)
    return np.exp(1j * np.pi * _phase_slopes(N) * c)


def steering_derivative(p, r_ap, N: int, axis: int) -> np.ndarray:
    """d/dp_axis of :func:`steering` (axis is 1 or 2), by the chain rule."""
    if axis not in (1, 2):
        raise ValueError("axis must be 1 or 2")
    a = steering(p, r_ap, N)
    grad = _cos_grad(p, r_ap)
    return a * (1j * np.pi * _phase_slopes(N)) * grad[axis - 1]


def steering_second_derivative(p, r_ap, N: int, axis_i: int, axis_j: int) -> np.ndarray:
    """Mixed second derivative d^2 a / (dp_i dp_j), axes 1-based."""
    if axis_i not in (1, 2) or axis_j not in (1, 2):
        raise ValueError("axes must be 1 or 2")
    a = steering(p, r_ap, N)
    grad = _cos_grad(p, r_ap)
    hess = _cos_hess(p, r_ap)
    jg = 1j * np.pi * _phase_slopes(N)
    ci, cj = grad[axis_i - 1], grad[axis_j - 1]
    cij = hess[axis_i - 1, axis_j - 1]
    return a * (jg * jg * ci * cj + jg * cij)


# --------------------------------------------------------------------------
# Target response matrices and parameter derivatives
# --------------------------------------------------------------------------

def response_matrix(p, r_rx, r_tx, N: int) -> np.ndarray:
    """Rank-one bistatic response a(theta_rx) a(theta_tx)^H for one AP pair."""
    return np.outer(steering(p, r_rx, N), steering(p, r_tx, N).conj())


def response_matrix_stack(q_rx: int, p, geometry: Geometry, alphas: np.ndarray, N: int) -> np.ndarray:
    """(N, NQ) stacked response seen by receiver ``q_rx``: blocks alpha_q' * G_{q',q}.

    The receiver's own block is zero (no self path; it is masked out of the
    signal model regardless).
    """
    Q = geometry.Q
    a_rx = steering(p, geometry.ap_positions[q_rx], N)
    G = np.zeros((N, N * Q), dtype=complex)
    for q in range(Q):
        if q == q_rx:
            continue
        a_tx = steering(p, geometry.ap_positions[q], N)
        G[:, q * N:(q + 1) * N] = alphas[q, q_rx] * np.outer(a_rx, a_tx.conj())
    return G


def chi_dimension(Q: int) -> int:
    """Length of the estimated parameter vector: 2 position + 2(Q-1) RCS."""
    return 2 * Q


def _chi_alpha_order(Q: int, q_rx: int) -> list:
    """Transmit-AP indices, in increasing order, backing the RCS entries of chi."""
    return [q for q in range(Q) if q != q_rx]


def g_derivative_stacks(
    q_rx: int,
    p,
    geometry: Geometry,
    alphas: np.ndarray,
    N: int,
    with_position_derivs: bool = False,
):
    """Derivatives of the stacked response w.r.t. every estimated parameter.

    Returns ``gdot``: list of length 2Q of (N, NQ) arrays, where entry i is
    the derivative of the stacked response with respect to chi_i.  The first
    two entries differentiate through the steering vectors; the RCS entries
    have a single nonzero block equal to G_{q',q} (real part) or j*G_{q',q}
    (imaginary part).

    With ``with_position_derivs`` also returns ``gdot_d``: a (2, 2Q) nested
    list with d(gdot[i])/dp_axis, needed for the first-order expansion of
    the FIM kernels.
    """
    Q = geometry.Q
    aps = geometry.ap_positions
    n_chi = chi_dimension(Q)
    others = _chi_alpha_order(Q, q_rx)

    a = [steering(p, aps[q], N) for q in range(Q)]
    da = [[steering_derivative(p, aps[q], N, ax) for q in range(Q)] for ax in (1, 2)]
    if with_position_derivs:
        dda = {
            (ax_i, ax_j): [steering_second_derivative(p, aps[q], N, ax_i, ax_j) for q in range(Q)]
            for ax_i in (1, 2) for ax_j in (1, 2)
        }

    def pos_block(i_ax: int, q: int) -> np.ndarray:
        # d/dp_i of a(theta_rx) a(theta_q)^H
        return (np.outer(da[i_ax - 1][q_rx], a[q].conj())
                + np.outer(a[q_rx], da[i_ax - 1][q].conj()))

    gdot = []
    for i in range(n_chi):
        M = np.zeros((N, N * Q), dtype=complex)
        if i < 2:
            for q in range(Q):
                if q == q_rx:
                    continue
                M[:, q * N:(q + 1) * N] = alphas[q, q_rx] * pos_block(i + 1, q)
        else:
            m = (i - 2) % (Q - 1)
            q = others[m]
            blk = np.outer(a[q_rx], a[q].conj())
            if i >= 2 + (Q - 1):
                blk = 1j * blk
            M[:, q * N:(q + 1) * N] = blk
        gdot.append(M)

    if not with_position_derivs:
        return gdot

    def pos_block_deriv(i_ax: int, ax: int, q: int) -> np.ndarray:
        # d/dp_ax of pos_block(i_ax, q), product rule through both factors
        return (np.outer(dda[(i_ax, ax)][q_rx], a[q].conj())
                + np.outer(da[i_ax - 1][q_rx], da[ax - 1][q].conj())
                + np.outer(da[ax - 1][q_rx], da[i_ax - 1][q].conj())
                + np.outer(a[q_rx], dda[(i_ax, ax)][q].conj()))

    gdot_d = [[None] * n_chi for _ in range(2)]
    for ax in (1, 2):
        for i in range(n_chi):
            M = np.zeros((N, N * Q), dtype=complex)
            if i < 2:
                for q in range(Q):
                    if q == q_rx:
                        continue
                    M[:, q * N:(q + 1) * N] = alphas[q, q_rx] * pos_block_deriv(i + 1, ax, q)
            else:
                m = (i - 2) % (Q - 1)
                q = others[m]
                blk = pos_block(ax, q)
                if i >= 2 + (Q - 1):
                    blk = 1j * blk
                M[:, q * N:(q + 1) * N] = blk
            gdot_d[ax - 1][i] = M
    return gdot, gdot_d


# --------------------------------------------------------------------------
# Fisher information kernels and their expansion
# --------------------------------------------------------------------------

def fim_pairs(Q: int) -> Tuple[Tuple[int, int], ...]:
    """Upper-triangular index pairs (i, j), j >= i, of the 2Q x 2Q FIM."""
    n = chi_dimension(Q)
    return tuple((i, j) for i in range(n) for j in range(i, n))


def receiver_mask(Q: int, N: int, q_rx: int) -> np.ndarray:
    """Length-NQ 0/1 vector zeroing out the receiving AP's antenna block."""
    m = np.ones(N * Q)
    m[q_rx * N:(q_rx + 1) * N] = 0.0
    return m


def transmit_block(Q: int, N: int, q: int) -> np.ndarray:
    """Length-NQ 0/1 vector selecting only AP q's antenna block."""
    m = np.zeros(N * Q)
    m[q * N:(q + 1) * N] = 1.0
    return m


def lambda_vectors(
    q_rx: int,
    p,
    geometry: Geometry,
    alphas: np.ndarray,
    N: int,
    derivatives: bool = False,
):
    """Vectorized FIM kernels lambda_ij at position ``p`` for receiver ``q_rx``.

    Returns an array of shape (n_pairs, N^2 Q^2); with ``derivatives`` also
    the two position-derivative arrays of the same shape.  Kernels are
    vec(masked Gdot_j^H Gdot_i masked) with the receiver block masked on
    both sides, so that Re{vec(S)^H lambda_ij} reproduces the FIM entry.
    """
    Q = geometry.Q
    mask = receiver_mask(Q, N, q_rx)
    pairs = fim_pairs(Q)

    if derivatives:
        gdot, gdot_d = g_derivative_stacks(q_rx, p, geometry, alphas, N, True)
        gm = [g * mask for g in gdot]
        gm_d = [[g * mask for g in gdot_d[ax]] for ax in range(2)]
    else:
        gdot = g_derivative_stacks(q_rx, p, geometry, alphas, N)
        gm = [g * mask for g in gdot]

    n2 = (N * Q) ** 2
    lam = np.empty((len(pairs), n2), dtype=complex)
    for idx, (i, j) in enumerate(pairs):
        lam[idx] = (gm[j].conj().T @ gm[i]).reshape(-1, order="F")
    if not derivatives:
        return lam

    lam_d = np.empty((2, len(pairs), n2), dtype=complex)
    for ax in range(2):
        for idx, (i, j) in enumerate(pairs):
            M = gm_d[ax][j].conj().T @ gm[i] + gm[j].conj().T @ gm_d[ax][i]
            lam_d[ax, idx] = M.reshape(-1, order="F")
    return lam, lam_d


@dataclass(frozen=True)
class FimDecomposition:
    """Nominal FIM kernels, their position derivatives, and error bounds.

    One instance per candidate sensing receiver, evaluated at the location
    estimate.  ``rho[idx]`` bounds the norm of the kernel perturbation over
    the uncertainty box via sqrt(||d1||^2 psi1^2 + ||d2||^2 psi2^2).
    """

    q_rx: int
    N: int
    Q: int
    pairs: Tuple[Tuple[int, int], ...]
    lam_bar: np.ndarray      # (n_pairs, N^2 Q^2) complex
    lam_dot: np.ndarray      # (2, n_pairs, N^2 Q^2) complex
    rho: np.ndarray          # (n_pairs,)
    box: UncertaintyBox

    @property
    def n_chi(self) -> int:
        return chi_dimension(self.Q)

    def bar_matrices(self) -> np.ndarray:
        """(n_pairs, NQ, NQ) un-vectorized nominal kernels (column-major)."""
        n = self.N * self.Q
        return self.lam_bar.reshape(len(self.pairs), n, n).transpose(0, 2, 1)


def lambda_taylor(
    q_rx: int,
    geometry: Geometry,
    alphas: np.ndarray,
    box: UncertaintyBox,
    N: int,
) -> FimDecomposition:
    """First-order expansion of the FIM kernels around the location estimate."""
    p_bar = geometry.ehr_estimate
    lam, lam_d = lambda_vectors(q_rx, p_bar, geometry, alphas, N, derivatives=True)
    rho = np.sqrt(
        np.sum(np.abs(lam_d[0]) ** 2, axis=1) * box.psi1 ** 2
        + np.sum(np.abs(lam_d[1]) ** 2, axis=1) * box.psi2 ** 2
    )
    return FimDecomposition(
        q_rx=q_rx, N=N, Q=geometry.Q, pairs=fim_pairs(geometry.Q),
        lam_bar=lam, lam_dot=lam_d, rho=rho, box=box,
    )


def _assemble_fim(lam: np.ndarray, pairs, n_chi: int, s_vec: np.ndarray, scale: float) -> np.ndarray:
    F = np.zeros((n_chi, n_chi))
    for idx, (i, j) in enumerate(pairs):
        val = scale * float(np.real(np.vdot(s_vec, lam[idx])))
        F[i, j] = val
        F[j, i] = val
    return 0.5 * (F + F.T)


def fim(
    q_rx: int,
    S: np.ndarray,
    decomp: FimDecomposition,
    eta_L: float,
    sigma_q_sq: float,
) -> np.ndarray:
    """Fisher information (2Q x 2Q) at the nominal location for covariance S.

    Linear in S; symmetrized after assembly to suppress roundoff.  ``eta_L``
    is the sensing-phase sample count, ``sigma_q_sq`` the receiver noise
    power.  Raises on a covariance that is not Hermitian PSD.
    """
    if decomp.q_rx != q_rx:
        raise ValueError("decomposition was built for a different receiver")
    S = np.asarray(S, dtype=complex)
    if not np.allclose(S, S.conj().T, atol=1e-9 * max(1.0, np.abs(S).max())):
        raise ValueError("covariance must be Hermitian")
    w = np.linalg.eigvalsh(0.5 * (S + S.conj().T))
    if w.min() < -1e-8 * max(1.0, w.max()):
        raise ValueError("covariance must be positive semidefinite")
    scale = 2.0 * eta_L / sigma_q_sq
    s_vec = S.reshape(-1, order="F")
    return _assemble_fim(decomp.lam_bar, decomp.pairs, decomp.n_chi, s_vec, scale)


@dataclass(frozen=True)
class CrbMatrix:
    """2x2 location error-bound matrix; diagonal entries bound per-axis MSE."""

    matrix: np.ndarray

    def __post_init__(self):
        M = 0.5 * (np.asarray(self.matrix, float) + np.asarray(self.matrix, float).T)
        object.__setattr__(self, "matrix", M)
        if M.shape != (2, 2):
            raise ValueError("location CRB matrix must be 2x2")
        if min(M[0, 0], M[1, 1]) < -1e-12 * max(1.0, abs(M).max()):
            raise ValueError("CRB diagonal must be nonnegative")

    def crb(self, i: int) -> float:
        """Per-coordinate bound, i in {1, 2}."""
        return float(self.matrix[i - 1, i - 1])

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))


def crb_from_fim(F: np.ndarray) -> CrbMatrix:
    """Location CRB: inverse Schur complement of the position block of F."""
    F = np.asarray(F, dtype=float)
    n = F.shape[0]
    if F.shape != (n, n) or n < 4:
        raise ValueError("FIM must be square with at least a 2x2 nuisance block")
    if not np.allclose(F, F.T, atol=1e-8 * max(1.0, np.abs(F).max())):
        raise ValueError("FIM must be symmetric")
    F_pp = F[:2, :2]
    F_pa = F[:2, 2:]
    F_aa = F[2:, 2:]
    if np.linalg.cond(F_aa) > COND_SINGULAR:
        raise SingularFimError("nuisance block of the FIM is singular")
    schur = F_pp - F_pa @ np.linalg.solve(F_aa, F_pa.T)
    schur = 0.5 * (schur + schur.T)
    if np.linalg.cond(schur) > COND_SINGULAR:
        raise SingularFimError("position-block Schur complement is singular")
    return CrbMatrix(np.linalg.inv(schur))


def fim_at(
    q_rx: int,
    p,
    S: np.ndarray,
    geometry: Geometry,
    alphas: np.ndarray,
    N: int,
    eta_L: float,
    sigma_q_sq: float,
) -> np.ndarray:
    """Exact (non-expanded) FIM recomputed at an arbitrary position ``p``."""
    lam = lambda_vectors(q_rx, p, geometry, alphas, N)
    scale = 2.0 * eta_L / sigma_q_sq
    s_vec = np.asarray(S, complex).reshape(-1, order="F")
    return _assemble_fim(lam, fim_pairs(geometry.Q), chi_dimension(geometry.Q), s_vec, scale)


def crb_trace_worst(
    S: np.ndarray,
    q_rx: int,
    geometry: Geometry,
    alphas: np.ndarray,
    box: UncertaintyBox,
    grid_n: int = 11,
    eta_L: float = 1.0,
    sigma_q_sq: float = 1.0,
    N: Optional[int] = None,
) -> float:
    """Worst-case CRB trace over a grid of the uncertainty box.

    Audit-only: recomputes the exact FIM at every grid offset (no expansion)
    and returns the maximum trace; a singular FIM anywhere reports +inf.
    """
    if grid_n < 2:
        raise ValueError("need at least a 2-point grid per axis")
    if N is None:
        N = np.asarray(S).shape[0] // geometry.Q
    worst = -np.inf
    for dp in box.grid(grid_n):
        p = geometry.ehr_estimate + dp
        F = fim_at(q_rx, p, S, geometry, alphas, N, eta_L, sigma_q_sq)
        try:
            worst = max(worst, crb_from_fim(F).trace)
        except SingularFimError:
            return math.inf
    return worst


# --------------------------------------------------------------------------
# Energy-harvesting channel (deterministic line-of-sight array response)
# --------------------------------------------------------------------------

def eh_channel(p, geometry: Geometry, cfg: SystemConfig) -> np.ndarray:
    """Stacked AP-to-EHR power-transfer channel at position ``p`` (length NQ).

    Per-AP blocks are the array response scaled by the square root of the
    distance power-law gain of the harvesting link; no small-scale fading.
    """
    N = cfg.N
    blocks = []
    for r in geometry.ap_positions:
        d = float(np.hypot(*(np.asarray(r) - np.asarray(p))))
        if d == 0.0:
            raise ValueError("EHR position coincides with an AP")
        blocks.append(math.sqrt(cfg.pathgain_eh(d)) * steering(p, r, N))
    return np.concatenate(blocks)


def eh_channel_jacobian(p, geometry: Geometry, cfg: SystemConfig) -> np.ndarray:
    """(NQ, 2) derivative of :func:`eh_channel` w.r.t. the two coordinates."""
    N = cfg.N
    kappa = cfg.pathloss_exp_eh
    cols = [[], []]
    p = np.asarray(p, float)
    for r in geometry.ap_positions:
        u = np.asarray(r, float) - p
        d = float(np.hypot(u[0], u[1]))
        if d == 0.0:
            raise ValueError("EHR position coincides with an AP")
        amp = math.sqrt(cfg.pathgain_ref) * d ** (-kappa / 2.0)
        # d(amp)/dp_i = amp * (kappa/2) * u_i / d^2
        damp = amp * (kappa / 2.0) * u / d**2
        a = steering(p, r, N)
        for ax in (1, 2):
            da = steering_derivative(p, r, N, ax)
            cols[ax - 1].append(damp[ax - 1] * a + amp * da)
    return np.column_stack([np.concatenate(cols[0]), np.concatenate(cols[1])])


# --------------------------------------------------------------------------
# Post-solution numeric metrics
# --------------------------------------------------------------------------

def received_power(S: np.ndarray, h_masked: np.ndarray) -> float:
    """RF power collected from covariance S through an (already masked) channel."""
    return float(np.real(h_masked.conj() @ np.asarray(S, complex) @ h_masked))


def sinr_value(
    k: int,
    W_list: Sequence[np.ndarray],
    R: np.ndarray,
    h_stacked: np.ndarray,
    mask: np.ndarray,
    sigma_sq: float,
) -> float:
    """Downlink SINR of CU k for lifted beam covariances and radar covariance."""
    h_eff = mask * h_stacked
    desired = float(np.real(h_eff.conj() @ W_list[k] @ h_eff))
    interference = float(np.real(h_eff.conj() @ R @ h_eff))
    for kp, W in enumerate(W_list):
        if kp != k:
            interference += float(np.real(h_eff.conj() @ W @ h_eff))
    return desired / (interference + sigma_sq)
