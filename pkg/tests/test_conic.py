"""Conic program wrapper, embedding, and rank-one recovery."""

import cvxpy as cp
import numpy as np
import pytest

from swiptsense.conic import (
    ConicProgram,
    ReconstructionError,
    SolverCapabilityError,
    complex_to_real_embedding,
    rank_one_reconstruct,
    rank_ratio,
    register_solver,
    registered_solvers,
    _SOLVERS,
)
from swiptsense.robust import trace_inverse_epigraph

RNG = np.random.default_rng(77)


def rand_hermitian(n, rng=RNG):
    B = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return 0.5 * (B + B.conj().T)


def rand_psd(n, rng=RNG):
    B = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return B @ B.conj().T


# --------------------------------------------------------------------------
# solve()
# --------------------------------------------------------------------------

def test_identity_epigraph_solves_to_two():
    prog = ConicProgram("epi")
    J = prog.variable("J", (2, 2), symmetric=True)
    V, block = trace_inverse_epigraph(J)
    prog.add(block.constraint(), "epi")
    prog.add(J == np.eye(2), "fix")
    prog.minimize(cp.trace(V))
    out = prog.solve()
    assert out.optimal
    assert out.objective == pytest.approx(2.0, abs=1e-6)


def test_exp_cone_hand_solution():
    prog = ConicProgram("exp")
    x = prog.variable("x")
    t = prog.variable("t")
    prog.add(cp.exp(x) <= t, "cone")
    prog.add(t <= np.e, "cap")
    prog.maximize(x)
    out = prog.solve()
    assert out.optimal
    assert out.objective == pytest.approx(1.0, abs=1e-6)


def test_infeasible_status():
    prog = ConicProgram("bad")
    x = prog.variable("x")
    prog.add(x >= 1)
    prog.add(x <= 0)
    prog.minimize(x)
    assert prog.solve().status == "infeasible"


def test_solver_capability_error_is_raised_not_relaxed():
    register_solver("PSDONLY", ["lin", "psd"])
    try:
        prog = ConicProgram("needs-exp")
        x = prog.variable("x")
        t = prog.variable("t")
        prog.add(cp.exp(x) <= t)
        prog.minimize(t)
        with pytest.raises(SolverCapabilityError, match="exp"):
            prog.solve(solver="PSDONLY")
    finally:
        _SOLVERS.pop("PSDONLY", None)


def test_solver_registry_roundtrip():
    caps = registered_solvers()
    assert "CLARABEL" in caps and "psd" in caps["CLARABEL"]


def test_outcome_determinism():
    def run():
        prog = ConicProgram("det")
        J = prog.variable("J", (2, 2), symmetric=True)
        V, block = trace_inverse_epigraph(J)
        prog.add(block.constraint())
        prog.add(J == np.diag([2.0, 4.0]))
        prog.minimize(cp.trace(V))
        return prog.solve()

    a, b = run(), run()
    assert a.objective == b.objective  # bit-identical back-end run
    assert a.objective == pytest.approx(0.75, abs=1e-7)
    np.testing.assert_array_equal(a.assignments["J"], b.assignments["J"])


def test_dump_is_self_describing():
    prog = ConicProgram("dumpme")
    W = prog.variable("W", (3, 3), hermitian=True)
    x = prog.variable("x", nonneg=True)
    prog.add(W >> 0, "psdW")
    prog.add(cp.real(cp.trace(W)) + x <= 5, "powercap")
    prog.minimize(x)
    text = prog.dump()
    assert "conic-program dumpme" in text
    assert "W shape=(3, 3) hermitian" in text
    assert "PSD dim=3" in text and "hermitian" in text
    assert "sense minimize" in text
    assert "'psd'" in text


# --------------------------------------------------------------------------
# complex_to_real_embedding
# --------------------------------------------------------------------------

def test_embedding_identity():
    np.testing.assert_array_equal(complex_to_real_embedding(np.eye(2)), np.eye(4))


def test_embedding_hand_eigenvalues():
    H = np.array([[0.0, 1j], [-1j, 0.0]])  # eigenvalues +/-1
    M = complex_to_real_embedding(H)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(M)), [-1, -1, 1, 1], atol=1e-12)


def test_embedding_trace_doubles():
    H = rand_psd(4)
    M = complex_to_real_embedding(H)
    assert np.trace(M) == pytest.approx(2 * np.real(np.trace(H)), rel=1e-12)


def test_embedding_rejects_non_hermitian():
    with pytest.raises(ValueError, match="Hermitian"):
        complex_to_real_embedding(np.array([[0.0, 1.0], [2.0, 0.0]]))


def test_embedding_min_eig_sign_agreement_100_randoms():
    rng = np.random.default_rng(123)
    for _ in range(100):
        H = rand_hermitian(5, rng)
        m_c = np.linalg.eigvalsh(H).min()
        m_r = np.linalg.eigvalsh(complex_to_real_embedding(H)).min()
        assert m_c == pytest.approx(m_r, abs=1e-10)


# --------------------------------------------------------------------------
# rank-one recovery
# --------------------------------------------------------------------------

def _instance(Q=2, N=3, K=2, seed=5):
    rng = np.random.default_rng(seed)
    n = N * Q
    mask = np.ones(n)
    mask[:N] = 0.0  # first AP receives
    h = [rng.standard_normal(n) + 1j * rng.standard_normal(n) for _ in range(K)]
    W = [rand_psd(n, rng) for _ in range(K)]
    R = rand_psd(n, rng)
    return mask, h, W, R


def test_rank_one_input_is_fixed_point():
    mask, h, _, R = _instance()
    w = np.array([1.0 + 1j, 0.5, -2.0, 1j, 0.2, 1.0 - 0.5j])
    W = [np.outer(w, w.conj())]
    Wt, Rt = rank_one_reconstruct(W, R, h[:1], mask)
    np.testing.assert_allclose(Wt[0], W[0], rtol=1e-10, atol=1e-12)


def test_reconstruction_preserves_channel_power_and_trace():
    mask, h, W, R = _instance()
    Wt, Rt = rank_one_reconstruct(W, R, h, mask)
    for k in range(2):
        he = mask * h[k]
        orig = np.real(he.conj() @ W[k] @ he)
        new = np.real(he.conj() @ Wt[k] @ he)
        assert new == pytest.approx(orig, rel=1e-10)
    lhs = np.trace(sum(Wt) + Rt)
    rhs = np.trace(sum(W) + R)
    assert np.real(lhs) == pytest.approx(np.real(rhs), rel=1e-10)
    np.testing.assert_allclose(sum(Wt) + Rt, sum(W) + R, atol=1e-9 * abs(rhs))


def test_reconstruction_gives_rank_one_and_psd_residual():
    mask, h, W, R = _instance(seed=9)
    Wt, Rt = rank_one_reconstruct(W, R, h, mask)
    for Wk in Wt:
        assert rank_ratio(Wk) >= 1 - 1e-8
    assert np.linalg.eigvalsh(Rt).min() >= -1e-8 * np.real(np.trace(Rt))


def test_reconstruction_zero_channel_power_raises():
    mask, h, W, R = _instance()
    dead = [np.zeros_like(h[0])]
    with pytest.raises(ReconstructionError, match="channel power"):
        rank_one_reconstruct(W[:1], R, dead, mask)


def test_rank_ratio_values():
    w = np.array([1.0, 2.0, 3.0 + 1j])
    assert rank_ratio(np.outer(w, w.conj())) == pytest.approx(1.0, rel=1e-12)
    assert rank_ratio(np.eye(4)) == pytest.approx(0.25, rel=1e-12)
    with pytest.raises(ValueError):
        rank_ratio(np.zeros((3, 3)))
