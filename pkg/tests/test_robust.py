"""Constraint factories: certificate soundness by direct grid evaluation."""

import cvxpy as cp
import numpy as np
import pytest

from swiptsense.conic import ConicProgram
from swiptsense.robust import (
    bigM_family,
    exp_cone_eh_constraint,
    petersen_arrow_reduction,
    petersen_lmi,
    s_procedure_lmi,
    schur_embed_crb,
    trace_inverse_epigraph,
    varpi_update,
)
from swiptsense.scenario import EhModelParams, UncertaintyBox, eh_harvested_power

RNG = np.random.default_rng(31)
EH = EhModelParams()


def rand_spd(n, rng=RNG, scale=1.0):
    B = rng.standard_normal((n, n))
    return scale * (B @ B.T + n * np.eye(n))


# --------------------------------------------------------------------------
# trace-inverse epigraph
# --------------------------------------------------------------------------

def test_epigraph_closed_form_value():
    prog = ConicProgram()
    J = prog.variable("J", (2, 2), symmetric=True)
    V, blk = trace_inverse_epigraph(J)
    prog.add(blk.constraint())
    prog.add(J == np.diag([2.0, 4.0]))
    prog.minimize(cp.trace(V))
    out = prog.solve()
    assert out.objective == pytest.approx(0.75, abs=1e-7)
    # at the optimum the block sits on the PSD boundary with V = J^-1
    Vv = V.value
    np.testing.assert_allclose(Vv, np.diag([0.5, 0.25]), atol=1e-5)
    block_val = np.block([[Vv, np.eye(2)], [np.eye(2), np.diag([2.0, 4.0])]])
    assert abs(np.linalg.eigvalsh(block_val).min()) < 1e-5


# --------------------------------------------------------------------------
# Schur embedding
# --------------------------------------------------------------------------

def test_schur_embedding_boundary_at_exact_complement():
    rng = np.random.default_rng(8)
    F = rand_spd(6, rng)
    J_star = F[:2, :2] - F[:2, 2:] @ np.linalg.solve(F[2:, 2:], F[2:, :2])
    blk = schur_embed_crb(J_star, F)
    eigs = np.linalg.eigvalsh(blk.value())
    assert eigs.min() == pytest.approx(0.0, abs=1e-9 * abs(eigs).max())


def test_schur_embedding_zero_j_holds_and_overshoot_fails():
    rng = np.random.default_rng(9)
    F = rand_spd(6, rng)
    assert np.linalg.eigvalsh(schur_embed_crb(np.zeros((2, 2)), F).value()).min() >= -1e-12
    J_star = F[:2, :2] - F[:2, 2:] @ np.linalg.solve(F[2:, 2:], F[2:, :2])
    too_big = J_star + 0.1 * np.trace(J_star) * np.eye(2)
    assert np.linalg.eigvalsh(schur_embed_crb(too_big, F).value()).min() < 0


# --------------------------------------------------------------------------
# sign-definiteness certificate
# --------------------------------------------------------------------------

def test_petersen_scalar_case_matches_hand_block():
    blk = petersen_lmi(
        np.array([[2.0]]),
        [np.array([[1.0]])],
        [np.array([[1.0]])],
        [1.0],
        [1.0],
    )
    np.testing.assert_allclose(blk.value(), [[1.0, -1.0], [-1.0, 1.0]])
    assert np.linalg.eigvalsh(blk.value()).min() >= -1e-12
    # grid over |x| <= 1 confirms the certified semi-infinite inequality
    for x in np.linspace(-1, 1, 41):
        assert 2.0 - 2.0 * x >= -1e-12


def test_petersen_zero_uncertainty_reduces_to_m():
    M = rand_spd(3)
    blk = petersen_lmi(
        M,
        [np.zeros((4, 3)), np.zeros((4, 3))],
        [np.eye(3)[:1], np.eye(3)[1:2]],
        [0.0, 0.0],
        [0.0, 0.0],
    )
    np.testing.assert_allclose(blk.value()[:3, :3], M)
    assert np.linalg.eigvalsh(blk.value()).min() >= -1e-12


def test_petersen_below_worst_case_has_no_multiplier():
    # scalar instance M = 1.9 < worst case 2: feasibility sweep over eps fails
    feasible = []
    for eps in np.linspace(0.0, 5.0, 2001):
        B = np.array([[1.9 - eps, -1.0], [-1.0, eps]])
        feasible.append(np.linalg.eigvalsh(B).min() >= -1e-12)
    assert not any(feasible)


def test_petersen_certificate_implies_grid_psd():
    # Feasible multipliers certify the perturbed inequality on sampled
    # perturbations of bounded norm (soundness direction of the lemma).
    rng = np.random.default_rng(10)
    d, m = 4, 3
    u1, u2 = rng.standard_normal(m), rng.standard_normal(m)
    P1 = np.outer(u1, np.eye(d)[0])
    P2 = np.outer(u2, np.eye(d)[2])
    q1 = np.eye(d)[1:2] * -1.0
    q2 = np.eye(d)[3:4] * -0.5
    rho = [0.4, 0.7]

    prog = ConicProgram()
    eps = [prog.variable("e1", nonneg=True), prog.variable("e2", nonneg=True)]
    t = prog.variable("t")
    M_expr = t * np.eye(d)
    blk = petersen_lmi(M_expr, [P1, P2], [q1, q2], rho, eps)
    prog.add(blk.constraint())
    prog.minimize(t)
    out = prog.solve()
    assert out.optimal
    t_star = out.objective
    M = t_star * np.eye(d)
    for _ in range(1000):
        x1 = rng.standard_normal(m)
        x1 *= rho[0] * rng.uniform() / np.linalg.norm(x1)
        x2 = rng.standard_normal(m)
        x2 *= rho[1] * rng.uniform() / np.linalg.norm(x2)
        rhs = (P1.T @ np.outer(x1, 1) @ q1 + q1.T @ np.outer(x1, 1).T @ P1
               + P2.T @ np.outer(x2, 1) @ q2 + q2.T @ np.outer(x2, 1).T @ P2)
        assert np.linalg.eigvalsh(M - rhs).min() >= -1e-7 * max(1.0, abs(t_star))


def test_arrow_reduction_matches_verbatim_optimum():
    # minimal PSD shift t such that M + t I admits a certificate: identical
    # through the literal block and through the clique/rank-one reduction.
    rng = np.random.default_rng(20)
    d = 4
    M = rand_spd(d, rng) - 6.0 * np.eye(d)
    terms = []
    for load, m in [(0, 5), (2, 6), (1, 4)]:
        u = rng.standard_normal(m)
        q = np.zeros((1, d))
        q[0, rng.integers(d)] = -1.0
        terms.append((load, u, q))

    def solve_verbatim():
        prog = ConicProgram()
        t = prog.variable("t")
        eps = [prog.variable(f"e{i}", nonneg=True) for i in range(len(terms))]
        P_list = [np.outer(u, np.eye(d)[load]) for load, u, _ in terms]
        blk = petersen_lmi(M + t * np.eye(d), P_list, [q for _, _, q in terms],
                           [1.0] * len(terms), eps)
        prog.add(blk.constraint())
        prog.minimize(t)
        return prog.solve().objective

    def solve_reduced():
        prog = ConicProgram()
        t = prog.variable("t")
        eps = [prog.variable(f"e{i}", nonneg=True) for i in range(len(terms))]
        tau = [prog.variable(f"tau{i}", nonneg=True) for i in range(len(terms))]
        head, socs = petersen_arrow_reduction(
            M + t * np.eye(d),
            [load for load, _, _ in terms],
            [u for _, u, _ in terms],
            [q for _, _, q in terms],
            eps, tau,
        )
        prog.add(head.constraint())
        prog.add(socs)
        prog.minimize(t)
        return prog.solve().objective

    tv, tr = solve_verbatim(), solve_reduced()
    assert tv == pytest.approx(tr, abs=1e-6)


def test_emitted_blocks_are_affine():
    # two-point affinity check on the certificate head
    d = 3
    x = cp.Variable()
    M_expr = x * rand_spd(d)
    eps = [cp.Variable(nonneg=True)]
    tau = [cp.Variable(nonneg=True)]
    head, _ = petersen_arrow_reduction(M_expr, [1], [np.ones(4)], [np.eye(d)[:1]], eps, tau)

    def value_at(xv, ev, tv):
        x.value, eps[0].value, tau[0].value = xv, ev, tv
        return head.expr.value

    b0 = value_at(0.0, 0.0, 0.0)
    b1 = value_at(1.3, 0.4, 0.2)
    b2 = value_at(-0.7, 1.1, 0.9)
    b12 = value_at(1.3 - 0.7, 0.4 + 1.1, 0.2 + 0.9)
    np.testing.assert_allclose(b12 - b0, (b1 - b0) + (b2 - b0), atol=1e-10)


# --------------------------------------------------------------------------
# S-procedure certificate
# --------------------------------------------------------------------------

def _sproc_instance(seed=3, n=6):
    rng = np.random.default_rng(seed)
    E = rng.standard_normal((n, 2)) + 1j * rng.standard_normal((n, 2))
    h = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    B = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    S = B @ B.conj().T / n
    return E, h, S


def _sproc_feasible(E, h, S, box, p_in):
    prog = ConicProgram()
    kappa = prog.variable("kappa", nonneg=True)
    blk = s_procedure_lmi(S, E, h, box, kappa, p_in)
    prog.add(blk.constraint())
    prog.minimize(kappa)
    return prog.solve().optimal


def test_s_procedure_zero_radius_reduces_to_nominal_power():
    E, h, S = _sproc_instance()
    nominal = float(np.real(h.conj() @ S @ h))
    box0 = UncertaintyBox(0.0, 0.0)
    assert _sproc_feasible(E, h, S, box0, nominal * 0.999)
    assert not _sproc_feasible(E, h, S, box0, nominal * 1.001)


def test_s_procedure_block_is_three_by_three():
    E, h, S = _sproc_instance()
    kappa = cp.Variable(nonneg=True)
    blk = s_procedure_lmi(S, E, h, UncertaintyBox(0.2, 0.3), kappa, 0.1)
    assert blk.expr.shape == (3, 3)


def test_s_procedure_trivial_psd_case():
    E, h, S = _sproc_instance()
    kappa = cp.Variable(nonneg=True)
    kappa.value = 0.0
    blk = s_procedure_lmi(S, E, h, UncertaintyBox(0.5, 0.5), kappa, 0.0)
    assert np.linalg.eigvalsh(blk.expr.value).min() >= -1e-10


def test_s_procedure_certificate_implies_grid_power_floor():
    # Certified floor holds for the linearized channel at sampled offsets
    # within the circumscribed ball.
    E, h, S = _sproc_instance(seed=4)
    box = UncertaintyBox(0.08, 0.06)
    prog = ConicProgram()
    kappa = prog.variable("kappa", nonneg=True)
    p_in = prog.variable("p_in")
    blk = s_procedure_lmi(S, E, h, box, kappa, p_in)
    prog.add(blk.constraint())
    prog.maximize(p_in)
    out = prog.solve()
    assert out.optimal
    certified = out.objective
    rng = np.random.default_rng(5)
    r = box.radius
    for _ in range(500):
        dp = rng.standard_normal(2)
        dp *= r * rng.uniform() / np.linalg.norm(dp)
        h_shift = h + E @ dp
        power = float(np.real(h_shift.conj() @ S @ h_shift))
        assert power >= certified - 1e-7 * max(1.0, abs(certified))


def test_scalar_s_procedure_implication():
    # |t|^2 - 1 <= 0 implies |t|^2 - c <= 0 certified iff c >= 1 (kappa = 1)
    for c, feasible in ((1.1, True), (0.9, False)):
        kappa = cp.Variable(nonneg=True)
        block = cp.bmat([
            [cp.reshape(kappa - 1.0, (1, 1), order="F"), np.zeros((1, 1))],
            [np.zeros((1, 1)), cp.reshape(c - kappa, (1, 1), order="F")],
        ])
        prob = cp.Problem(cp.Minimize(0), [block >> 0])
        prob.solve(solver=cp.CLARABEL)
        assert (prob.status == "optimal") == feasible


# --------------------------------------------------------------------------
# big-M lifting
# --------------------------------------------------------------------------

def _bigm_feasible_lifted(a_val, W, cap, target):
    n = W.shape[0]
    prog = ConicProgram()
    Wbar = prog.variable("Wbar", (n, n), hermitian=True)
    fam = bigM_family(Wbar, W, a_val, cap)
    prog.add(fam.constraints())
    prog.minimize(cp.norm(Wbar - target, "fro"))
    return prog.solve()


def test_bigm_pinches_to_base_at_one():
    rng = np.random.default_rng(6)
    B = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    W = B @ B.conj().T
    cap = 2 * float(np.real(np.trace(W)))
    out = _bigm_feasible_lifted(1.0, W, cap, np.zeros((3, 3)))
    # family forces lifted == W: distance to 0 equals ||W||_F
    assert out.objective == pytest.approx(np.linalg.norm(W, "fro"), rel=1e-5)


def test_bigm_pinches_to_zero_at_zero():
    rng = np.random.default_rng(7)
    B = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    W = B @ B.conj().T
    cap = 2 * float(np.real(np.trace(W)))
    out = _bigm_feasible_lifted(0.0, W, cap, W)
    assert out.objective == pytest.approx(np.linalg.norm(W, "fro"), rel=1e-5)


def test_bigm_fractional_envelope_contains_half_base():
    rng = np.random.default_rng(8)
    B = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    W = B @ B.conj().T
    cap = 2 * float(np.real(np.trace(W)))
    out = _bigm_feasible_lifted(0.5, W, cap, 0.5 * W)
    assert out.objective == pytest.approx(0.0, abs=1e-5 * np.linalg.norm(W, "fro"))


def test_bigm_rejects_nonpositive_cap():
    with pytest.raises(ValueError, match="cap"):
        bigM_family(cp.Variable((2, 2), symmetric=True), np.eye(2), 1.0, 0.0)


# --------------------------------------------------------------------------
# exponential-cone harvesting constraint
# --------------------------------------------------------------------------

def _max_certified_harvest(p_in_fixed, varpi):
    prog = ConicProgram()
    p_eh = prog.variable("p_eh", nonneg=True)
    cons = exp_cone_eh_constraint(p_in_fixed, p_eh, varpi, EH)
    prog.add(cons)
    prog.maximize(p_eh)
    out = prog.solve(tol=1e-10)
    assert out.optimal
    return out.objective


def test_exp_cone_tight_at_matched_coefficient():
    for p_in in (5e-5, 1e-4, 2e-4):
        w = varpi_update(p_in, EH)
        certified = _max_certified_harvest(p_in, w)
        assert certified == pytest.approx(eh_harvested_power(p_in, EH), rel=1e-6)


def test_exp_cone_understates_off_coefficient():
    # the quadratic transform lower-bounds the true curve away from its
    # matched point, so certification is conservative, never optimistic
    p_in = 1.5e-4
    true = eh_harvested_power(p_in, EH)
    for w in (0.2, 0.5, 0.9):
        assert _max_certified_harvest(p_in, w) <= true + 1e-12


def test_exp_cone_saturation_limit():
    certified = _max_certified_harvest(0.1, 1.0)
    assert certified == pytest.approx(EH.P_sat, rel=1e-6)


def test_exp_cone_zero_harvest_feasible_for_any_input():
    # with the coefficient matched at zero input (w = Xi) the zero-harvest
    # point is certified for every nonnegative received power
    prog = ConicProgram()
    p_in = prog.variable("p_in", nonneg=True)
    cons = exp_cone_eh_constraint(p_in, 0.0, varpi_update(0.0, EH), EH)
    prog.add(cons)
    prog.minimize(p_in)
    out = prog.solve()
    assert out.optimal
    assert out.objective == pytest.approx(0.0, abs=1e-7)


def test_exp_cone_rejects_bad_coefficient():
    with pytest.raises(ValueError, match="quadratic-transform"):
        exp_cone_eh_constraint(cp.Variable(), cp.Variable(), 1.5, EH)
    with pytest.raises(ValueError, match="quadratic-transform"):
        exp_cone_eh_constraint(cp.Variable(), cp.Variable(), 0.0, EH)
