"""Scenario layer: config parsing, EH circuit, geometry, channel statistics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from swiptsense.scenario import (
    ConfigError,
    EhModelParams,
    SystemConfig,
    UncertaintyBox,
    cos_theta,
    eh_harvested_power,
    eh_required_input,
    make_scenario,
    parse_config_text,
    sample_scenario,
)

EH = EhModelParams()  # a=7400, b=1e-4, P_sat=3e-4


# --------------------------------------------------------------------------
# Config
# --------------------------------------------------------------------------

def test_empty_config_gives_reference_defaults():
    cfg = parse_config_text("")
    assert cfg.Q == 3 and cfg.K == 5 and cfg.N == 6 and cfg.L == 1024
    assert cfg.eta0 == 0.1 and cfg.delta_eta == 0.1
    assert cfg.P_max == 3.0
    assert cfg.Gamma_k == pytest.approx(10 ** 1.2)
    assert cfg.P_req == pytest.approx(0.08e-3)
    assert cfg.sigma_k_sq == pytest.approx(1e-9)
    assert cfg.sigma_r_sq == pytest.approx(1e-9)
    assert cfg.psi == 1.2
    assert cfg.eps1 == 1e-3 and cfg.eps2 == 1e-3
    assert cfg.eh.a == 7400.0 and cfg.eh.b == 1e-4 and cfg.eh.P_sat == 3e-4


def test_config_parses_documented_keys_and_converts_units():
    cfg = parse_config_text(
        """
        # desk instance
        Q = 3
        N = 6
        Gamma_dB = 12
        P_max_W = 3
        sigma_k_dBm = -60
        P_req_mW = 0.08
        """
    )
    assert cfg.N == 6
    assert cfg.Gamma_k == pytest.approx(10 ** 1.2)
    assert cfg.sigma_k_sq == pytest.approx(1e-9)
    assert cfg.P_req == pytest.approx(8e-5)


def test_config_rejects_odd_antenna_count():
    with pytest.raises(ConfigError, match="even"):
        parse_config_text("N = 5")


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("bogus_key = 1", "unknown"),
        ("Q = banana", "bad value"),
        ("Q = 1", "two APs"),
        ("eta0 = 0", "time-splitting"),
        ("eta0 = 0.95\ndelta_eta = 0.1", "time-splitting"),
        ("Gamma_dB = 12\nGamma_dB = 10", "duplicate"),
        ("P_max_W = -1", "nonnegative"),
    ],
)
def test_config_rejections_are_descriptive(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config_text(text)


def test_eta_grid_and_slot_rounding():
    cfg = parse_config_text("L = 256")
    grid = cfg.eta_grid
    assert len(grid) == math.floor((1 - 0.1) / 0.1) + 1 == 10
    assert grid[0] == pytest.approx(0.1) and grid[-1] == pytest.approx(1.0)
    # eta*L rounds to the nearest slot, one slot minimum per phase
    assert cfg.sensing_slots(0.5) == 128
    assert cfg.sensing_slots(1e-6) == 1
    assert cfg.sensing_slots(1.0) == 255


# --------------------------------------------------------------------------
# EH circuit
# --------------------------------------------------------------------------

def test_eh_zero_input_harvests_exactly_zero():
    assert eh_harvested_power(0.0, EH) == 0.0


def test_eh_value_at_circuit_midpoint():
    # Independent high-precision evaluation: at p_in = b the logistic equals
    # P_sat/2, so the output is P_sat*(1/2 - Xi)/(1 - Xi) with Xi = 1/(1+e^0.74).
    xi = 1.0 / (1.0 + math.exp(0.74))
    expected = 3e-4 * (0.5 - xi) / (1.0 - xi)
    got = eh_harvested_power(1e-4, EH)
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(7.84e-5, rel=1e-2)


def test_eh_saturates():
    assert eh_harvested_power(0.01, EH) == pytest.approx(EH.P_sat, rel=1e-9)


def test_eh_required_input_matches_root_finding_oracle():
    # Brent root-finder on the forward curve, independent of the closed form.
    for target in (0.0, 1e-5, 7.84e-5, 2.9e-4):
        oracle = brentq(
            lambda x: eh_harvested_power(x, EH) - target, 0.0, 1.0, xtol=1e-15, rtol=1e-14
        )
        assert eh_required_input(target, EH) == pytest.approx(oracle, abs=1e-11)


def test_eh_required_input_zero_matches_closed_form_threshold():
    xi = EH.Xi
    expected = EH.b - math.log((1 - xi) / xi) / EH.a
    assert eh_required_input(0.0, EH) == pytest.approx(expected, rel=1e-12)
    assert abs(expected) < 2e-4  # near-zero threshold


def test_eh_saturation_target_rejected():
    with pytest.raises(ValueError, match="unattainable"):
        eh_required_input(EH.P_sat, EH)


@given(st.floats(min_value=1e-6, max_value=5e-3))
@settings(max_examples=60, deadline=None)
def test_eh_round_trip_identity(p_in):
    # Deep in saturation the curve is flat to below float resolution, so the
    # inverse cannot recover the input there; restrict to the invertible knee.
    p_eh = eh_harvested_power(p_in, EH)
    if p_eh <= 0 or p_eh >= EH.P_sat * (1 - 1e-7):
        return
    back = eh_required_input(p_eh, EH)
    assert back == pytest.approx(p_in, rel=1e-10)


def test_eh_round_trip_at_reference_point():
    p_eh = eh_harvested_power(2e-4, EH)
    assert eh_required_input(p_eh, EH) == pytest.approx(2e-4, rel=1e-10)


@given(st.floats(min_value=0, max_value=1e-2), st.floats(min_value=0, max_value=1e-4))
@settings(max_examples=60, deadline=None)
def test_eh_monotone_and_bounded(p, dp):
    lo = eh_harvested_power(p, EH)
    hi = eh_harvested_power(p + dp, EH)
    assert hi >= lo - 1e-15
    # mathematically < P_sat; saturation rounds to P_sat in float64
    assert 0.0 <= lo <= EH.P_sat


# --------------------------------------------------------------------------
# Direction cosine
# --------------------------------------------------------------------------

def test_cos_theta_reference_value():
    # AP at [-15, 15] seen from the origin: (r1 - p1)/||r - p|| = -15/(15*sqrt(2))
    assert cos_theta([0.0, 0.0], [-15.0, 15.0]) == pytest.approx(-1 / math.sqrt(2))


def test_cos_theta_vertical_alignment_is_zero():
    assert cos_theta([3.0, 0.0], [3.0, 10.0]) == 0.0


def test_cos_theta_coincident_raises():
    with pytest.raises(ValueError):
        cos_theta([1.0, 2.0], [1.0, 2.0])


@given(
    st.floats(-50, 50), st.floats(-50, 50),
    st.floats(-50, 50), st.floats(-50, 50),
)
@settings(max_examples=100, deadline=None)
def test_cos_theta_in_range(p1, p2, r1, r2):
    if (p1, p2) == (r1, r2):
        return
    c = cos_theta([p1, p2], [r1, r2])
    assert -1.0 <= c <= 1.0


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------

def test_three_ap_reference_layout():
    cfg = SystemConfig()
    geom, _ = sample_scenario(cfg, 0)
    np.testing.assert_allclose(
        geom.ap_positions, [[-15.0, 15.0], [15.0, 15.0], [0.0, -15.0]]
    )


def test_sampling_is_deterministic():
    cfg = SystemConfig(K=2, N=4)
    g1, c1 = sample_scenario(cfg, 17)
    g2, c2 = sample_scenario(cfg, 17)
    np.testing.assert_array_equal(g1.cu_positions, g2.cu_positions)
    np.testing.assert_array_equal(g1.ehr_estimate, g2.ehr_estimate)
    np.testing.assert_array_equal(c1.h, c2.h)
    g3, c3 = sample_scenario(cfg, 18)
    assert not np.array_equal(c1.h, c3.h)


def test_channel_mean_power_matches_pathloss_model():
    # 1e4 fading draws at a fixed 1 m distance must average to -40 dB per antenna.
    cfg = SystemConfig(K=1, N=4)
    gains = []
    for seed in range(2500):  # 2500 seeds x 4 antennas = 1e4 complex draws
        _, ch = sample_scenario(cfg, seed)
        geom, _ = sample_scenario(cfg, seed)
        d = np.hypot(*(geom.ap_positions[0] - geom.cu_positions[0]))
        g_model = cfg.pathgain_cu(d)
        gains.append(np.mean(np.abs(ch.h[0, 0]) ** 2) / g_model)
    assert np.mean(gains) == pytest.approx(1.0, rel=0.05)


def test_stacked_channel_is_block_concatenation():
    cfg = SystemConfig(K=2, N=4)
    _, ch = sample_scenario(cfg, 3)
    stacked = ch.stacked(1)
    assert stacked.shape == (cfg.N * cfg.Q,)
    np.testing.assert_array_equal(stacked[cfg.N:2 * cfg.N], ch.h[1, 1])
    np.testing.assert_array_equal(ch.stacked_all()[1], stacked)


def test_make_scenario_rcs_matrix():
    cfg = SystemConfig(K=2, N=4)
    sc = make_scenario(cfg, 5)
    assert sc.alphas.shape == (3, 3)
    assert np.all(np.diag(sc.alphas) == 0)
    off = sc.alphas[~np.eye(3, dtype=bool)]
    assert np.all(np.abs(off) > 0)
    sc_unit = make_scenario(
        SystemConfig(K=2, N=4, rcs_model="unit"), 5
    )
    off_u = sc_unit.alphas[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(np.abs(off_u), 1.0)


def test_uncertainty_box_grid_and_radius():
    box = UncertaintyBox(1.0, 0.5)
    g = box.grid(3)
    assert g.shape == (9, 2)
    assert g[:, 0].min() == -1.0 and g[:, 0].max() == 1.0
    assert g[:, 1].min() == -0.5 and g[:, 1].max() == 0.5
    assert box.radius == pytest.approx(math.hypot(1.0, 0.5))
    with pytest.raises(ValueError):
        UncertaintyBox(-0.1, 0.0)
