"""Physical setup for the two-phase SWIPT simulator.

Owns the system parameters (frame structure, QoS targets, noise levels,
energy-harvesting circuit), the network geometry, and seeded Monte-Carlo
instance generation.  All values are stored in linear SI units; dB/dBm/mW
conversions happen exactly once, when a config file is loaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

__all__ = [
    "ConfigError",
    "EhModelParams",
    "UncertaintyBox",
    "Geometry",
    "ChannelSet",
    "SystemConfig",
    "Scenario",
    "load_config",
    "parse_config_text",
    "sample_scenario",
    "make_scenario",
    "eh_harvested_power",
    "eh_required_input",
    "cos_theta",
]


class ConfigError(ValueError):
    """Raised when a config file cannot be parsed or violates an invariant."""


# --------------------------------------------------------------------------
# Energy harvesting circuit (nonlinear saturation model)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EhModelParams:
    """Constants of the nonlinear saturation harvesting circuit.

    ``a`` [1/W] and ``b`` [W] are circuit fit constants, ``P_sat`` [W] the
    saturation level.  ``Xi = 1/(1+exp(a*b))`` is the derived offset that
    makes the harvested power exactly zero at zero input.
    """

    a: float = 7400.0
    b: float = 1e-4
    P_sat: float = 3e-4

    def __post_init__(self):
        if self.a <= 0 or self.P_sat <= 0:
            raise ConfigError("EH circuit requires a > 0 and P_sat > 0")

    @property
    def Xi(self) -> float:
        return 1.0 / (1.0 + math.exp(self.a * self.b))


def eh_harvested_power(p_in: float, eh: EhModelParams) -> float:
    """Average harvested power [W] for received RF power ``p_in`` [W].

    Saturation-model transfer curve; the offset ``Xi`` is removed and the
    result rescaled so the output is exactly 0 at ``p_in = 0`` and
    approaches ``P_sat`` from below as ``p_in`` grows.
    """
    if p_in < 0:
        raise ValueError(f"received power must be nonnegative, got {p_in}")
    xi = eh.Xi

    def logistic(x):
        return eh.P_sat / (1.0 + math.exp(-eh.a * (x - eh.b)))

    # The offset is evaluated through the same expression as the curve so
    # the two cancel bit-exactly at zero input.
    return (logistic(p_in) - logistic(0.0)) / (1.0 - xi)


def eh_required_input(p_eh: float, eh: EhModelParams) -> float:
    """Inverse of :func:`eh_harvested_power`: input [W] that harvests ``p_eh``.

    Closed-form logistic inversion.  ``p_eh`` must lie in [0, P_sat);
    the saturation level itself is unattainable.
    """
    if p_eh < 0:
        raise ValueError(f"harvest target must be nonnegative, got {p_eh}")
    if p_eh >= eh.P_sat:
        raise ValueError(
            f"harvest target {p_eh} W is unattainable (saturation {eh.P_sat} W)"
        )
    xi = eh.Xi
    psi = p_eh * (1.0 - xi) + eh.P_sat * xi
    return eh.b - math.log(eh.P_sat / psi - 1.0) / eh.a


# --------------------------------------------------------------------------
# Geometry / uncertainty
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class UncertaintyBox:
    """Axis-aligned location-error bounds |dp_i| <= psi_i [m]."""

    psi1: float
    psi2: float

    def __post_init__(self):
        if self.psi1 < 0 or self.psi2 < 0:
            raise ValueError("uncertainty half-widths must be nonnegative")

    @property
    def radius(self) -> float:
        """Radius of the circumscribed ball used by the certificate LMIs."""
        return math.hypot(self.psi1, self.psi2)

    def grid(self, n: int = 11) -> np.ndarray:
        """(n*n, 2) array of offsets covering the box, corners included."""
        if n < 1:
            raise ValueError("grid resolution must be >= 1")
        g1 = np.linspace(-self.psi1, self.psi1, n) if n > 1 else np.array([0.0])
        g2 = np.linspace(-self.psi2, self.psi2, n) if n > 1 else np.array([0.0])
        d1, d2 = np.meshgrid(g1, g2, indexing="ij")
        return np.column_stack([d1.ravel(), d2.ravel()])


def cos_theta(p: np.ndarray, r_ap: np.ndarray) -> float:
    """Direction cosine of the target at ``p`` seen from the AP at ``r_ap``.

    Equals (r1 - p1)/||r - p||, the horizontal projection of the unit
    AP-to-target axis used by the array response.
    """
    p = np.asarray(p, dtype=float)
    r_ap = np.asarray(r_ap, dtype=float)
    d = float(np.hypot(r_ap[0] - p[0], r_ap[1] - p[1]))
    if d == 0.0:
        raise ValueError("target position coincides with the AP; angle undefined")
    return float((r_ap[0] - p[0]) / d)


@dataclass(frozen=True)
class Geometry:
    """AP/CU positions and the estimated EHR location (2-D Cartesian, m)."""

    ap_positions: np.ndarray   # (Q, 2)
    cu_positions: np.ndarray   # (K, 2)
    ehr_estimate: np.ndarray   # (2,)

    def __post_init__(self):
        object.__setattr__(self, "ap_positions", np.atleast_2d(np.asarray(self.ap_positions, float)))
        object.__setattr__(self, "cu_positions", np.atleast_2d(np.asarray(self.cu_positions, float)))
        object.__setattr__(self, "ehr_estimate", np.asarray(self.ehr_estimate, float).reshape(2))
        for r in self.ap_positions:
            if np.allclose(r, self.ehr_estimate):
                raise ValueError("EHR estimate coincides with an AP; steering angle undefined")

    @property
    def Q(self) -> int:
        return self.ap_positions.shape[0]

    @property
    def K(self) -> int:
        return self.cu_positions.shape[0]


@dataclass(frozen=True)
class ChannelSet:
    """Small-scale AP-to-CU channels plus the path-loss law they were drawn from.

    ``h`` has shape (Q, K, N): channel vector of AP q toward CU k.  The
    stacked per-CU vector concatenates per-AP blocks in AP index order.
    """

    h: np.ndarray              # (Q, K, N) complex
    pathloss_ref_db: float
    pathloss_exp_cu: float
    pathloss_exp_eh: float

    def stacked(self, k: int) -> np.ndarray:
        """Length-NQ channel of CU k, AP blocks concatenated in order."""
        return self.h[:, k, :].reshape(-1)

    def stacked_all(self) -> np.ndarray:
        """(K, NQ) matrix whose rows are the stacked per-CU channels."""
        Q, K, N = self.h.shape
        return self.h.transpose(1, 0, 2).reshape(K, Q * N)


# --------------------------------------------------------------------------
# System configuration
# --------------------------------------------------------------------------

def _db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def _dbm_to_watt(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) * 1e-3


@dataclass(frozen=True)
class SystemConfig:
    """Validated system parameters, all linear-scale SI.

    Defaults reproduce the reference simulation setup (paper scale:
    Q=3 APs with N=6 antennas, K=5 users, 1024-slot frames, 12 dB SINR
    floor, 0.08 mW harvest requirement, -60 dBm noise, 1.2 m initial
    uncertainty).
    """

    Q: int = 3
    K: int = 5
    N: int = 6
    L: int = 1024
    eta0: float = 0.1
    delta_eta: float = 0.1
    P_max: float = 3.0                 # W, per AP
    Gamma_k: float = _db_to_linear(12.0)   # linear SINR floor (identical CUs)
    P_req: float = 0.08e-3             # W
    sigma_k_sq: float = 1e-9           # W  (-60 dBm)
    sigma_r_sq: float = 1e-9           # W  (-60 dBm)
    psi: float = 1.2                   # m, per axis
    eps1: float = 1e-3
    eps2: float = 1e-3
    mu: Optional[float] = None         # penalty factor; None = auto-scaled
    seed: int = 0
    eh: EhModelParams = field(default_factory=EhModelParams)
    # propagation
    pathloss_ref_db: float = 40.0
    pathloss_exp_cu: float = 3.0
    pathloss_exp_eh: float = 2.0
    rcs_model: str = "two_hop"         # 'two_hop' | 'unit'
    rcs_scale: float = 1.0
    # deployment area half-widths [m]
    area_x: float = 20.0
    area_y: float = 15.0
    ehr_max_dist: Optional[float] = None   # cap on EHR-to-nearest-AP distance
    # numerics
    grid_n: int = 11
    max_iters: int = 50
    psi_plus_mode: str = "nominal"     # 'nominal' | 'worst'
    robust_model: str = "vertex"       # 'vertex' | 'ball'
    solver: str = "CLARABEL"

    def __post_init__(self):
        if self.Q < 2:
            raise ConfigError(f"need at least two APs, got Q={self.Q}")
        if self.N < 2 or self.N % 2 != 0:
            raise ConfigError(f"antenna count must be even and >= 2, got N={self.N}")
        if self.K < 1:
            raise ConfigError(f"need at least one CU, got K={self.K}")
        if self.L < 2:
            raise ConfigError(f"frame must have at least 2 slots, got L={self.L}")
        if not (0.0 < self.eta0 <= self.eta0 + self.delta_eta <= 1.0):
            raise ConfigError(
                f"time-splitting grid invalid: eta0={self.eta0}, delta_eta={self.delta_eta}"
            )
        for name in ("P_max", "P_req", "sigma_k_sq", "sigma_r_sq"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.Gamma_k <= 0:
            raise ConfigError("SINR floor must be positive")
        if self.psi < 0:
            raise ConfigError("initial uncertainty must be nonnegative")
        if self.eps1 <= 0 or self.eps2 <= 0:
            raise ConfigError("convergence tolerances must be positive")
        if self.rcs_model not in ("two_hop", "unit"):
            raise ConfigError(f"unknown rcs_model {self.rcs_model!r}")
        if self.psi_plus_mode not in ("nominal", "worst"):
            raise ConfigError(f"unknown psi_plus_mode {self.psi_plus_mode!r}")
        if self.robust_model not in ("vertex", "ball"):
            raise ConfigError(f"unknown robust_model {self.robust_model!r}")
        if self.grid_n < 2:
            raise ConfigError("grid_n must be >= 2")

    @property
    def eta_grid(self) -> np.ndarray:
        """Line-search set for the time-splitting ratio."""
        n = int(math.floor((1.0 - self.eta0) / self.delta_eta + 1e-12)) + 1
        return np.array([self.eta0 + d * self.delta_eta for d in range(n)])

    def sensing_slots(self, eta: float) -> int:
        """Slot count of the sensing phase: eta*L rounded, >= 1 per phase."""
        n = int(round(eta * self.L))
        return min(max(n, 1), self.L - 1)

    @property
    def pathgain_ref(self) -> float:
        return 10.0 ** (-self.pathloss_ref_db / 10.0)

    def pathgain_cu(self, dist: float) -> float:
        return self.pathgain_ref * dist ** (-self.pathloss_exp_cu)

    def pathgain_eh(self, dist: float) -> float:
        return self.pathgain_ref * dist ** (-self.pathloss_exp_eh)


# Config-file key table: {key: (attribute, converter)}.  Keys follow the
# reference parameter table names; unit suffixes make the expected scale
# explicit.  dB/dBm/mW keys are converted here, once.
_CONFIG_KEYS = {
    "Q": ("Q", int),
    "K": ("K", int),
    "N": ("N", int),
    "L": ("L", int),
    "eta0": ("eta0", float),
    "delta_eta": ("delta_eta", float),
    "P_max_W": ("P_max", float),
    "Gamma_dB": ("Gamma_k", lambda v: _db_to_linear(float(v))),
    "P_req_mW": ("P_req", lambda v: float(v) * 1e-3),
    "sigma_k_dBm": ("sigma_k_sq", lambda v: _dbm_to_watt(float(v))),
    "sigma_r_dBm": ("sigma_r_sq", lambda v: _dbm_to_watt(float(v))),
    "psi_m": ("psi", float),
    "eps1": ("eps1", float),
    "eps2": ("eps2", float),
    "mu": ("mu", lambda v: None if str(v).lower() in ("auto", "none") else float(v)),
    "seed": ("seed", int),
    "eh_a": ("eh_a", float),
    "eh_b_W": ("eh_b", float),
    "eh_P_sat_W": ("eh_P_sat", float),
    "pathloss_ref_dB": ("pathloss_ref_db", float),
    "pathloss_exp_cu": ("pathloss_exp_cu", float),
    "pathloss_exp_eh": ("pathloss_exp_eh", float),
    "rcs_model": ("rcs_model", str),
    "rcs_scale": ("rcs_scale", float),
    "area_x_m": ("area_x", float),
    "area_y_m": ("area_y", float),
    "ehr_max_dist_m": ("ehr_max_dist", lambda v: None if str(v).lower() == "none" else float(v)),
    "grid_n": ("grid_n", int),
    "max_iters": ("max_iters", int),
    "psi_plus_mode": ("psi_plus_mode", str),
    "robust_model": ("robust_model", str),
    "solver": ("solver", str),
}


def parse_config_text(text: str) -> SystemConfig:
    """Parse the flat ``key = value`` config format into a SystemConfig.

    Blank lines and '#' comments are ignored.  Unknown keys, duplicate
    keys, malformed values, and invariant violations raise ConfigError
    with the offending line.
    """
    values = {}
    eh_overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        attr, conv = _CONFIG_KEYS[key]
        if attr in values or attr in eh_overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            parsed = conv(val)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
        if attr.startswith("eh_"):
            eh_overrides[attr[3:]] = parsed
        else:
            values[attr] = parsed
    if eh_overrides:
        try:
            values["eh"] = replace(EhModelParams(), **eh_overrides)
        except ConfigError as exc:
            raise ConfigError(f"invalid EH circuit parameters: {exc}") from exc
    try:
        return SystemConfig(**values)
    except ConfigError:
        raise
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Union[str, Path]) -> SystemConfig:
    """Load and validate a config file; an empty file yields all defaults."""
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# Instance sampling
# --------------------------------------------------------------------------

# Reference three-AP deployment [m].
_THREE_AP_LAYOUT = np.array([[-15.0, 15.0], [15.0, 15.0], [0.0, -15.0]])


def default_ap_layout(Q: int) -> np.ndarray:
    """Fixed AP coordinates: the reference triangle for Q=3, else a ring."""
    if Q == 3:
        return _THREE_AP_LAYOUT.copy()
    angles = 2.0 * np.pi * np.arange(Q) / Q + np.pi / 2.0
    return 18.0 * np.column_stack([np.cos(angles), np.sin(angles)])


def sample_scenario(cfg: SystemConfig, rng_seed: int):
    """Draw one random deployment: (Geometry, ChannelSet).

    AP positions are fixed by ``default_ap_layout``; CU and EHR positions
    are uniform over the service area.  CU channels are Rayleigh with the
    distance power law applied.  Deterministic for a given seed; if the
    EHR lands exactly on an AP it is redrawn from an incremented substream.
    """
    rng_pos = np.random.default_rng([int(rng_seed), 1])
    rng_fade = np.random.default_rng([int(rng_seed), 2])

    aps = default_ap_layout(cfg.Q)
    cus = np.column_stack([
        rng_pos.uniform(-cfg.area_x, cfg.area_x, cfg.K),
        rng_pos.uniform(-cfg.area_y, cfg.area_y, cfg.K),
    ])

    attempt = 0
    while True:
        rng_ehr = np.random.default_rng([int(rng_seed), 3, attempt])
        ehr = np.array([
            rng_ehr.uniform(-cfg.area_x, cfg.area_x),
            rng_ehr.uniform(-cfg.area_y, cfg.area_y),
        ])
        dists = np.hypot(*(aps - ehr).T)
        if np.any(dists == 0.0):
            attempt += 1
            continue
        if cfg.ehr_max_dist is not None and dists.min() > cfg.ehr_max_dist:
            attempt += 1
            continue
        break

    geom = Geometry(ap_positions=aps, cu_positions=cus, ehr_estimate=ehr)

    h = np.empty((cfg.Q, cfg.K, cfg.N), dtype=complex)
    for q in range(cfg.Q):
        for k in range(cfg.K):
            d = float(np.hypot(*(aps[q] - cus[k])))
            gain = cfg.pathgain_cu(max(d, 1e-6))
            fade = (rng_fade.standard_normal(cfg.N) + 1j * rng_fade.standard_normal(cfg.N)) / np.sqrt(2.0)
            h[q, k] = np.sqrt(gain) * fade
    channels = ChannelSet(
        h=h,
        pathloss_ref_db=cfg.pathloss_ref_db,
        pathloss_exp_cu=cfg.pathloss_exp_cu,
        pathloss_exp_eh=cfg.pathloss_exp_eh,
    )
    return geom, channels


def sample_rcs(cfg: SystemConfig, geometry: Geometry, rng_seed: int) -> np.ndarray:
    """(Q, Q) complex reflection coefficients alpha[q_tx, q_rx], zero diagonal.

    'two_hop' folds both hop path gains into the magnitude (bistatic power
    law, scaled by ``rcs_scale``); 'unit' keeps unit magnitude.  Phases are
    uniform, drawn from the seeded stream either way.
    """
    rng = np.random.default_rng([int(rng_seed), 4])
    Q = cfg.Q
    phases = np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, size=(Q, Q)))
    alphas = np.zeros((Q, Q), dtype=complex)
    dists = np.hypot(*(geometry.ap_positions - geometry.ehr_estimate).T)
    for q_tx in range(Q):
        for q_rx in range(Q):
            if q_tx == q_rx:
                continue
            if cfg.rcs_model == "unit":
                mag = cfg.rcs_scale
            else:
                g_tx = cfg.pathgain_eh(dists[q_tx])
                g_rx = cfg.pathgain_eh(dists[q_rx])
                mag = cfg.rcs_scale * math.sqrt(g_tx * g_rx)
            alphas[q_tx, q_rx] = mag * phases[q_tx, q_rx]
    return alphas


@dataclass(frozen=True)
class Scenario:
    """One concrete Monte-Carlo instance: parameters, deployment, channels."""

    cfg: SystemConfig
    geometry: Geometry
    channels: ChannelSet
    alphas: np.ndarray          # (Q, Q) complex, alpha[q_tx, q_rx]
    box: UncertaintyBox

    @property
    def Q(self) -> int:
        return self.cfg.Q

    @property
    def K(self) -> int:
        return self.cfg.K

    @property
    def N(self) -> int:
        return self.cfg.N


def make_scenario(cfg: SystemConfig, rng_seed: Optional[int] = None) -> Scenario:
    """Sample a full instance (geometry + channels + reflection coefficients)."""
    seed = cfg.seed if rng_seed is None else rng_seed
    geom, channels = sample_scenario(cfg, seed)
    alphas = sample_rcs(cfg, geom, seed)
    return Scenario(
        cfg=cfg,
        geometry=geom,
        channels=channels,
        alphas=alphas,
        box=UncertaintyBox(cfg.psi, cfg.psi),
    )
