"""Sensing-assisted robust SWIPT resource allocation for networked ISAC.

Library layout:

* :mod:`swiptsense.scenario`   -- parameters, geometry, channels, EH circuit
* :mod:`swiptsense.sensing`    -- steering/FIM/CRB math and expansion bounds
* :mod:`swiptsense.robust`     -- conic constraint factories (certificates)
* :mod:`swiptsense.conic`      -- solver-agnostic program wrapper + SDR recovery
* :mod:`swiptsense.algorithms` -- the two-phase solvers and the outer line search
* :mod:`swiptsense.baselines`  -- comparison schemes and the infeasibility rate
* :mod:`swiptsense.harness`    -- seeded sweeps, CSV/plots, estimator validation
* :mod:`swiptsense.cli`        -- command-line entry point
"""

from .scenario import (
    ConfigError,
    EhModelParams,
    Geometry,
    ChannelSet,
    Scenario,
    SystemConfig,
    UncertaintyBox,
    cos_theta,
    eh_harvested_power,
    eh_required_input,
    load_config,
    make_scenario,
    parse_config_text,
    sample_scenario,
)

__version__ = "0.1.0"
