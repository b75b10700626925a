"""Desk-scale elastic, fault-tolerant ensemble data assimilation.

Independent runner processes propagate ensemble members, a sharded server
assembles their states online and applies the EnKF update, and a launcher
supervises and resizes the fleet.
"""

from .config import StudyConfig, parse_study_config
from .enkf import (
    ObservationSet,
    apply_observation_operator,
    build_kalman_gain,
    enkf_update,
    ensemble_mean_and_anomalies,
    perturb_observations,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    DegenerateEnsembleError,
    EnsdaError,
    NumericalError,
    ProtocolError,
    ReportError,
)
from .partition import block_decompose, make_layout, make_redistribution_map
from .scheduling import ListScheduler, simulate_schedule

__version__ = "0.1.0"
