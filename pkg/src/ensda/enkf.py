"""Ensemble Kalman filter mathematics.

States are plain float64 vectors of length N; an ensemble is an (N, M)
matrix with one member per column. The observation operator is a selection
of grid indices and the observation error covariance R is diagonal, so the
gain is applied in anomaly-factored form and the N x N covariance is never
materialized.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigurationError, DegenerateEnsembleError, NumericalError
from .rng import STREAM_OBS_PERTURB, member_rng

NO_MEMBER = 0xFFFFFFFF


@dataclass(frozen=True)
class ObservationSet:
    """K observed values with their grid indices and error variances.

    y[k] observes state component indices[k] with variance r_diag[k].
    Indices must be distinct and variances non-negative (positive variances
    are required for the gain solve to be unconditionally well-posed).
    """

    y: np.ndarray
    indices: np.ndarray
    r_diag: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        indices = np.asarray(self.indices, dtype=np.int64)
        r_diag = np.asarray(self.r_diag, dtype=np.float64)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "r_diag", r_diag)
        if not (y.ndim == indices.ndim == r_diag.ndim == 1):
            raise ConfigurationError("observation fields must be 1-D")
        if not (len(y) == len(indices) == len(r_diag)):
            raise ConfigurationError(
                f"observation lengths differ: y={len(y)} indices={len(indices)} r_diag={len(r_diag)}"
            )
        if len(np.unique(indices)) != len(indices):
            raise ConfigurationError("observation indices must be distinct")
        if np.any(indices < 0):
            raise ConfigurationError("observation indices must be non-negative")
        if np.any(r_diag < 0) or not np.all(np.isfinite(r_diag)):
            raise ConfigurationError("observation error variances must be finite and >= 0")

    def __len__(self) -> int:
        return len(self.y)


def apply_observation_operator(x: np.ndarray, obs: ObservationSet) -> np.ndarray:
    """Map a state vector into observation space by index selection."""
    x = np.asarray(x)
    if len(obs) and obs.indices.max() >= x.shape[0]:
        raise ConfigurationError(
            f"observation index {obs.indices.max()} out of range for state of length {x.shape[0]}"
        )
    return x[obs.indices]


def ensemble_mean_and_anomalies(ensemble: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split an (N, M) ensemble into its mean and anomaly matrix.

    Returns (mean, anomalies) with anomalies[:, i] = x_i - mean, so the
    background covariance is anomalies @ anomalies.T / (M - 1).
    """
    ensemble = np.asarray(ensemble, dtype=np.float64)
    if ensemble.ndim != 2:
        raise ConfigurationError("ensemble must be an (N, M) matrix")
    if ensemble.shape[1] < 2:
        raise DegenerateEnsembleError(
            f"need at least 2 members to form anomalies, got {ensemble.shape[1]}"
        )
    mean = ensemble.mean(axis=1)
    anomalies = ensemble - mean[:, None]
    return mean, anomalies


@dataclass
class KalmanGainApplication:
    """Factorized Kalman gain K = P H^T (H P H^T + R)^-1 with P = A A^T/(M-1).

    Stores the anomalies A, their observation-space projection HA, and the
    Cholesky factor of the K x K innovation covariance; ``apply`` multiplies
    K with innovation vectors without ever forming P.
    """

    anomalies: np.ndarray
    projected: np.ndarray
    cho: tuple = field(repr=False)
    members: int = 0

    def apply(self, innovation: np.ndarray) -> np.ndarray:
        """Return K @ innovation for a (K,) vector or (K, M) matrix of columns."""
        z = cho_solve(self.cho, np.asarray(innovation, dtype=np.float64))
        n = self.anomalies.shape[0]
        k = self.projected.shape[0]
        m = self.members
        cols = z.shape[1] if z.ndim == 2 else 1
        # pick the cheaper association; with few observations and many
        # members, forming the N x K gain avoids an M x M intermediate
        if n * k * (m + cols) < m * cols * (n + k):
            return (self.anomalies @ self.projected.T) @ z / (m - 1)
        return self.anomalies @ (self.projected.T @ z) / (m - 1)


def build_kalman_gain(anomalies: np.ndarray, obs: ObservationSet) -> KalmanGainApplication:
    """Factorize the gain for the given anomalies and observation set."""
    anomalies = np.asarray(anomalies, dtype=np.float64)
    m = anomalies.shape[1]
    if m < 2:
        raise DegenerateEnsembleError("gain requires at least 2 members")
    if len(obs) < 1:
        raise ConfigurationError("gain requires at least one observation")
    ha = anomalies[obs.indices, :]
    innov_cov = ha @ ha.T / (m - 1) + np.diag(obs.r_diag)
    try:
        cho = cho_factor(innov_cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"innovation covariance is not positive definite: {exc}") from exc
    return KalmanGainApplication(anomalies=anomalies, projected=ha, cho=cho, members=m)


def perturb_observations(
    obs: ObservationSet, member_id: int, cycle: int, seed: int
) -> np.ndarray:
    """Return y + eps with eps ~ N(0, R), keyed on (seed, cycle, member_id).

    The same key always yields the same perturbation, so the analysis does
    not depend on which runner propagated the member or in what order.
    """
    rng = member_rng(seed, cycle, member_id, STREAM_OBS_PERTURB)
    return obs.y + np.sqrt(obs.r_diag) * rng.standard_normal(len(obs))


def enkf_update(
    background: np.ndarray,
    obs: ObservationSet,
    cycle: int,
    seed: int,
    member_ids=None,
    perturb: bool = True,
) -> np.ndarray:
    """One stochastic EnKF analysis step on an (N, M) background ensemble.

    Column i becomes x_i + K (y_i - H x_i), where y_i is the observation
    vector perturbed per member (or the raw vector when ``perturb`` is off,
    which reproduces the plain textbook update formula exactly).
    ``member_ids`` ties perturbation streams to stable member identities;
    it defaults to the column positions.
    """
    background = np.asarray(background, dtype=np.float64)
    if background.ndim != 2:
        raise ConfigurationError("background must be an (N, M) matrix")
    n, m = background.shape
    if m < 2:
        raise DegenerateEnsembleError(f"need at least 2 members, got {m}")
    if len(obs) == 0:
        return background.copy()
    if member_ids is None:
        member_ids = range(m)
    member_ids = list(member_ids)
    if len(member_ids) != m:
        raise ConfigurationError("member_ids length must match ensemble size")

    projected_members = background[obs.indices, :]
    if perturb:
        y_members = np.column_stack(
            [perturb_observations(obs, mid, cycle, seed) for mid in member_ids]
        )
    else:
        y_members = np.tile(obs.y[:, None], (1, m))
    innovations = y_members - projected_members
    if not innovations.any():
        # K times a zero innovation is zero for any gain; skipping the solve
        # keeps the degenerate variance-free, noise-free case well defined
        return background.copy()
    _, anomalies = ensemble_mean_and_anomalies(background)
    gain = build_kalman_gain(anomalies, obs)
    return background + gain.apply(innovations)
