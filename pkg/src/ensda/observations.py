"""Per-cycle observation sources: twin experiment generator or file."""

from pathlib import Path

import numpy as np

from .config import StudyConfig
from .enkf import ObservationSet
from .errors import ConfigurationError
from .models import make_model
from .rng import STREAM_OBS_NOISE, member_rng


def observation_indices(n_assimilated: int, count: int) -> np.ndarray:
    """Evenly spread ``count`` distinct indices over [0, n_assimilated)."""
    if not (0 < count <= n_assimilated):
        raise ConfigurationError(
            f"obs_count must be in [1, {n_assimilated}], got {count}"
        )
    return (np.arange(count, dtype=np.int64) * n_assimilated) // count


class TwinObservationSource:
    """Synthetic-truth observations: truth run plus keyed Gaussian noise.

    The truth member starts from the model's (spun-up) base state and is
    propagated alongside the study; observations for cycle c are drawn from
    the stream (seed, c) so they never depend on scheduling or restarts.
    """

    def __init__(self, config: StudyConfig, base_state: np.ndarray):
        self.config = config
        self.model = make_model(config.model_spec())
        self.indices = observation_indices(config.n_assimilated, config.obs_count)
        self.r_diag = np.full(config.obs_count, config.obs_sigma**2)
        self.truth = np.array(base_state, dtype=np.float64)
        self.cycle = 0

    def fast_forward(self, cycle: int) -> None:
        """Advance the truth to a checkpointed cycle after a restore."""
        while self.cycle < cycle:
            self.truth = self.model.propagate_pure(self.truth, self.config.nsteps)
            self.cycle += 1

    def observe(self, cycle: int) -> ObservationSet:
        if cycle != self.cycle:
            raise ConfigurationError(
                f"observation source is at cycle {self.cycle}, requested {cycle}"
            )
        self.truth = self.model.propagate_pure(self.truth, self.config.nsteps)
        self.cycle += 1
        rng = member_rng(self.config.seed, cycle, 0, STREAM_OBS_NOISE)
        noise = self.config.obs_sigma * rng.standard_normal(len(self.indices))
        y = self.truth[self.indices] + noise
        return ObservationSet(y=y, indices=self.indices, r_diag=self.r_diag)


class FileObservationSource:
    """Observations preloaded from an .npz file with arrays y, indices, r_diag.

    ``y`` has shape (cycles, K); indices and r_diag are shared across cycles.
    """

    def __init__(self, path, cycles: int):
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"observation file not found: {path}")
        with np.load(path) as data:
            try:
                self.y = np.array(data["y"], dtype=np.float64)
                self.indices = np.array(data["indices"], dtype=np.int64)
                self.r_diag = np.array(data["r_diag"], dtype=np.float64)
            except KeyError as exc:
                raise ConfigurationError(f"{path}: missing array {exc}") from exc
        if self.y.ndim != 2 or self.y.shape[0] < cycles:
            raise ConfigurationError(
                f"{path}: y must have shape (>= {cycles} cycles, K), got {self.y.shape}"
            )

    def fast_forward(self, cycle: int) -> None:
        pass

    def observe(self, cycle: int) -> ObservationSet:
        return ObservationSet(y=self.y[cycle], indices=self.indices, r_diag=self.r_diag)


def make_observation_source(config: StudyConfig, base_state: np.ndarray):
    if config.obs_file:
        return FileObservationSource(config.obs_file, config.cycles)
    return TwinObservationSource(config, base_state)
