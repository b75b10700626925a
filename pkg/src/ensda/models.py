"""Deterministic member models: Lorenz-96 and a variable-cost stand-in.

Both models are pure functions of their input state, so a member propagated
twice from the same analysis state yields bit-identical results no matter
which runner executes it. The Lorenz-96 arithmetic is written as plain
elementwise expressions whose evaluation order is part of the contract:
alternative runner clients must reproduce it operation for operation.
"""

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError
from .partition import DynamicState, StateLayout
from .rng import STREAM_INIT, member_rng

# Shape of the variable-cost walltime distribution: a right-skewed bulk
# (u^1.5 over [0, 1], mean 0.4) plus a rare straggler tail, calibrated so
# one-member-per-runner schedules idle roughly half the time.
TAIL_WEIGHT = 0.03
MEAN_COST_FRACTION = (1.0 - TAIL_WEIGHT) * 0.4 + TAIL_WEIGHT * 1.7


@dataclass(frozen=True)
class ModelSpec:
    """Study-level model configuration."""

    kind: str
    n_dynamic: int
    n_assimilated: int
    forcing: float = 8.0
    dt: float = 0.05
    base_ms: float = 150.0
    spread_ms: float = 100.0

    def __post_init__(self):
        if self.kind not in ("lorenz96", "varcost"):
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if not (0 < self.n_assimilated <= self.n_dynamic):
            raise ConfigurationError("need 0 < n_assimilated <= n_dynamic")
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")

    @property
    def layout(self) -> StateLayout:
        return StateLayout(self.n_dynamic, self.n_assimilated)


def _lorenz96_tendency(x: np.ndarray, forcing: float) -> np.ndarray:
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + forcing


def lorenz96_step(x: np.ndarray, forcing: float, dt: float) -> np.ndarray:
    """One RK4 step of dx_j/dt = (x_{j+1} - x_{j-2}) x_{j-1} - x_j + F."""
    half = 0.5 * dt
    sixth = dt / 6.0
    k1 = _lorenz96_tendency(x, forcing)
    k2 = _lorenz96_tendency(x + half * k1, forcing)
    k3 = _lorenz96_tendency(x + half * k2, forcing)
    k4 = _lorenz96_tendency(x + dt * k3, forcing)
    return x + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz96_propagate(x: np.ndarray, nsteps: int, forcing: float, dt: float) -> np.ndarray:
    """Advance the cyclic Lorenz-96 state by nsteps RK4 steps."""
    if x.shape[0] < 4:
        raise ConfigurationError("Lorenz-96 needs at least 4 variables")
    out = np.array(x, dtype=np.float64)
    for _ in range(nsteps):
        out = lorenz96_step(out, forcing, dt)
    return out


class Lorenz96Model:
    """Lorenz-96 core with an optional time-integrated diagnostic tail.

    The assimilated prefix holds the N chaotic variables; the remaining
    dynamic entries accumulate dt * x_{i mod N} each step, giving the member
    per-cycle data that propagation changes but the update must not touch.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.n = spec.n_assimilated

    def initial_state(self) -> np.ndarray:
        values = np.full(self.spec.n_dynamic, self.spec.forcing, dtype=np.float64)
        values[0] = self.spec.forcing + 0.01  # break the fixed-point symmetry
        values[self.n :] = 0.0
        return values

    def propagate(self, values: np.ndarray, nsteps: int) -> np.ndarray:
        x = np.array(values[: self.n], dtype=np.float64)
        tail = np.array(values[self.n :], dtype=np.float64)
        tail_src = np.arange(tail.shape[0]) % self.n
        for _ in range(nsteps):
            x = lorenz96_step(x, self.spec.forcing, self.spec.dt)
            if tail.shape[0]:
                tail = tail + self.spec.dt * x[tail_src]
        out = np.concatenate([x, tail])
        if not np.all(np.isfinite(out)):
            raise NumericalError("Lorenz-96 propagation produced non-finite values")
        return out

    # Identical dynamics either way; the hook exists for models whose
    # propagation cost is simulated rather than computed.
    propagate_pure = propagate


def varcost_duration_ms(state: np.ndarray, base_ms: float, spread_ms: float) -> float:
    """Deterministic propagation walltime for a state, in milliseconds.

    The duration is keyed on a hash of the state bytes, then mapped through
    the fitted distribution (skewed bulk plus rare stragglers).
    """
    digest = hashlib.sha256(np.ascontiguousarray(state, dtype="<f8").tobytes()).digest()
    u = int.from_bytes(digest[:8], "little") / 2.0**64
    v = int.from_bytes(digest[8:16], "little") / 2.0**64
    frac = 1.2 + u if v < TAIL_WEIGHT else u**1.5
    return base_ms + spread_ms * frac


class VarcostModel:
    """Cheap state transform plus a deterministic, state-keyed sleep.

    The sleep is busy-free so measured efficiency reflects scheduling, not
    CPU contention; durations reproduce the skewed propagation-walltime
    spread seen with iterative solvers.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec

    def initial_state(self) -> np.ndarray:
        j = np.arange(self.spec.n_dynamic, dtype=np.float64)
        return 1.0 + 0.5 * np.sin(j)

    def _transform(self, values: np.ndarray, nsteps: int) -> np.ndarray:
        x = np.array(values, dtype=np.float64)
        for _ in range(nsteps):
            x = 0.99 * x + 0.01 * np.tanh(np.roll(x, 1))
        if not np.all(np.isfinite(x)):
            raise NumericalError("varcost propagation produced non-finite values")
        return x

    def propagate(self, values: np.ndarray, nsteps: int) -> np.ndarray:
        duration = varcost_duration_ms(values, self.spec.base_ms, self.spec.spread_ms)
        out = self._transform(values, nsteps)
        time.sleep(duration / 1000.0)
        return out

    def propagate_pure(self, values: np.ndarray, nsteps: int) -> np.ndarray:
        return self._transform(values, nsteps)


def make_model(spec: ModelSpec):
    if spec.kind == "lorenz96":
        return Lorenz96Model(spec)
    return VarcostModel(spec)


def init_ensemble(
    base_state: np.ndarray, members: int, noise_amplitude: float, seed: int
) -> list[DynamicState]:
    """Build member states as base + Uniform(-a, a) per component.

    Member i draws from the counter-based stream (seed, 0, i), so the
    ensemble is identical across runs and hosts without loading any files.
    """
    if members < 2:
        raise ConfigurationError(f"need at least 2 members, got {members}")
    base = np.asarray(base_state, dtype=np.float64)
    out = []
    for i in range(members):
        rng = member_rng(seed, 0, i, STREAM_INIT)
        noise = rng.uniform(-noise_amplitude, noise_amplitude, base.shape[0])
        out.append(DynamicState(member_id=i, values=base + noise))
    return out
