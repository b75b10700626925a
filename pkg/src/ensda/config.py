"""Flat key=value study configuration.

One study is described by a plain text file of ``key = value`` lines
('#' starts a comment). docs/config.md lists every key. The semantic
subset of keys (everything that influences the numerical result) is
hashed into the checkpoint so a restore against a modified study is
refused.
"""

import hashlib
import shlex
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .models import ModelSpec


@dataclass
class KillSpec:
    """Kill ``count`` runner processes when cycle ``cycle`` starts propagating."""

    cycle: int
    count: int
    delay_ms: int = 200


@dataclass
class ResizeSpec:
    """Retarget the runner fleet to ``target`` when cycle ``cycle`` starts."""

    cycle: int
    target: int


@dataclass
class StudyConfig:
    study: str = "study"
    model: str = "lorenz96"
    n_dynamic: int = 48
    n_assimilated: int = 40
    forcing: float = 8.0
    dt: float = 0.05
    varcost_base_ms: float = 150.0
    varcost_spread_ms: float = 100.0
    members: int = 8
    cycles: int = 3
    nsteps: int = 5
    spinup_steps: int = 0
    seed: int = 1234
    init_noise: float = 1.0
    perturb_obs: bool = True
    obs_count: int = 20
    obs_sigma: float = 1.0
    obs_file: str = ""
    nan_member: int = -1
    member_failure_policy: str = "drop"
    max_member_restarts: int = 3
    runners: int = 2
    runner_parts: int = 1
    server_shards: int = 1
    base_port: int = 5555
    launcher_port: int = 5655
    host: str = "127.0.0.1"
    runner_timeout_s: float = 10.0
    server_timeout_s: float = 5.0
    heartbeat_period_s: float = 0.0  # 0 -> runner_timeout / 5
    connect_timeout_s: float = 10.0
    max_restarts: int = 50
    checkpoint_dir: str = "ckpt"
    metrics_path: str = "metrics.jsonl"
    ensemble_out: str = "final_ensemble.bin"
    control_file: str = ""
    runner_cmd: str = ""
    runner_cmd_slots: dict = field(default_factory=dict)
    kill_runners: list = field(default_factory=list)
    kill_server_cycle: int = -1
    kill_server_delay_ms: int = 200
    resizes: list = field(default_factory=list)

    # Keys whose value changes the numerical result; these feed the hash
    # that ties a checkpoint to its study.
    SEMANTIC_KEYS = (
        "model",
        "n_dynamic",
        "n_assimilated",
        "forcing",
        "dt",
        "members",
        "cycles",
        "nsteps",
        "spinup_steps",
        "seed",
        "init_noise",
        "perturb_obs",
        "obs_count",
        "obs_sigma",
        "obs_file",
        "nan_member",
        "member_failure_policy",
    )

    def __post_init__(self):
        if self.members < 2:
            raise ConfigurationError("members must be >= 2")
        if self.cycles < 1:
            raise ConfigurationError("cycles must be >= 1")
        if self.nsteps < 1:
            raise ConfigurationError("nsteps must be >= 1")
        if self.member_failure_policy not in ("drop", "replace"):
            raise ConfigurationError(
                f"member_failure_policy must be 'drop' or 'replace', got {self.member_failure_policy!r}"
            )
        if self.runner_parts < 1 or self.server_shards < 1:
            raise ConfigurationError("runner_parts and server_shards must be >= 1")
        self.model_spec()  # validates dimensions and kind

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            kind=self.model,
            n_dynamic=self.n_dynamic,
            n_assimilated=self.n_assimilated,
            forcing=self.forcing,
            dt=self.dt,
            base_ms=self.varcost_base_ms,
            spread_ms=self.varcost_spread_ms,
        )

    @property
    def heartbeat_period(self) -> float:
        if self.heartbeat_period_s > 0:
            return self.heartbeat_period_s
        return self.runner_timeout_s / 5.0

    def semantic_hash(self) -> bytes:
        text = "\n".join(f"{k}={getattr(self, k)!r}" for k in self.SEMANTIC_KEYS)
        return hashlib.sha256(text.encode("utf-8")).digest()


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")


def _parse_kill(raw: str) -> KillSpec:
    parts = raw.split(":")
    if len(parts) not in (2, 3):
        raise ConfigurationError(f"kill_runners entry {raw!r}: want cycle:count[:delay_ms]")
    cycle, count = int(parts[0]), int(parts[1])
    delay = int(parts[2]) if len(parts) == 3 else 200
    return KillSpec(cycle=cycle, count=count, delay_ms=delay)


def _parse_resize(raw: str) -> ResizeSpec:
    parts = raw.split(":")
    if len(parts) != 2:
        raise ConfigurationError(f"resize entry {raw!r}: want cycle:target")
    return ResizeSpec(cycle=int(parts[0]), target=int(parts[1]))


_FIELD_TYPES = {f.name: f.type for f in fields(StudyConfig)}


def parse_study_config(path) -> StudyConfig:
    """Parse a flat key=value study file into a validated StudyConfig."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        try:
            _store(values, key, raw)
        except ConfigurationError:
            raise
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{lineno}: {key}: {exc}") from exc
    try:
        return StudyConfig(**values)
    except TypeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def _store(values: dict, key: str, raw: str) -> None:
    if key == "kill_runners":
        values.setdefault("kill_runners", []).extend(
            _parse_kill(item.strip()) for item in raw.split(",") if item.strip()
        )
        return
    if key == "resize":
        values.setdefault("resizes", []).extend(
            _parse_resize(item.strip()) for item in raw.split(",") if item.strip()
        )
        return
    if key == "kill_server":
        parts = raw.split(":")
        if len(parts) not in (1, 2):
            raise ConfigurationError(f"kill_server: want cycle[:delay_ms], got {raw!r}")
        values["kill_server_cycle"] = int(parts[0])
        if len(parts) == 2:
            values["kill_server_delay_ms"] = int(parts[1])
        return
    if key.startswith("runner_cmd."):
        slot = int(key.split(".", 1)[1])
        values.setdefault("runner_cmd_slots", {})[slot] = raw
        return
    if key not in _FIELD_TYPES:
        raise ConfigurationError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    if kind in ("bool", bool):
        values[key] = _parse_bool(raw, key)
    elif kind in ("int", int):
        values[key] = int(raw)
    elif kind in ("float", float):
        values[key] = float(raw)
    elif kind in ("str", str):
        values[key] = raw
    else:
        raise ConfigurationError(f"config key {key!r} cannot be set from file")


def write_study_config(config: StudyConfig, path) -> None:
    """Serialize a config back to the flat format (used by tests and tools)."""
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name == "kill_runners":
            for k in value:
                lines.append(f"kill_runners = {k.cycle}:{k.count}:{k.delay_ms}")
        elif f.name == "resizes":
            for r in value:
                lines.append(f"resize = {r.cycle}:{r.target}")
        elif f.name == "kill_server_cycle":
            if value >= 0:
                lines.append(f"kill_server = {value}:{config.kill_server_delay_ms}")
        elif f.name == "kill_server_delay_ms":
            continue
        elif f.name == "runner_cmd_slots":
            for slot, cmd in value.items():
                lines.append(f"runner_cmd.{slot} = {cmd}")
        elif isinstance(value, bool):
            lines.append(f"{f.name} = {'true' if value else 'false'}")
        else:
            lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def split_command(template: str, **subs) -> list[str]:
    """Split a runner command template and substitute {placeholders}."""
    out = []
    for token in shlex.split(template):
        for key, val in subs.items():
            token = token.replace("{" + key + "}", str(val))
        out.append(token)
    return out
