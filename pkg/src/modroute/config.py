"""Run configuration: YAML load/save, validation, and hashing.

A run config gathers the task suite, network sizes, optimizer settings, and
feature flags into one serializable record. Loading is strict: unknown keys
and wrong types raise ``ConfigError`` with the offending key path so typos
don't silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import yaml

from .envs import ACT_DIM, KINDS, OBS_DIM, TaskSpec, make_suite
from .network import PolicyConfig
from .sac import TrainSettings


class ConfigError(ValueError):
    """Invalid run configuration; message names the key path."""


@dataclass
class RunConfig:
    # task suite: list of {kind, goal_rule, difficulty, horizon} dicts
    tasks: list = field(default_factory=lambda: [
        {"kind": "reach", "goal_rule": "fixed"},
        {"kind": "reach", "goal_rule": "random"},
        {"kind": "push", "goal_rule": "fixed"},
        {"kind": "two-stage-fetch", "goal_rule": "fixed"},
    ])

    # network sizes
    n_modules: int = 8
    module_dim: int = 64
    module_hidden: int = 64
    encoder_widths: list = field(default_factory=lambda: [64, 64])
    routing_widths: list = field(default_factory=lambda: [64, 64])
    k: int = 2

    # feature flags
    state_routing: bool = True
    route_balancing: bool = True
    loss_rescaling: bool = True
    resrouting: str = "rsg"        # rsg | sg-only | target-routing | off
    routing_fn: str = "samplek"    # samplek | topk | hard | soft

    # optimization
    gamma: float = 0.99
    polyak: float = 0.995
    lr: float = 3e-4
    reward_scale: float = 0.1
    alpha_init: float = 0.1
    batch_per_task: int = 32
    buffer_capacity: int = 100_000
    start_steps: int = 1000
    train_ratio: float = 1.0
    maskout_threshold: float = 3e3

    # run control
    seed: int = 0
    total_env_steps: int = 200_000
    eval_interval: int = 10_000
    eval_episodes: int = 10
    checkpoint_interval: int = 50_000
    stop_at_success: float | None = None
    out_dir: str = "runs/default"

    # ------------------------------------------------------------------

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.resrouting not in ("rsg", "sg-only", "target-routing", "off"):
            raise ConfigError(f"resrouting: unknown mode {self.resrouting!r}")
        if self.routing_fn not in ("samplek", "topk", "hard", "soft"):
            raise ConfigError(f"routing_fn: unknown mode {self.routing_fn!r}")
        if not self.tasks:
            raise ConfigError("tasks: at least one task is required")
        for i, entry in enumerate(self.tasks):
            if not isinstance(entry, dict):
                raise ConfigError(f"tasks[{i}]: expected a mapping")
            kind = entry.get("kind")
            if kind not in KINDS:
                raise ConfigError(
                    f"tasks[{i}].kind: {kind!r} is not one of {sorted(KINDS)}"
                )
            for key in entry:
                if key not in ("kind", "goal_rule", "difficulty", "horizon"):
                    raise ConfigError(f"tasks[{i}].{key}: unknown key")
        if self.n_modules < 1:
            raise ConfigError("n_modules: must be >= 1")
        if not 1 <= self.k:
            raise ConfigError("k: must be >= 1")

    # ------------------------------------------------------------------

    def suite(self) -> list[TaskSpec]:
        return make_suite(self.tasks)

    def policy_config(self, head: str = "actor") -> PolicyConfig:
        return PolicyConfig(
            obs_dim=OBS_DIM, act_dim=ACT_DIM, num_tasks=len(self.tasks),
            head=head, n_modules=self.n_modules, module_dim=self.module_dim,
            module_hidden=self.module_hidden,
            encoder_widths=tuple(self.encoder_widths),
            routing_widths=tuple(self.routing_widths),
            k=self.k, state_routing=self.state_routing,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            gamma=self.gamma, polyak=self.polyak, lr=self.lr,
            reward_scale=self.reward_scale, alpha_init=self.alpha_init,
            batch_per_task=self.batch_per_task,
            buffer_capacity=self.buffer_capacity,
            start_steps=self.start_steps, train_ratio=self.train_ratio,
            maskout_threshold=self.maskout_threshold,
            route_balancing=self.route_balancing,
            loss_rescaling=self.loss_rescaling,
            resrouting=self.resrouting, routing_fn=self.routing_fn,
        )

    # ------------------------------------------------------------------
    # serialization

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root: expected a mapping")
        known = {f.name: f for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"{key}: unknown config key")
        checked = {}
        for key, value in d.items():
            checked[key] = _coerce(key, value, known[key].type)
        try:
            return cls(**checked)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def hash(self) -> str:
        """Stable content hash: sha256 of the canonical JSON encoding."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # run-control knobs that may change between a run and its resumption
    _RUN_CONTROL = ("total_env_steps", "eval_interval", "eval_episodes",
                    "checkpoint_interval", "stop_at_success", "out_dir")

    def compat_hash(self) -> str:
        """Hash of everything that must match for a checkpoint to be
        resumable: the full config minus run-control fields."""
        d = {k: v for k, v in self.to_dict().items() if k not in self._RUN_CONTROL}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path: str):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse {path}: {exc}") from exc
        if raw is None:
            raw = {}
        return cls.from_dict(raw)


_BOOL_KEYS = {"state_routing", "route_balancing", "loss_rescaling"}
_STR_KEYS = {"resrouting", "routing_fn", "out_dir"}
_LIST_KEYS = {"tasks", "encoder_widths", "routing_widths"}
_FLOAT_KEYS = {"gamma", "polyak", "lr", "reward_scale", "alpha_init",
               "train_ratio", "maskout_threshold"}
_INT_KEYS = {"n_modules", "module_dim", "module_hidden", "k", "batch_per_task",
             "buffer_capacity", "start_steps", "seed", "total_env_steps",
             "eval_interval", "eval_episodes", "checkpoint_interval"}


def _coerce(key: str, value, _annotation):
    """Light type checking with key-path error messages."""
    if key == "stop_at_success":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number or null, got {value!r}")
        return float(value)
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if key in _STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if key in _LIST_KEYS:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    return value
