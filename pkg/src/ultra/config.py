"""Flat run configuration: every tunable in one place, loadable from JSON or key=value text."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .gridworld import SceneConfig
from .meta import GeneratorRewardConfig, MetaSchedule, UltraConfig
from .policies import HierarchyConfig, RewardConfig
from .rl import A2CConfig
from .transfer import TransferConfig

SEED_ENV = "ULTRA_SEED"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    scene_dir: str = "scenes"
    # hierarchy
    K: int = 7
    N: int = 3
    hidden: int = 64
    # meta-training schedule
    W: int = 10
    J: int = 10
    beta: float = 0.5
    iterations: int = 2000
    meta_t_max: int = 50
    G_max: int = 30
    checkpoint_every: int = 100
    # generator reward and update
    k: float = 5.0
    lam: float = 0.02
    eta: float = 0.1
    gen_lr: float = 0.005
    gen_clip: float = 0.0
    generator: str = "adversarial"
    meta_update: str = "reptile"
    curriculum_start: int = 2
    curriculum_end: int = 20
    # actor-critic
    alpha: float = 3e-3
    gamma: float = 0.99
    entropy_coef: float = 0.05
    value_coef: float = 0.5
    step_reward: float = -0.01
    success_reward: float = 5.0
    # scenes
    width: int = 11
    height: int = 11
    density: float = 0.2
    C: int = 4
    objects_per_class: int = 4
    n_metatrain: int = 12
    n_train: int = 4
    n_val: int = 4
    n_test: int = 4
    # transfer and evaluation
    transfer_episodes: int = 5000
    transfer_lr: float = 0.05
    transfer_batch: int = 8
    transfer_clip: float = 5.0
    transfer_entropy_coef: float = 0.01
    T_max: int = 100
    curve_every: int = 50
    curve_tasks: int = 10
    eval_episodes: int = 25
    eval_greedy: bool = True
    eval_greedy_subs: bool = False
    seeds: int = 5
    K_values: str = "4,7,10"
    trace_horizon: int = 20
    log_timing: bool = False

    def __post_init__(self):
        for name in ("K", "N", "hidden", "W", "J", "C", "width", "height", "transfer_batch", "seeds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("iterations", "transfer_episodes", "eval_episodes", "n_metatrain",
                     "n_train", "n_val", "n_test", "G_max", "meta_t_max", "T_max"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 <= self.density < 1:
            raise ConfigError("density must lie in [0, 1)")
        if self.C > 26:
            raise ConfigError("at most 26 object classes fit the scene file format")
        self.k_values()
        self.ultra()  # validates the nested component configs

    # -- conversions -----------------------------------------------------------

    def hierarchy(self) -> HierarchyConfig:
        return HierarchyConfig(K=self.K, N=self.N, hidden=(self.hidden,))

    def scene_config(self) -> SceneConfig:
        return SceneConfig(self.width, self.height, self.density, self.objects_per_class, self.C)

    def rewards(self) -> RewardConfig:
        return RewardConfig(self.step_reward, self.success_reward)

    def meta_a2c(self) -> A2CConfig:
        return A2CConfig(self.gamma, self.alpha, self.entropy_coef, self.value_coef)

    def transfer_a2c(self) -> A2CConfig:
        clip = self.transfer_clip if self.transfer_clip > 0 else None
        return A2CConfig(self.gamma, self.transfer_lr, self.transfer_entropy_coef, self.value_coef, clip)

    def ultra(self) -> UltraConfig:
        return UltraConfig(
            hierarchy=self.hierarchy(),
            a2c=self.meta_a2c(),
            schedule=MetaSchedule(self.W, self.J, self.beta, self.meta_t_max, self.G_max, self.iterations),
            generator_reward=GeneratorRewardConfig(self.k, self.lam, self.eta),
            rewards=self.rewards(),
            gen_lr=self.gen_lr,
            gen_clip=self.gen_clip if self.gen_clip > 0 else None,
            generator=self.generator,
            meta_update=self.meta_update,
            curriculum=(self.curriculum_start, self.curriculum_end),
        )

    def transfer(self) -> TransferConfig:
        return TransferConfig(self.transfer_episodes, self.T_max, self.curve_every,
                              self.curve_tasks, self.transfer_batch)

    def k_values(self) -> list[int]:
        try:
            values = [int(v) for v in self.K_values.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"K_values must be comma-separated integers: {self.K_values!r}") from exc
        if not values or min(values) < 1:
            raise ConfigError("K_values needs at least one positive entry")
        return values

    # -- serialization ------------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return replace(self, **coerce(overrides))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls().with_overrides(data)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def coerce(raw: dict) -> dict:
    """Check keys and convert string values to each field's type."""
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, value in raw.items():
        kind = type(getattr(RunConfig, key))
        try:
            out[key] = _convert(value, kind)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: cannot read {value!r} as {kind.__name__}") from exc
    return out


def _convert(value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if isinstance(value, str) and value.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(value)
    if kind is int:
        if isinstance(value, bool):
            raise TypeError(value)
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return int(value)
    if kind is float:
        if isinstance(value, bool):
            raise TypeError(value)
        return float(value)
    return str(value)


def parse_pairs(lines) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None,
                environ=os.environ) -> RunConfig:
    """Defaults, then the file (JSON or key=value), then ``overrides``, then ``ULTRA_SEED``."""
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        if text.lstrip().startswith("{"):
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: top level must be an object")
        else:
            data = parse_pairs(text.splitlines())
    data.update(overrides or {})
    if environ.get(SEED_ENV):
        data["seed"] = environ[SEED_ENV]
    return RunConfig.from_dict(data)
