"""Run configuration: INI files with [env], [team], [algo], [losses], [optim],
[logging] sections, every hyperparameter a named key with its default.

`load_config` reports unknown sections/keys and bad values with the file and
key that caused them, so the CLI can fail with an anchored message.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields

VARIANTS = ("shapley_machine", "poam", "banzhaf_machine")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VariantFlags:
    """Derived behavior switches for each training algorithm."""

    name: str
    use_shaped_reward: bool
    use_efficiency_loss: bool
    critic_target: str  # "ttd" or "td_lambda_full"

    @classmethod
    def from_name(cls, name: str) -> "VariantFlags":
        if name == "shapley_machine":
            return cls(name, True, True, "ttd")
        if name == "poam":
            return cls(name, False, False, "td_lambda_full")
        if name == "banzhaf_machine":
            return cls(name, False, False, "ttd")
        raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")


@dataclass
class RunConfig:
    # [env]
    env_name: str = "pursuit"
    n_agents: int = 3
    grid_size: int = 7
    episode_limit: int = 100
    visibility_radius: int = 3
    # [team]
    pool: str = "greedy_chase,flanker,random,lazy,noisy_greedy"
    pool_noise: float = 0.2
    uncontrolled_obs: str = "masked"  # or "full"
    shaping_teammates: str = "all"  # or "controlled"
    # [algo]
    variant: str = "shapley_machine"
    gamma: float = 0.99
    td_lambda: float = 0.85
    m: int = 0  # 0 = auto: min(2^n - 1, episode_limit)
    history_window: int = 4
    embedding_dim: int = 8
    hidden_dim: int = 64
    agent_id_onehot: bool = True
    # [losses]
    alpha: float = 0.01
    beta1: float = 0.5
    beta2: float = 0.01
    entropy_coef: float = 0.05
    clip_epsilon: float = 0.2
    use_adv_std: bool = True
    standardise_rewards: bool = True
    alpha_warmup_steps: int = 0
    # [optim]
    lr: float = 0.0005
    epochs: int = 5
    minibatches: int = 1
    buffer_size: int = 256
    ed_lr: float = 0.0005
    ed_epochs: int = 1
    ed_minibatches: int = 1
    optim_alpha: float = 0.99
    optim_eps: float = 0.00001
    use_obs_norm: bool = True
    use_orthogonal_init: bool = True
    num_parallel_envs: int = 8
    max_env_steps: int = 300000
    # [logging]
    eval_interval: int = 1
    eval_episodes: int = 16
    checkpoint_interval: int = 50
    stop_at_test_return: float = 0.0  # 0 = never stop early

    def validate(self) -> None:
        VariantFlags.from_name(self.variant)
        if self.env_name not in ("pursuit", "diagnostic"):
            raise ConfigError(f"env.name: unknown environment {self.env_name!r}")
        if not 2 <= self.n_agents <= 5:
            raise ConfigError(f"env.n_agents must be in [2, 5], got {self.n_agents}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"algo.gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 < self.td_lambda < 1.0:
            raise ConfigError(f"algo.td_lambda must be in (0, 1), got {self.td_lambda}")
        if self.m < 0:
            raise ConfigError(f"algo.m must be >= 0, got {self.m}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"losses.alpha must be in [0, 1), got {self.alpha}")
        if self.beta1 < 0 or self.beta2 < 0 or self.entropy_coef < 0:
            raise ConfigError("losses.beta1/beta2/entropy_coef must be nonnegative")
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ConfigError(f"losses.clip_epsilon must be in (0, 1), got {self.clip_epsilon}")
        if self.uncontrolled_obs not in ("masked", "full"):
            raise ConfigError(f"team.uncontrolled_obs must be masked|full, got {self.uncontrolled_obs}")
        if self.shaping_teammates not in ("all", "controlled"):
            raise ConfigError(f"team.shaping_teammates must be all|controlled, got {self.shaping_teammates}")
        if min(self.epochs, self.minibatches, self.buffer_size, self.ed_epochs,
               self.history_window, self.eval_interval, self.eval_episodes) < 1:
            raise ConfigError("optim/logging counters must be >= 1")
        if not self.pool_kinds():
            raise ConfigError("team.pool must list at least one policy kind")

    def pool_kinds(self) -> list:
        return [k.strip() for k in self.pool.split(",") if k.strip()]

    def effective_m(self) -> int:
        if self.m > 0:
            return self.m
        return min((1 << self.n_agents) - 1, self.episode_limit)

    def flags(self) -> VariantFlags:
        return VariantFlags.from_name(self.variant)


_SECTION_KEYS = {
    "env": {"name": "env_name", "n_agents": "n_agents", "grid_size": "grid_size",
            "episode_limit": "episode_limit", "visibility_radius": "visibility_radius"},
    "team": {"pool": "pool", "noise": "pool_noise", "uncontrolled_obs": "uncontrolled_obs",
             "shaping_teammates": "shaping_teammates"},
    "algo": {"variant": "variant", "gamma": "gamma", "td_lambda": "td_lambda", "m": "m",
             "history_window": "history_window", "embedding_dim": "embedding_dim",
             "hidden_dim": "hidden_dim", "agent_id_onehot": "agent_id_onehot"},
    "losses": {"alpha": "alpha", "beta1": "beta1", "beta2": "beta2",
               "entropy_coef": "entropy_coef", "clip_epsilon": "clip_epsilon",
               "use_adv_std": "use_adv_std", "standardise_rewards": "standardise_rewards",
               "alpha_warmup_steps": "alpha_warmup_steps"},
    "optim": {"lr": "lr", "epochs": "epochs", "minibatches": "minibatches",
              "buffer_size": "buffer_size", "ed_lr": "ed_lr", "ed_epochs": "ed_epochs",
              "ed_minibatches": "ed_minibatches", "optim_alpha": "optim_alpha",
              "optim_eps": "optim_eps", "use_obs_norm": "use_obs_norm",
              "use_orthogonal_init": "use_orthogonal_init",
              "num_parallel_envs": "num_parallel_envs", "max_env_steps": "max_env_steps"},
    "logging": {"eval_interval": "eval_interval", "eval_episodes": "eval_episodes",
                "checkpoint_interval": "checkpoint_interval",
                "stop_at_test_return": "stop_at_test_return"},
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(path, section, key, raw, field_name):
    ftype = _FIELD_TYPES[field_name]
    try:
        if ftype == "bool":
            lowered = raw.strip().lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{path}: [{section}] {key} = {raw!r}: {exc}") from exc


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        keys = _SECTION_KEYS[section]
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"{path}: [{section}] unknown key {key!r}")
            setattr(cfg, keys[key], _convert(path, section, key, raw, keys[key]))
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


def config_text(cfg: RunConfig) -> str:
    """Canonical INI snapshot of a config (used for manifests and hashing)."""
    parser = configparser.ConfigParser()
    for section, keys in _SECTION_KEYS.items():
        parser[section] = {}
        for key, field_name in keys.items():
            value = getattr(cfg, field_name)
            parser[section][key] = str(value)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()[:16]


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(config_text(cfg))
