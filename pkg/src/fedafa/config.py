"""Experiment configuration: a flat ``key = value`` file with INI sections.

Example::

    [run]
    seed = 0
    method = fedafa

    [fedafa]
    lam = 0.6
    p_d = 0.5

Unknown keys or sections are errors. ``FEDAFA_SEED`` in the environment
overrides ``[run] seed``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, fields
from typing import Any, Optional

METHODS = ("local", "fedavg_ft", "fedavg_ros", "fedafa", "fedafa_loc")
EVAL_SETS = ("global", "local")


class ConfigError(ValueError):
    pass


def _field(section: str, default, **kw):
    return dataclasses.field(default=default, metadata={"section": section, **kw})


@dataclass(frozen=True)
class ExperimentConfig:
    # run
    seed: int = _field("run", 0)
    method: str = _field("run", "fedafa")
    workers: int = _field("run", 1)
    eval_on: str = _field("run", "global")
    # data
    num_classes: int = _field("data", 8)
    dim: int = _field("data", 16)
    n_per_class: int = _field("data", 600)
    imbalance_factor: float = _field("data", 100.0)
    cluster_spread: float = _field("data", 0.35)
    test_per_class: int = _field("data", 250)
    test_fraction: float = _field("data", 0.2)
    # partition
    num_clients: int = _field("partition", 10)
    alpha: float = _field("partition", 0.2)
    # model
    hidden: tuple = _field("model", (64, 64, 32))
    boundary_index: int = _field("model", 1)
    # federated training
    rounds: int = _field("train", 60)
    clients_per_round: int = _field("train", 5)
    local_epochs: int = _field("train", 5)
    batch_size: int = _field("train", 64)
    lr: float = _field("train", 0.05)
    momentum: float = _field("train", 0.9)
    weight_decay: float = _field("train", 5e-4)
    # personalization
    personal_epochs: int = _field("personalize", 1)
    personal_lr: float = _field("personalize", 0.05)
    local_only_epochs: int = _field("personalize", 150)
    every_round: bool = _field("personalize", False)
    # fedafa
    lam: float = _field("fedafa", 0.6)
    p_d: float = _field("fedafa", 0.5)
    perturb_steps: int = _field("fedafa", 10)
    step_size: Optional[float] = _field("fedafa", None)
    step_scale: float = _field("fedafa", 0.1)
    max_attempts_per_slot: int = _field("fedafa", 5)
    perturb_classifier: str = _field("fedafa", "personalized")

    def __post_init__(self):
        validate(self)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.dim, *self.hidden, self.num_classes)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)



def validate(c: ExperimentConfig) -> None:
    def need(ok: bool, msg: str):
        if not ok:
            raise ConfigError(msg)

    need(c.method in METHODS, f"method must be one of {METHODS}, got {c.method!r}")
    need(c.eval_on in EVAL_SETS, f"eval_on must be one of {EVAL_SETS}, got {c.eval_on!r}")
    need(0.0 <= c.lam <= 1.0, f"lam must lie in [0, 1], got {c.lam}")
    need(0.0 < c.p_d < 1.0, f"p_d must lie in (0, 1), got {c.p_d}")
    need(c.alpha > 0, f"alpha must be > 0, got {c.alpha}")
    need(c.imbalance_factor >= 1, f"imbalance_factor must be >= 1, got {c.imbalance_factor}")
    need(c.num_classes >= 2 and c.dim >= 2, "num_classes and dim must be >= 2")
    need(c.n_per_class >= 1 and c.test_per_class >= 1, "per-class counts must be positive")
    need(c.cluster_spread >= 0, "cluster_spread must be >= 0")
    need(0.0 <= c.test_fraction < 1.0, "test_fraction must lie in [0, 1)")
    need(c.num_clients >= 1, "num_clients must be >= 1")
    need(1 <= c.clients_per_round <= c.num_clients, "clients_per_round must lie in [1, num_clients]")
    need(c.rounds >= 0 and c.local_epochs >= 0 and c.personal_epochs >= 0 and c.local_only_epochs >= 0,
         "round and epoch counts must be >= 0")
    need(c.batch_size >= 1, "batch_size must be >= 1")
    need(c.lr >= 0 and c.personal_lr >= 0, "learning rates must be >= 0")
    need(0.0 <= c.momentum < 1.0, "momentum must lie in [0, 1)")
    need(c.weight_decay >= 0, "weight_decay must be >= 0")
    need(len(c.hidden) >= 1 and all(h >= 1 for h in c.hidden), "hidden must list >= 1 positive widths")
    need(0 <= c.boundary_index < len(c.hidden),
         f"boundary_index must lie in [0, {len(c.hidden) - 1}], got {c.boundary_index}")
    need(c.perturb_steps >= 1, "perturb_steps must be >= 1")
    need(c.step_size is None or c.step_size > 0, "step_size must be > 0")
    need(c.step_scale > 0, "step_scale must be > 0")
    need(c.max_attempts_per_slot >= 1, "max_attempts_per_slot must be >= 1")
    need(c.perturb_classifier in ("personalized", "global"),
         "perturb_classifier must be 'personalized' or 'global'")
    need(c.workers >= 1, "workers must be >= 1")


DESK_DEFAULTS = ExperimentConfig()

_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def coerce(name: str, text: str) -> Any:
    """Parse one textual value into the type of field ``name``."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    default = _FIELDS[name].default
    text = text.strip()
    try:
        if name == "step_size":
            return None if text.lower() in ("none", "auto", "") else float(text)
        if isinstance(default, tuple):
            return tuple(int(t) for t in text.split(",") if t.strip())
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r} ({exc})") from None


def dumps(c: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for f in fields(c):
        section = f.metadata["section"]
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, f.name, _format(getattr(c, f.name)))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def loads(text: str, base: ExperimentConfig = DESK_DEFAULTS) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    changes = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            if _FIELDS[key].metadata["section"] != section:
                raise ConfigError(f"key {key!r} belongs in [{_FIELDS[key].metadata['section']}], not [{section}]")
            changes[key] = coerce(key, value)
    return base.replace(**changes)


def load(path, seed: Optional[int] = None) -> ExperimentConfig:
    """Read a config file; explicit ``seed`` wins, then ``FEDAFA_SEED``, then the file."""
    with open(path) as fh:
        cfg = loads(fh.read())
    return apply_seed(cfg, seed)


def apply_seed(cfg: ExperimentConfig, seed: Optional[int] = None) -> ExperimentConfig:
    if seed is not None:
        return cfg.replace(seed=seed)
    env = os.environ.get("FEDAFA_SEED")
    if env:
        try:
            return cfg.replace(seed=int(env))
        except ValueError:
            raise ConfigError(f"FEDAFA_SEED must be an integer, got {env!r}") from None
    return cfg
