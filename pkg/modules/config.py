# modules/config.py

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping

import numpy as np
import yaml

if TYPE_CHECKING:  # pragma: no cover
    from .demo_gen import EdpConfig
    from .mc_pool import PoolConfig
    from .policy import SftConfig
    from .rl_trainer import EvalConfig, TrainConfig
    from .synth_env import EnvConfig

LOG_ENV_VAR = "AGENT_LOG_LEVEL"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class ConfigError(ValueError):
    """Invalid configuration; the message lists every offending field path."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def load_cfg(p) -> dict:
    path = Path(p)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    with open(path, "r", encoding="utf-8") as f:
        cfg = yaml.safe_load(f)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def setup_logging(level: str | None = None) -> None:
    """Configure root logging once; verbosity comes from AGENT_LOG_LEVEL."""
    name = (level or os.environ.get(LOG_ENV_VAR) or "INFO").upper()
    lvl = getattr(logging, name, None)
    if not isinstance(lvl, int):
        lvl = logging.INFO
    logging.basicConfig(level=lvl, format=LOG_FORMAT)
    logging.getLogger().setLevel(lvl)


# ---------- canonical rendering / digests


def _plain(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return [_plain(x) for x in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    return obj


def canonical_json(obj: Any) -> str:
    """Stable JSON text: sorted keys, no whitespace, repr-exact floats."""
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=True)


def digest(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------- small validation helpers shared by the sub-configs


def require(problems: list[str], ok: bool, path: str, msg: str) -> None:
    if not ok:
        problems.append(f"{path}: {msg}")


def section(raw: Mapping | None, path: str, problems: list[str]) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        problems.append(f"{path}: must be a mapping")
        return {}
    return dict(raw)


# ---------- experiment composition


@dataclass(frozen=True)
class ExperimentConfig:
    env: "EnvConfig"
    edp: "EdpConfig"
    sft: "SftConfig"
    train: "TrainConfig"
    pool: "PoolConfig"
    eval: "EvalConfig"
    seed: int
    out_dir: Path
    n_demos: int = 200
    source: str = field(default="<inline>")

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "edp": self.edp.to_dict(),
            "sft": self.sft.to_dict(),
            "train": self.train.to_dict(),
            "pool": self.pool.to_dict(),
            "eval": self.eval.to_dict(),
            "seed": int(self.seed),
            "n_demos": int(self.n_demos),
        }

    @property
    def digest(self) -> str:
        return digest(self.to_dict())


def load_experiment_config(p, overrides: Mapping | None = None) -> ExperimentConfig:
    """
    Read an experiment YAML and build every sub-config.

    `env` may be a path (relative to the experiment file) or an inline mapping.
    `overrides` is a flat {"section.key": value} mapping applied before validation
    (the CLI uses it for --seed, --alpha-t, --group-size, ...).
    """
    path = Path(p)
    raw = load_cfg(path)
    return experiment_from_dict(raw, base_dir=path.parent, overrides=overrides, source=str(path))


def apply_overrides(raw: dict, overrides: Mapping | None) -> dict:
    out = json.loads(json.dumps(raw, default=str))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: cannot override inside a non-mapping")
        node[parts[-1]] = val
    return out


def experiment_from_dict(
    raw: Mapping,
    base_dir: Path | None = None,
    overrides: Mapping | None = None,
    source: str = "<inline>",
) -> ExperimentConfig:
    from .demo_gen import EdpConfig
    from .mc_pool import PoolConfig
    from .policy import SftConfig
    from .rl_trainer import EvalConfig, TrainConfig
    from .synth_env import EnvConfig

    raw = apply_overrides(dict(raw), overrides)
    problems: list[str] = []

    if "seed" not in raw or raw.get("seed") is None:
        problems.append("seed: required (no wall-clock seeding)")
        seed = 0
    else:
        try:
            seed = int(raw["seed"])
            require(problems, seed >= 0, "seed", "must be a non-negative integer")
        except (TypeError, ValueError):
            problems.append("seed: must be an integer")
            seed = 0

    env_raw = raw.get("env", "env_default.yaml")
    env = None
    try:
        if isinstance(env_raw, str):
            env_path = Path(env_raw)
            if not env_path.is_absolute() and base_dir is not None:
                env_path = base_dir / env_path
            env = EnvConfig.from_file(env_path)
        elif isinstance(env_raw, Mapping):
            env = EnvConfig.from_dict(env_raw)
        else:
            problems.append("env: must be a path or a mapping")
    except ConfigError as e:
        problems.extend(f"env.{m}" if not m.startswith("env") else m for m in e.problems)
    except ValueError as e:
        problems.append(f"env: {e}")

    subs = {}
    for name, cls in (
        ("edp", EdpConfig),
        ("sft", SftConfig),
        ("train", TrainConfig),
        ("pool", PoolConfig),
        ("eval", EvalConfig),
    ):
        sec = section(raw.get(name), name, problems)
        try:
            subs[name] = cls.from_dict(sec, seed=seed, path=name)
        except ConfigError as e:
            problems.extend(e.problems)

    n_demos = raw.get("n_demos", 200)
    try:
        n_demos = int(n_demos)
        require(problems, n_demos >= 1, "n_demos", "must be >= 1")
    except (TypeError, ValueError):
        problems.append("n_demos: must be an integer")

    if problems:
        raise ConfigError(problems)

    return ExperimentConfig(
        env=env,
        seed=seed,
        out_dir=Path(raw.get("out_dir", "out")),
        n_demos=n_demos,
        source=source,
        **subs,
    )
