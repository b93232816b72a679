# modules/policy.py
"""
Linear-softmax policy over the fixed action index space.

Actions are indexed 0..T-1 for tools in config order and T for TERMINATE.
Features summarize (state, history):

    x = [d / clip_max, tanh(p), step / max_horizon, task_counts / max_horizon, 1]

so ||x||^2 <= 2D + 3. Logits are theta @ x, masked to the valid actions, and

    grad_theta log pi(a | x) = outer(onehot(a) - pi, x)

which is exact (no autodiff involved).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import ConfigError, require
from .demo_gen import DemoSet, Trajectory
from .synth_env import (
    Action,
    EnvConfig,
    EnvState,
    ToolSpec,
    action_index,
    action_mask,
    apply_tool,
    measure,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "policy-checkpoint"
CHECKPOINT_VERSION = 1

Executor = Callable[[EnvState, ToolSpec], EnvState]


class InvalidAction(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------- features


@dataclass(frozen=True)
class FeatureSpec:
    num_degradations: int
    task_ids: tuple[str, ...]
    max_horizon: int
    clip_max: float

    @classmethod
    def for_env(cls, config: EnvConfig) -> "FeatureSpec":
        return cls(config.num_degradations, config.task_ids, config.max_horizon, config.clip_max)

    @property
    def dim(self) -> int:
        return 2 * self.num_degradations + 1 + len(self.task_ids) + 1

    def encode(self, state: EnvState, history: Sequence[tuple[str, str]]) -> np.ndarray:
        counts = np.zeros(len(self.task_ids))
        for task_id, _ in history:
            counts[self.task_ids.index(task_id)] += 1
        return np.concatenate(
            [
                state.d / self.clip_max,
                np.tanh(state.p),
                [state.step / self.max_horizon],
                counts / self.max_horizon,
                [1.0],
            ]
        )


@dataclass(frozen=True, eq=False)
class PolicyParams:
    theta: np.ndarray  # (num_actions, feature_dim)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float, copy=True)
        if theta.ndim != 2 or not np.all(np.isfinite(theta)):
            raise ValueError("theta must be a finite 2-D matrix")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, config: EnvConfig) -> "PolicyParams":
        return cls(np.zeros((config.num_actions, FeatureSpec.for_env(config).dim)))

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.theta.shape)

    def step(self, grad: np.ndarray, lr: float) -> "PolicyParams":
        return PolicyParams(self.theta + lr * grad)

    def same_as(self, other: "PolicyParams") -> bool:
        return np.array_equal(self.theta, other.theta)


def _check_history(state: EnvState, history: Sequence) -> None:
    if len(history) != state.step:
        raise ValueError(f"history has {len(history)} entries but state is at step {state.step}")


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    w = np.where(mask, np.exp(z), 0.0)
    return w / np.sum(w, axis=-1, keepdims=True)


def action_distribution(
    params: PolicyParams,
    state: EnvState,
    history: Sequence[tuple[str, str]],
    config: EnvConfig,
) -> np.ndarray:
    _check_history(state, history)
    x = FeatureSpec.for_env(config).encode(state, history)
    return masked_softmax(params.theta @ x, action_mask(state, config))


def log_prob_grad(
    params: PolicyParams,
    state: EnvState,
    history: Sequence[tuple[str, str]],
    action: int | Action,
    config: EnvConfig,
) -> np.ndarray:
    a = action_index(config, action) if isinstance(action, Action) else int(action)
    mask = action_mask(state, config)
    if not (0 <= a < config.num_actions) or not mask[a]:
        raise InvalidAction(f"action {a} is not valid at step {state.step}")
    _check_history(state, history)
    x = FeatureSpec.for_env(config).encode(state, history)
    pi = masked_softmax(params.theta @ x, mask)
    onehot = np.zeros(config.num_actions)
    onehot[a] = 1.0
    return np.outer(onehot - pi, x)


def log_prob(params, state, history, action: int, config: EnvConfig) -> float:
    pi = action_distribution(params, state, history, config)
    return float(np.log(pi[int(action)]))


# ---------- trajectories as decision sequences


def decisions(trajectory: Trajectory, config: EnvConfig, include_terminate: bool = True):
    """(state, history, action index) per decision; TERMINATE is added when it was a choice."""
    out = []
    steps = trajectory.steps
    for k, (task_id, tool_id) in enumerate(steps):
        out.append((trajectory.states[k], steps[:k], config.tool_index(tool_id)))
    if include_terminate and len(steps) < config.max_horizon:
        out.append((trajectory.states[len(steps)], steps, config.terminate_index))
    return out


def trajectory_log_prob_grad(params: PolicyParams, trajectory: Trajectory, config: EnvConfig) -> np.ndarray:
    g = np.zeros(params.shape)
    for state, history, a in decisions(trajectory, config):
        g += log_prob_grad(params, state, history, a, config)
    return g


def _design(demos: DemoSet, include_terminate: bool):
    config = demos.env
    spec = FeatureSpec.for_env(config)
    X, M, Y = [], [], []
    for item in demos.items:
        for state, history, a in decisions(item.trajectory, config, include_terminate):
            X.append(spec.encode(state, history))
            M.append(action_mask(state, config))
            Y.append(a)
    return np.array(X), np.array(M, dtype=bool), np.array(Y, dtype=int)


# ---------- behavior cloning


@dataclass(frozen=True)
class SftConfig:
    lr: float = 1.0
    epochs: int = 4000
    schedule: str = "constant"  # constant | cosine
    batch_size: int | None = None  # None = full batch
    include_terminate: bool = True
    seed: int = 0

    def __post_init__(self):
        problems: list[str] = []
        require(problems, self.lr >= 0, "sft.lr", "must be >= 0")
        require(problems, self.epochs >= 0, "sft.epochs", "must be >= 0")
        require(problems, self.schedule in ("constant", "cosine"), "sft.schedule", "must be constant or cosine")
        require(
            problems,
            self.batch_size is None or self.batch_size >= 1,
            "sft.batch_size",
            "must be >= 1 or null",
        )
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return {
            "lr": float(self.lr),
            "epochs": int(self.epochs),
            "schedule": self.schedule,
            "batch_size": self.batch_size,
            "include_terminate": bool(self.include_terminate),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, raw: Mapping, seed: int = 0, path: str = "sft") -> "SftConfig":
        try:
            bs = raw.get("batch_size")
            return cls(
                lr=float(raw.get("lr", 1.0)),
                epochs=int(raw.get("epochs", 4000)),
                schedule=str(raw.get("schedule", "constant")),
                batch_size=None if bs is None else int(bs),
                include_terminate=bool(raw.get("include_terminate", True)),
                seed=int(raw.get("seed", seed)),
            )
        except ConfigError as e:
            raise ConfigError([m.replace("sft.", f"{path}.", 1) for m in e.problems]) from None
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}: {e}") from None


@dataclass(frozen=True, eq=False)
class SftResult:
    params: PolicyParams
    loglik: list[float] = field(default_factory=list)  # mean log-likelihood before each epoch, plus final

    @property
    def final_loglik(self) -> float:
        return self.loglik[-1] if self.loglik else float("nan")


def _lr_at(cfg: SftConfig, epoch: int) -> float:
    if cfg.schedule == "cosine" and cfg.epochs > 0:
        return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
    return cfg.lr


def _mean_loglik_and_grad(theta, X, M, Y):
    P = masked_softmax(X @ theta.T, M)
    n = len(Y)
    ll = float(np.mean(np.log(P[np.arange(n), Y])))
    R = -P
    R[np.arange(n), Y] += 1.0
    return ll, (R.T @ X) / n


def sft_update(params: PolicyParams, demos: DemoSet, cfg: SftConfig | None = None, **kw) -> SftResult:
    """Gradient ascent on the mean log-likelihood of the demonstration actions."""
    cfg = cfg or SftConfig(**kw)
    X, M, Y = _design(demos, cfg.include_terminate)
    if len(Y) == 0:
        log.warning("demo set has no decisions; params unchanged")
        return SftResult(params=params, loglik=[])
    theta = np.array(params.theta, dtype=float)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        if cfg.batch_size is None or cfg.batch_size >= len(Y):
            ll, g = _mean_loglik_and_grad(theta, X, M, Y)
            history.append(ll)
            theta = theta + lr * g
        else:
            history.append(_mean_loglik_and_grad(theta, X, M, Y)[0])
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(Y))
            for s in range(0, len(Y), cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                _, g = _mean_loglik_and_grad(theta, X[idx], M[idx], Y[idx])
                theta = theta + lr * g
    history.append(_mean_loglik_and_grad(theta, X, M, Y)[0])
    log.info(
        "sft: %d decisions, %d epochs, mean log-lik %.4f -> %.4f",
        len(Y),
        cfg.epochs,
        history[0],
        history[-1],
    )
    return SftResult(params=PolicyParams(theta), loglik=history)


# ---------- rollout


def sample_index(rng: np.random.Generator, probs: np.ndarray) -> int:
    cdf = np.cumsum(probs)
    j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(j, len(probs) - 1)


def rollout(
    params: PolicyParams,
    config: EnvConfig,
    initial: EnvState,
    seed,
    executor: Executor | None = None,
) -> Trajectory:
    rng = np.random.default_rng(seed)
    run = executor or (lambda s, tool: apply_tool(s, tool, config))
    s = initial
    states = [initial]
    steps: list[tuple[str, str]] = []
    while True:
        pi = action_distribution(params, s, steps, config)
        a = sample_index(rng, pi)
        if a == config.terminate_index:
            break
        tool = config.tools[a]
        s = run(s, tool)
        steps.append((tool.task_id, tool.tool_id))
        states.append(s)
    return Trajectory(steps=tuple(steps), states=tuple(states), final_metrics=measure(s, config))


def greedy_action(params: PolicyParams, state: EnvState, history, config: EnvConfig) -> int:
    return int(np.argmax(action_distribution(params, state, history, config)))


# ---------- checkpoints


def save_checkpoint(p, params: PolicyParams, config: EnvConfig, extra: Mapping | None = None) -> Path:
    path = Path(p)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "env_digest": config.digest,
        "shape": list(params.shape),
        "theta": params.theta.ravel().tolist(),
    }
    if extra:
        doc["extra"] = dict(extra)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load_checkpoint(p, config: EnvConfig) -> tuple[PolicyParams, dict]:
    path = Path(p)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: {e}") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file")
    if doc.get("env_digest") != config.digest:
        raise CheckpointError(f"{path}: checkpoint was trained on a different env config")
    shape = tuple(doc.get("shape") or ())
    expected = (config.num_actions, FeatureSpec.for_env(config).dim)
    if shape != expected:
        raise CheckpointError(f"{path}: shape {shape} does not match {expected}")
    theta = np.asarray(doc["theta"], dtype=float).reshape(shape)
    return PolicyParams(theta), dict(doc.get("extra") or {})
