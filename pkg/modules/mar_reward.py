# modules/mar_reward.py
"""
Multi-dimensional adaptive reward.

Per training step, with r the batch-mean terminal metric vector:

    omega_hat = 1 - clip((r - ema) / ema, -eps, eps)     (against the pre-update ema)
    weights   = softmax(omega_hat)
    ema       = (1 - beta) * r + beta * ema

Within one rollout group each metric column is standardized on its own
(population std, zero column when std < 1e-8) and the columns are combined
with `weights`. Metrics that fall behind their running average gain weight.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

log = logging.getLogger(__name__)

STD_GUARD = 1e-8
EMA_FLOOR = 1e-6

VANILLA = "vanilla"
NO_DECOUPLE = "no_decouple"
NO_WEIGHTS = "no_weights"
MAR = "mar"
COUPLED = "coupled"
REWARD_MODES = (VANILLA, NO_DECOUPLE, NO_WEIGHTS, MAR, COUPLED)


class UnknownMode(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MarState:
    ema: np.ndarray | None  # None until the first batch is observed
    weights: np.ndarray
    epsilon: float = 0.2
    beta: float = 0.9
    omega_hat: np.ndarray | None = None  # last deviation scores, for telemetry

    @classmethod
    def initial(cls, num_metrics: int, epsilon: float = 0.2, beta: float = 0.9) -> "MarState":
        if num_metrics < 1:
            raise ValueError("num_metrics must be >= 1")
        if not epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0.0 <= beta < 1.0:
            raise ValueError("beta must be in [0, 1)")
        return cls(ema=None, weights=np.full(num_metrics, 1.0 / num_metrics), epsilon=epsilon, beta=beta)

    @property
    def num_metrics(self) -> int:
        return len(self.weights)

    def to_dict(self) -> dict:
        return {
            "ema": None if self.ema is None else self.ema.tolist(),
            "weights": self.weights.tolist(),
            "epsilon": float(self.epsilon),
            "beta": float(self.beta),
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "MarState":
        ema = raw.get("ema")
        return cls(
            ema=None if ema is None else np.asarray(ema, dtype=float),
            weights=np.asarray(raw["weights"], dtype=float),
            epsilon=float(raw.get("epsilon", 0.2)),
            beta=float(raw.get("beta", 0.9)),
        )


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1)


def softmax(z) -> np.ndarray:
    z = _vec(z)
    w = np.exp(z - np.max(z))
    return w / np.sum(w)


def deviation_score(batch_mean_reward, state: MarState) -> np.ndarray:
    """1 minus the relative gap to the ema, clipped to [-epsilon, epsilon] before the subtraction."""
    r = _vec(batch_mean_reward)
    ema = r if state.ema is None else state.ema
    ema = np.maximum(ema, EMA_FLOOR)
    dev = np.clip((r - ema) / ema, -state.epsilon, state.epsilon)
    return 1.0 - dev


def update_ema(batch_mean_reward, state: MarState) -> MarState:
    """ema <- (1 - beta) r + beta ema; the first batch seeds it. Floored at EMA_FLOOR."""
    r = _vec(batch_mean_reward)
    if state.ema is None:
        ema = r
    else:
        ema = (1.0 - state.beta) * r + state.beta * state.ema
    return replace(state, ema=np.maximum(ema, EMA_FLOOR))


def normalize_weights(deviation_scores, state: MarState) -> MarState:
    """Softmax the raw scores into metric weights; the raw scores are kept for telemetry."""
    w_hat = _vec(deviation_scores)
    return replace(state, weights=softmax(w_hat), omega_hat=w_hat)


def mar_update(state: MarState, batch_mean_reward) -> MarState:
    """One step: deviation against the current ema, new weights, then the ema update."""
    r = _vec(batch_mean_reward)
    if state.ema is None:
        state = replace(state, ema=np.maximum(r, EMA_FLOOR))
    w_hat = deviation_score(r, state)
    state = normalize_weights(w_hat, state)
    return update_ema(r, state)


# ---------- group advantages


def standardize(v) -> np.ndarray:
    """(v - mean) / std; all zeros when the std is below STD_GUARD."""
    v = _vec(v)
    sd = float(np.std(v))
    if sd < STD_GUARD:
        return np.zeros_like(v)
    return (v - np.mean(v)) / sd


def decoupled_advantages(group) -> np.ndarray:
    """Per-metric column standardization over one rollout group (g x R)."""
    rewards = np.atleast_2d(np.asarray(group, dtype=float))
    mean = rewards.mean(axis=0)
    sd = rewards.std(axis=0)
    out = np.zeros_like(rewards)
    ok = sd >= STD_GUARD
    out[:, ok] = (rewards[:, ok] - mean[ok]) / sd[ok]
    return out


def aggregate_advantages(per_metric, weights) -> np.ndarray:
    """Weighted sum of per-metric advantages. Accepts a MarState or a plain weight vector."""
    w = weights.weights if isinstance(weights, MarState) else _vec(weights)
    return np.asarray(per_metric, dtype=float) @ w


def group_advantages(group, mode: str, state: MarState | None = None) -> np.ndarray:
    """
    Length-g advantage vector for one rollout group under a reward mode.
    Expects group as a g x R array of metric rewards (higher is better).
    vanilla and no_decouple standardize a summed reward; no_weights and mar
    standardize each metric column first. coupled standardizes the MAR-weighted sum.
    Returns zeros for a group whose rewards do not vary.
    """
    rewards = np.atleast_2d(np.asarray(group, dtype=float))
    R = rewards.shape[1]
    uniform = np.full(R, 1.0 / R)
    if mode == VANILLA:
        return standardize(rewards.sum(axis=1))
    if mode == NO_DECOUPLE:
        return standardize(rewards @ uniform)
    if mode == NO_WEIGHTS:
        return aggregate_advantages(decoupled_advantages(rewards), uniform)
    if mode in (MAR, COUPLED):
        w = uniform if state is None else state.weights
        if mode == MAR:
            return aggregate_advantages(decoupled_advantages(rewards), w)
        return standardize(rewards @ w)
    raise UnknownMode(f"unknown reward mode {mode!r}; expected one of {REWARD_MODES}")


baseline_reward_modes = group_advantages


def telemetry_row(step: int, batch_mean_reward, state: MarState, metric_ids) -> dict:
    """Flat dict for mar_telemetry.csv: step, then per metric the reward, ema, raw score and weight."""
    r = _vec(batch_mean_reward)
    row = {"step": int(step)}
    for k, mid in enumerate(metric_ids):
        row[f"reward_{mid}"] = float(r[k])
        row[f"ema_{mid}"] = float(state.ema[k]) if state.ema is not None else float("nan")
        row[f"omega_hat_{mid}"] = float(state.omega_hat[k]) if state.omega_hat is not None else 1.0
        row[f"weight_{mid}"] = float(state.weights[k])
    return row
