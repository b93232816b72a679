# modules/rl_trainer.py
"""
Group-rollout policy-gradient training (critic-free, one update per batch).

Per step: b initial states, g rollouts each, terminal per-metric rewards,
group-relative advantages under the configured reward mode, then

    theta += lr * mean_ij A_ij * sum_k grad log pi(a_k)

Random streams are keyed by indices, never by scheduling:

    training states   (seed, 1, step, i)
    held-out states   (seed, 2, j)
    training rollouts (seed, 3, step, i, j)
    eval rollouts     (seed, 4, j) and (seed, 6, j, k) for diversity groups
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .config import ConfigError, ExperimentConfig, digest, require
from .demo_gen import (
    DemoSet,
    EdpConfig,
    Trajectory,
    build_sft_set,
    demo_summary,
    generate_oracle_demos,
    oracle_episode,
)
from .diversity import DiversityReport, diversity_stats
from .mar_reward import (
    MAR,
    REWARD_MODES,
    MarState,
    UnknownMode,
    group_advantages,
    mar_update,
    telemetry_row,
)
from .mc_pool import ModelCallPool, PoolError
from .policy import (
    PolicyParams,
    decisions,
    log_prob,
    rollout,
    save_checkpoint,
    sft_update,
    trajectory_log_prob_grad,
)
from .synth_env import EnvConfig, EnvState, apply_tool, init_state, measure

# optional progress bar
try:
    from tqdm import tqdm
except Exception:  # pragma: no cover
    def tqdm(x, **kwargs):
        return x

log = logging.getLogger(__name__)

REPORT_FORMAT = "experiment-report"
REPORT_VERSION = 1

TAG_TRAIN_STATE = 1
TAG_EVAL_STATE = 2
TAG_TRAIN_ROLLOUT = 3
TAG_EVAL_ROLLOUT = 4
TAG_DIVERSITY_ROLLOUT = 6
TAG_DEMOS = 10

# pipeline switches and overrides per experiment mode; absent keys keep the config value
EXPERIMENT_MODES: dict[str, dict] = {
    "full": {},
    "vanilla": {"edp": False, "reward_mode": "vanilla"},
    "no_sft": {"sft": False},
    "no_rl": {"rl": False},
    "no_edp": {"edp": False},
    "no_alpha_t": {"alpha_t": 0.0},
    "no_alpha_m": {"alpha_m": 0.0},
    "no_mar": {"reward_mode": "no_decouple"},
    "no_decouple": {"reward_mode": "coupled"},
    "no_weights": {"reward_mode": "no_weights"},
}


class TrainStepError(RuntimeError):
    pass


class EvalError(RuntimeError):
    pass


# ---------- configs


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    group_size: int = 8
    max_parallel_rollouts: int = 128
    steps: int = 40
    lr: float = 0.3
    reward_mode: str = MAR
    mar_epsilon: float = 0.2
    mar_beta: float = 0.9
    mar_update: str = "batch"  # batch | group
    workers: int = 4
    progress: bool = False
    seed: int = 0

    def __post_init__(self):
        problems: list[str] = []
        require(problems, self.batch_size >= 1, "train.batch_size", "must be >= 1")
        require(problems, self.group_size >= 1, "train.group_size", "must be >= 1")
        require(problems, self.max_parallel_rollouts >= 1, "train.max_parallel_rollouts", "must be >= 1")
        require(problems, self.steps >= 0, "train.steps", "must be >= 0")
        require(problems, self.lr >= 0, "train.lr", "must be >= 0")
        require(problems, self.reward_mode in REWARD_MODES, "train.reward_mode", f"must be one of {REWARD_MODES}")
        require(problems, self.mar_epsilon > 0, "train.mar_epsilon", "must be > 0")
        require(problems, 0.0 <= self.mar_beta < 1.0, "train.mar_beta", "must be in [0, 1)")
        require(problems, self.mar_update in ("batch", "group"), "train.mar_update", "must be batch or group")
        require(problems, self.workers >= 1, "train.workers", "must be >= 1")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "group_size": self.group_size,
            "max_parallel_rollouts": self.max_parallel_rollouts,
            "steps": self.steps,
            "lr": float(self.lr),
            "reward_mode": self.reward_mode,
            "mar_epsilon": float(self.mar_epsilon),
            "mar_beta": float(self.mar_beta),
            "mar_update": self.mar_update,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: Mapping, seed: int = 0, path: str = "train") -> "TrainConfig":
        try:
            return cls(
                batch_size=int(raw.get("batch_size", 64)),
                group_size=int(raw.get("group_size", 8)),
                max_parallel_rollouts=int(raw.get("max_parallel_rollouts", 128)),
                steps=int(raw.get("steps", 40)),
                lr=float(raw.get("lr", 0.3)),
                reward_mode=str(raw.get("reward_mode", MAR)),
                mar_epsilon=float(raw.get("mar_epsilon", 0.2)),
                mar_beta=float(raw.get("mar_beta", 0.9)),
                mar_update=str(raw.get("mar_update", "batch")),
                workers=int(raw.get("workers", 4)),
                progress=bool(raw.get("progress", False)),
                seed=int(raw.get("seed", seed)),
            )
        except ConfigError as e:
            raise ConfigError([m.replace("train.", f"{path}.", 1) for m in e.problems]) from None
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}: {e}") from None


@dataclass(frozen=True)
class EvalConfig:
    n_states: int = 256
    diversity_states: int = 64
    diversity_group: int = 8
    oracle_baseline: bool = True
    seed: int = 0

    def __post_init__(self):
        problems: list[str] = []
        require(problems, self.n_states >= 1, "eval.n_states", "must be >= 1")
        require(problems, self.diversity_states >= 0, "eval.diversity_states", "must be >= 0")
        require(problems, self.diversity_group >= 2, "eval.diversity_group", "must be >= 2")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "diversity_states": self.diversity_states,
            "diversity_group": self.diversity_group,
            "oracle_baseline": bool(self.oracle_baseline),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: Mapping, seed: int = 0, path: str = "eval") -> "EvalConfig":
        try:
            return cls(
                n_states=int(raw.get("n_states", 256)),
                diversity_states=int(raw.get("diversity_states", 64)),
                diversity_group=int(raw.get("diversity_group", 8)),
                oracle_baseline=bool(raw.get("oracle_baseline", True)),
                seed=int(raw.get("seed", seed)),
            )
        except ConfigError as e:
            raise ConfigError([m.replace("eval.", f"{path}.", 1) for m in e.problems]) from None
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}: {e}") from None


# ---------- concurrent rollouts


class InFlightGauge:
    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def __enter__(self):
        with self._lock:
            self.current += 1
            self.peak = max(self.peak, self.current)
        return self

    def __exit__(self, *exc):
        with self._lock:
            self.current -= 1


def run_rollouts(
    params: PolicyParams,
    env: EnvConfig,
    jobs: Sequence[tuple[EnvState, tuple]],
    pool: ModelCallPool | None = None,
    workers: int = 1,
    max_parallel: int = 128,
    gauge: InFlightGauge | None = None,
) -> list[Trajectory]:
    """Run one rollout per (initial state, seed tuple); results come back in job order."""
    gauge = gauge or InFlightGauge()

    def one(job):
        initial, key = job
        with gauge:
            executor = pool.executor(key) if pool is not None else None
            return rollout(params, env, initial, list(key), executor=executor)

    if workers <= 1 or len(jobs) <= 1:
        return [one(j) for j in jobs]

    slots = threading.BoundedSemaphore(max_parallel)

    def bounded(job):
        try:
            return one(job)
        finally:
            slots.release()

    futures = []
    with ThreadPoolExecutor(max_workers=min(workers, max_parallel)) as ex:
        for job in jobs:
            slots.acquire()
            futures.append(ex.submit(bounded, job))
        return [f.result() for f in futures]


# ---------- one training step


@dataclass(frozen=True)
class StepReport:
    step: int
    metric_ids: tuple[str, ...]
    mean_reward: np.ndarray
    weights: np.ndarray
    omega_hat: np.ndarray
    ema: np.ndarray
    objective: float  # mean advantage-weighted log-likelihood before the update
    grad_norm: float
    mean_length: float
    distinct_fraction: float
    order_fraction: float
    tool_fraction: float
    peak_in_flight: int

    @property
    def worst_metric(self) -> float:
        return float(np.min(self.mean_reward))

    def to_row(self) -> dict:
        row = {"step": self.step}
        for k, mid in enumerate(self.metric_ids):
            row[f"reward_{mid}"] = float(self.mean_reward[k])
        for k, mid in enumerate(self.metric_ids):
            row[f"weight_{mid}"] = float(self.weights[k])
        row.update(
            {
                "worst_metric": self.worst_metric,
                "objective": self.objective,
                "grad_norm": self.grad_norm,
                "mean_length": self.mean_length,
                "distinct_fraction": self.distinct_fraction,
                "order_fraction": self.order_fraction,
                "tool_fraction": self.tool_fraction,
                "peak_in_flight": self.peak_in_flight,
            }
        )
        return row

    @property
    def digest(self) -> str:
        # peak_in_flight depends on the worker count
        row = self.to_row()
        row.pop("peak_in_flight")
        return digest(row)


def training_states(env: EnvConfig, seed: int, step: int, b: int) -> list[EnvState]:
    return [init_state(env, [seed, TAG_TRAIN_STATE, step, i]) for i in range(b)]


def train_step(
    params: PolicyParams,
    mar_state: MarState,
    config: TrainConfig,
    env: EnvConfig,
    pool: ModelCallPool | None = None,
    step: int = 0,
) -> tuple[PolicyParams, MarState, StepReport]:
    b, g = config.batch_size, config.group_size
    states = training_states(env, config.seed, step, b)
    jobs = [(states[i], (config.seed, TAG_TRAIN_ROLLOUT, step, i, j)) for i in range(b) for j in range(g)]
    gauge = InFlightGauge()
    try:
        trajs = run_rollouts(params, env, jobs, pool, config.workers, config.max_parallel_rollouts, gauge)
    except PoolError as e:
        raise TrainStepError(f"step {step}: {e}") from e
    groups = [trajs[i * g : (i + 1) * g] for i in range(b)]
    rewards = np.array([[t.final_metrics for t in grp] for grp in groups])  # (b, g, R)

    if config.mar_update == "group":
        adv = np.zeros((b, g))
        for i in range(b):
            mar_state = mar_update(mar_state, rewards[i].mean(axis=0))
            adv[i] = group_advantages(rewards[i], config.reward_mode, mar_state)
    else:
        mar_state = mar_update(mar_state, rewards.reshape(-1, rewards.shape[-1]).mean(axis=0))
        adv = np.array([group_advantages(rewards[i], config.reward_mode, mar_state) for i in range(b)])

    grad = np.zeros(params.shape)
    objective = 0.0
    n = b * g
    for i in range(b):
        for j in range(g):
            a = float(adv[i, j])
            if a == 0.0:
                continue
            t = groups[i][j]
            grad += a * trajectory_log_prob_grad(params, t, env)
            objective += a * sum(log_prob(params, s, h, k, env) for s, h, k in decisions(t, env))
    grad /= n
    new_params = params.step(grad, config.lr) if np.any(grad) else params

    div = diversity_stats(groups)
    report = StepReport(
        step=step,
        metric_ids=env.metric_ids,
        mean_reward=rewards.reshape(-1, rewards.shape[-1]).mean(axis=0),
        weights=mar_state.weights.copy(),
        omega_hat=np.ones(env.num_metrics) if mar_state.omega_hat is None else mar_state.omega_hat.copy(),
        ema=mar_state.ema.copy(),
        objective=objective / n,
        grad_norm=float(np.linalg.norm(grad)),
        mean_length=float(np.mean([len(t) for t in trajs])),
        distinct_fraction=div.distinct_fraction,
        order_fraction=div.order_fraction,
        tool_fraction=div.tool_fraction,
        peak_in_flight=gauge.peak,
    )
    log.debug("step %d: worst metric %.4f, grad norm %.4g", step, report.worst_metric, report.grad_norm)
    return new_params, mar_state, report


# ---------- evaluation


def heldout_states(env: EnvConfig, seed: int, n: int) -> list[EnvState]:
    return [init_state(env, [seed, TAG_EVAL_STATE, j]) for j in range(n)]


def _bucket(active: int) -> str:
    return str(active) if active < 3 else ">=3"


@dataclass(frozen=True)
class EvalReport:
    metric_ids: tuple[str, ...]
    per_metric: np.ndarray
    mean_length: float
    breakdown: dict  # active-degradation bucket -> {"episodes", per-metric means}
    diversity: DiversityReport
    oracle_per_metric: np.ndarray | None = None
    oracle_tool_calls: float | None = None  # tool executions per episode of the exhaustive search

    @property
    def worst_metric(self) -> float:
        return float(np.min(self.per_metric))

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.per_metric))

    @property
    def tool_calls(self) -> float:
        return self.mean_length

    def to_dict(self) -> dict:
        out = {
            "per_metric": {m: float(v) for m, v in zip(self.metric_ids, self.per_metric)},
            "worst_metric": self.worst_metric,
            "mean_score": self.mean_score,
            "mean_length": self.mean_length,
            "tool_calls_per_episode": self.tool_calls,
            "breakdown": self.breakdown,
            "diversity": self.diversity.summary(),
        }
        if self.oracle_per_metric is not None:
            out["oracle_per_metric"] = {m: float(v) for m, v in zip(self.metric_ids, self.oracle_per_metric)}
            out["oracle_tool_calls_per_episode"] = self.oracle_tool_calls
            out["tool_call_ratio"] = (
                self.oracle_tool_calls / self.tool_calls if self.tool_calls > 0 else None
            )
        return out

    def breakdown_frame(self) -> pd.DataFrame:
        rows = []
        for bucket, vals in self.breakdown.items():
            rows.append({"active": bucket, "episodes": vals["episodes"], **vals["per_metric"]})
        return pd.DataFrame(rows)


def evaluate(
    params: PolicyParams,
    env: EnvConfig,
    cfg: EvalConfig,
    pool: ModelCallPool | None = None,
    workers: int = 1,
    max_parallel: int = 128,
) -> EvalReport:
    states = heldout_states(env, cfg.seed, cfg.n_states)
    jobs = [(s, (cfg.seed, TAG_EVAL_ROLLOUT, j)) for j, s in enumerate(states)]
    try:
        trajs = run_rollouts(params, env, jobs, pool, workers, max_parallel)
    except PoolError as e:
        raise EvalError(f"held-out rollouts: {e}") from e
    finals = np.array([t.final_metrics for t in trajs])

    buckets: dict[str, list[int]] = {}
    for j, s in enumerate(states):
        buckets.setdefault(_bucket(s.active), []).append(j)
    breakdown = {
        k: {
            "episodes": len(idx),
            "per_metric": {m: float(v) for m, v in zip(env.metric_ids, finals[idx].mean(axis=0))},
        }
        for k, idx in sorted(buckets.items())
    }

    k_div = min(cfg.diversity_states, cfg.n_states)
    div_jobs = [
        (states[j], (cfg.seed, TAG_DIVERSITY_ROLLOUT, j, k))
        for j in range(k_div)
        for k in range(cfg.diversity_group)
    ]
    try:
        div_trajs = run_rollouts(params, env, div_jobs, pool, workers, max_parallel)
    except PoolError as e:
        raise EvalError(f"diversity rollouts: {e}") from e
    g = cfg.diversity_group
    groups = [div_trajs[j * g : (j + 1) * g] for j in range(k_div)]
    diversity = diversity_stats(groups, env.task_ids)

    oracle_pm = oracle_calls = None
    if cfg.oracle_baseline:
        oracle = [oracle_episode(env, s) for s in states]
        oracle_pm = np.array([o.trajectory.final_metrics for o in oracle]).mean(axis=0)
        oracle_calls = float(np.mean([o.tool_calls for o in oracle]))

    return EvalReport(
        metric_ids=env.metric_ids,
        per_metric=finals.mean(axis=0),
        mean_length=float(np.mean([len(t) for t in trajs])),
        breakdown=breakdown,
        diversity=diversity,
        oracle_per_metric=oracle_pm,
        oracle_tool_calls=oracle_calls,
    )


def tool_effect_table(env: EnvConfig, states: Sequence[EnvState]) -> pd.DataFrame:
    """Mean change of every metric when each tool is applied once to each state."""
    base = np.array([measure(s, env) for s in states])
    rows = []
    for tool in env.tools:
        after = np.array([measure(apply_tool(s, tool, env), env) for s in states])
        delta = (after - base).mean(axis=0)
        rows.append(
            {
                "task": tool.task_id,
                "tool": tool.tool_id,
                **{f"d_{m}": float(v) for m, v in zip(env.metric_ids, delta)},
                "d_mean": float(delta.mean()),
            }
        )
    return pd.DataFrame(rows)


# ---------- experiments


@dataclass
class ExperimentReport:
    mode: str
    config_digest: str
    metric_ids: tuple[str, ...]
    demos: dict
    sft_loglik: list[float]
    steps: list[StepReport]
    telemetry: list[dict]
    final: EvalReport
    params: PolicyParams
    mar_state: MarState
    elapsed_s: dict = field(default_factory=dict)

    def curve_frame(self) -> pd.DataFrame:
        return pd.DataFrame([s.to_row() for s in self.steps])

    def telemetry_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.telemetry)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "mode": self.mode,
            "config_digest": self.config_digest,
            "demos": self.demos,
            "sft_final_loglik": self.sft_loglik[-1] if self.sft_loglik else None,
            "rl_steps": len(self.steps),
            "step_digests": [s.digest for s in self.steps],
            "final": self.final.to_dict(),
            "params_digest": digest(self.params.theta),
            "mar_state": self.mar_state.to_dict(),
        }

    @property
    def digest(self) -> str:
        return digest(self.to_dict())


def resolve_mode(cfg: ExperimentConfig, mode: str) -> tuple[dict, EdpConfig, TrainConfig]:
    if mode not in EXPERIMENT_MODES:
        raise UnknownMode(f"unknown experiment mode {mode!r}; expected one of {tuple(EXPERIMENT_MODES)}")
    m = EXPERIMENT_MODES[mode]
    edp = cfg.edp
    if "alpha_t" in m:
        edp = replace(edp, alpha_t=m["alpha_t"])
    if "alpha_m" in m:
        edp = replace(edp, alpha_m=m["alpha_m"])
    train = cfg.train
    if "reward_mode" in m:
        train = replace(train, reward_mode=m["reward_mode"])
    plan = {"edp": m.get("edp", True), "sft": m.get("sft", True), "rl": m.get("rl", True)}
    return plan, edp, train


def prepare_demos(cfg: ExperimentConfig, workers: int = 1) -> DemoSet:
    return generate_oracle_demos(cfg.env, cfg.n_demos, [cfg.seed, TAG_DEMOS], workers=workers)


def run_experiment(
    cfg: ExperimentConfig,
    mode: str = "full",
    out_dir: Path | None = None,
    workers: int | None = None,
    demos: DemoSet | None = None,
) -> ExperimentReport:
    plan, edp, train = resolve_mode(cfg, mode)
    if workers is not None:
        train = replace(train, workers=int(workers))
    env = cfg.env
    timings: dict[str, float] = {}

    t0 = time.monotonic()
    if demos is None:
        demos = prepare_demos(cfg, train.workers)
    sft_set = build_sft_set(demos, edp) if plan["edp"] else demos
    timings["demos"] = time.monotonic() - t0

    params = PolicyParams.zeros(env)
    sft_loglik: list[float] = []
    if plan["sft"]:
        t0 = time.monotonic()
        res = sft_update(params, sft_set, cfg.sft)
        params, sft_loglik = res.params, res.loglik
        timings["sft"] = time.monotonic() - t0

    mar = MarState.initial(env.num_metrics, train.mar_epsilon, train.mar_beta)
    steps: list[StepReport] = []
    telemetry: list[dict] = []
    pool = ModelCallPool(cfg.pool, env)
    if plan["rl"]:
        t0 = time.monotonic()
        for step in tqdm(range(train.steps), desc=f"rl[{mode}]", disable=None if train.progress else True):
            params, mar, rep = train_step(params, mar, train, env, pool, step)
            steps.append(rep)
            telemetry.append(telemetry_row(step, rep.mean_reward, mar, env.metric_ids))
        timings["rl"] = time.monotonic() - t0

    t0 = time.monotonic()
    final = evaluate(params, env, cfg.eval, pool, train.workers, train.max_parallel_rollouts)
    timings["eval"] = time.monotonic() - t0

    report = ExperimentReport(
        mode=mode,
        config_digest=cfg.digest,
        metric_ids=env.metric_ids,
        demos={**demo_summary(sft_set), "oracle_records": len(demos)},
        sft_loglik=sft_loglik,
        steps=steps,
        telemetry=telemetry,
        final=final,
        params=params,
        mar_state=mar,
        elapsed_s=timings,
    )
    log.info(
        "%s: worst metric %.4f, distinct fraction %.3f (%.1fs)",
        mode,
        final.worst_metric,
        final.diversity.distinct_fraction,
        sum(timings.values()),
    )
    if out_dir is not None:
        write_experiment(report, cfg, Path(out_dir))
    return report


def write_experiment(report: ExperimentReport, cfg: ExperimentConfig, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    p = out_dir / "summary.json"
    p.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    written.append(p)
    if report.steps:
        p = out_dir / "train_curve.csv"
        report.curve_frame().to_csv(p, index=False)
        written.append(p)
        p = out_dir / "mar_telemetry.csv"
        report.telemetry_frame().to_csv(p, index=False)
        written.append(p)
    p = out_dir / "eval_breakdown.csv"
    report.final.breakdown_frame().to_csv(p, index=False)
    written.append(p)
    p = out_dir / "diversity_groups.csv"
    report.final.diversity.to_frame().to_csv(p, index=False)
    written.append(p)
    written.append(
        save_checkpoint(
            out_dir / "policy.json",
            report.params,
            cfg.env,
            extra={"mode": report.mode, "config_digest": report.config_digest, "mar_state": report.mar_state.to_dict()},
        )
    )
    return written


def run_sweep(
    cfg: ExperimentConfig,
    param: str,
    values: Sequence[float],
    mode: str = "full",
    workers: int | None = None,
) -> pd.DataFrame:
    """Run the pipeline once per value of edp.alpha_t or edp.alpha_m."""
    if param not in ("alpha_t", "alpha_m"):
        raise ValueError("sweep parameter must be alpha_t or alpha_m")
    demos = prepare_demos(cfg, workers or cfg.train.workers)
    rows = []
    for v in tqdm(list(values), desc=f"sweep[{param}]", disable=None if cfg.train.progress else True):
        sub = replace(cfg, edp=replace(cfg.edp, **{param: float(v)}))
        rep = run_experiment(sub, mode, workers=workers, demos=demos)
        div = rep.final.diversity
        rows.append(
            {
                param: float(v),
                "order_diverse_groups": div.groups_with_order_diversity,
                "distinct_fraction": div.distinct_fraction,
                "mean_tool_entropy": div.mean_tool_entropy,
                **{f"entropy_{t}": e for t, e in div.tool_entropy.items()},
                **{m: float(x) for m, x in zip(rep.metric_ids, rep.final.per_metric)},
                "worst_metric": rep.final.worst_metric,
            }
        )
    return pd.DataFrame(rows)
