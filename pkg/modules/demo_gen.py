# modules/demo_gen.py
"""
Demonstration data for behavior cloning.

- generate_oracle_demos: exhaustive greedy search (every tool is executed at every
  step, the best one is kept), the training-free pipeline analog.
- perturb_order / perturb_tools / build_sft_set: exploration-driven perturbation.
  Order perturbation appends permuted copies of a Bernoulli(alpha_t) subset;
  tool perturbation resamples every tool from (1 - alpha_m) P(m|t) + alpha_m U(m|t),
  where P(m|t) is the empirical tool frequency of the input set. A permuted copy
  whose tools are then resampled is tagged order+tool-perturbed.
- DemoSet files are JSON lines: one header record, then one record per item.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import ConfigError, canonical_json, digest, require
from .synth_env import EnvConfig, EnvState, apply_tool, clean_state, init_state, measure

log = logging.getLogger(__name__)

DEMO_FORMAT = "demoset"
DEMO_VERSION = 1

ORACLE = "oracle"
ORDER_PERTURBED = "order-perturbed"
TOOL_PERTURBED = "tool-perturbed"
ORDER_TOOL_PERTURBED = "order+tool-perturbed"  # permuted copy whose tools were then resampled
PROVENANCES = (ORACLE, ORDER_PERTURBED, TOOL_PERTURBED, ORDER_TOOL_PERTURBED)

# rng stream tags
_TAG_ORDER = 101
_TAG_TOOLS = 102


class EmptyToolSet(KeyError):
    pass


class DemoFormatError(ValueError):
    pass


# ---------- types


@dataclass(frozen=True, eq=False)
class Trajectory:
    steps: tuple[tuple[str, str], ...]
    states: tuple[EnvState, ...]
    final_metrics: np.ndarray

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def tasks(self) -> tuple[str, ...]:
        return tuple(t for t, _ in self.steps)

    @property
    def tools(self) -> tuple[str, ...]:
        return tuple(m for _, m in self.steps)

    def same_as(self, other: "Trajectory") -> bool:
        return (
            self.steps == other.steps
            and len(self.states) == len(other.states)
            and all(a.same_as(b) for a, b in zip(self.states, other.states))
            and np.array_equal(self.final_metrics, other.final_metrics)
        )


@dataclass(frozen=True, eq=False)
class DemoItem:
    initial: EnvState  # low-quality input
    reference: EnvState  # clean target (d = 0)
    trajectory: Trajectory
    provenance: str = ORACLE
    tool_calls: int = 0  # tool executions the generator spent on this item

    @property
    def order_perturbed(self) -> bool:
        return self.provenance in (ORDER_PERTURBED, ORDER_TOOL_PERTURBED)

    @property
    def tool_perturbed(self) -> bool:
        return self.provenance in (TOOL_PERTURBED, ORDER_TOOL_PERTURBED)


@dataclass(frozen=True, eq=False)
class DemoSet:
    env: EnvConfig
    items: tuple[DemoItem, ...]

    def __post_init__(self):
        if not self.items:
            raise ValueError("DemoSet must be non-empty")

    def __len__(self) -> int:
        return len(self.items)

    def provenance_counts(self) -> dict[str, int]:
        c = Counter(it.provenance for it in self.items)
        return {k: int(c.get(k, 0)) for k in PROVENANCES}

    def perturbation_counts(self) -> dict[str, int]:
        """Items carrying each perturbation; a copy that went through both counts in both."""
        return {
            "order_perturbed": sum(1 for it in self.items if it.order_perturbed),
            "tool_perturbed": sum(1 for it in self.items if it.tool_perturbed),
        }

    def same_as(self, other: "DemoSet") -> bool:
        return len(self) == len(other) and all(
            a.initial.same_as(b.initial)
            and a.trajectory.same_as(b.trajectory)
            and a.provenance == b.provenance
            for a, b in zip(self.items, other.items)
        )


@dataclass(frozen=True)
class EdpConfig:
    alpha_t: float = 0.3
    alpha_m: float = 0.4
    seed: int = 0

    def __post_init__(self):
        problems: list[str] = []
        require(problems, 0.0 <= self.alpha_t <= 1.0, "edp.alpha_t", "must be in [0, 1]")
        require(problems, 0.0 <= self.alpha_m <= 1.0, "edp.alpha_m", "must be in [0, 1]")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return {"alpha_t": float(self.alpha_t), "alpha_m": float(self.alpha_m), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, raw: Mapping, seed: int = 0, path: str = "edp") -> "EdpConfig":
        try:
            return cls(
                alpha_t=float(raw.get("alpha_t", 0.3)),
                alpha_m=float(raw.get("alpha_m", 0.4)),
                seed=int(raw.get("seed", seed)),
            )
        except ConfigError as e:
            raise ConfigError([m.replace("edp.", f"{path}.", 1) for m in e.problems]) from None
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}: {e}") from None


# ---------- replay


def replay(config: EnvConfig, initial: EnvState, steps: Sequence[tuple[str, str]]) -> Trajectory:
    states = [initial]
    s = initial
    for task_id, tool_id in steps:
        tool = config.tool(tool_id)
        if tool.task_id != task_id:
            raise ValueError(f"tool {tool_id} does not serve task {task_id}")
        s = apply_tool(s, tool, config)
        states.append(s)
    return Trajectory(steps=tuple(steps), states=tuple(states), final_metrics=measure(s, config))


def replay_consistent(config: EnvConfig, item: DemoItem) -> bool:
    again = replay(config, item.initial, item.trajectory.steps)
    return again.same_as(item.trajectory)


# ---------- oracle generation


def greedy_score(state: EnvState, config: EnvConfig) -> float:
    return float(np.mean(measure(state, config)))


def oracle_episode(config: EnvConfig, initial: EnvState) -> DemoItem:
    """Greedy search: execute every tool, keep the best, stop when nothing improves."""
    s = initial
    score = greedy_score(s, config)
    steps: list[tuple[str, str]] = []
    calls = 0
    while s.step < config.max_horizon:
        best = None
        for tool in config.tools:
            nxt = apply_tool(s, tool, config)
            calls += 1
            sc = greedy_score(nxt, config)
            if best is None or sc > best[0]:
                best = (sc, tool, nxt)
        if best is None or not best[0] > score:
            break
        score, tool, s = best
        steps.append((tool.task_id, tool.tool_id))
    traj = replay(config, initial, steps)
    return DemoItem(
        initial=initial,
        reference=clean_state(config),
        trajectory=traj,
        provenance=ORACLE,
        tool_calls=calls,
    )


def generate_oracle_demos(config: EnvConfig, n: int, seed, workers: int = 1) -> DemoSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    seeds = [_seed_tuple(seed, i) for i in range(n)]

    def one(i: int) -> DemoItem:
        return oracle_episode(config, init_state(config, seeds[i]))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            items = list(ex.map(one, range(n)))
    else:
        items = [one(i) for i in range(n)]
    log.info("generated %d oracle demos (%d tool executions)", n, sum(it.tool_calls for it in items))
    return DemoSet(env=config, items=tuple(items))


def _seed_tuple(seed, *rest) -> list[int]:
    base = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    return [int(x) for x in base] + [int(x) for x in rest]


# ---------- exploration-driven perturbation


def perturb_order(demos: DemoSet, cfg: EdpConfig) -> DemoSet:
    config = demos.env
    copies: list[DemoItem] = []
    for i, item in enumerate(demos.items):
        rng = np.random.default_rng(_seed_tuple(cfg.seed, _TAG_ORDER, i))
        if not rng.random() < cfg.alpha_t:
            continue
        steps = item.trajectory.steps
        perm = rng.permutation(len(steps))
        new_steps = tuple(steps[j] for j in perm)
        copies.append(
            replace(
                item,
                trajectory=replay(config, item.initial, new_steps),
                provenance=ORDER_PERTURBED,
                tool_calls=0,
            )
        )
    if copies:
        log.debug("order perturbation appended %d of %d items", len(copies), len(demos))
    return DemoSet(env=config, items=demos.items + tuple(copies))


def tool_distribution(demos: DemoSet) -> dict[str, np.ndarray]:
    """Empirical P(m|t) per task, over the task's registered tools in config order."""
    config = demos.env
    counts = {t.task_id: np.zeros(len(config.tools_for(t.task_id))) for t in config.tasks}
    for item in demos.items:
        for task_id, tool_id in item.trajectory.steps:
            if task_id not in counts:
                raise EmptyToolSet(f"task {task_id!r} has no registered tools")
            tools = [x.tool_id for x in config.tools_for(task_id)]
            counts[task_id][tools.index(tool_id)] += 1
    out = {}
    for task_id, c in counts.items():
        k = len(c)
        # tasks never seen in the demos fall back to uniform
        out[task_id] = c / c.sum() if c.sum() > 0 else np.full(k, 1.0 / k)
    return out


def mixture_distribution(base: np.ndarray, alpha_m: float) -> np.ndarray:
    k = len(base)
    return (1.0 - alpha_m) * np.asarray(base, dtype=float) + alpha_m * np.full(k, 1.0 / k)


def sample_tool(rng: np.random.Generator, base: np.ndarray, alpha_m: float) -> int:
    """Draw from the mixture: uniform with probability alpha_m, else from `base`."""
    k = len(base)
    if rng.random() < alpha_m:
        return int(rng.integers(k))
    cdf = np.cumsum(base)
    j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(j, k - 1)


def perturb_tools(demos: DemoSet, cfg: EdpConfig) -> DemoSet:
    config = demos.env
    dist = tool_distribution(demos)
    items: list[DemoItem] = []
    for i, item in enumerate(demos.items):
        rng = np.random.default_rng(_seed_tuple(cfg.seed, _TAG_TOOLS, i))
        new_steps = []
        for task_id, tool_id in item.trajectory.steps:
            tools = config.tools_for(task_id)
            if not tools:
                raise EmptyToolSet(f"task {task_id!r} has no registered tools")
            j = sample_tool(rng, dist[task_id], cfg.alpha_m)
            new_steps.append((task_id, tools[j].tool_id))
        new_steps = tuple(new_steps)
        if new_steps == item.trajectory.steps:
            items.append(item)
            continue
        items.append(
            replace(
                item,
                trajectory=replay(config, item.initial, new_steps),
                provenance=ORDER_TOOL_PERTURBED if item.order_perturbed else TOOL_PERTURBED,
            )
        )
    return DemoSet(env=config, items=tuple(items))


def build_sft_set(demos: DemoSet, cfg: EdpConfig) -> DemoSet:
    return perturb_tools(perturb_order(demos, cfg), cfg)


# ---------- summaries


def tool_entropy(demos: DemoSet) -> dict[str, float]:
    """Shannon entropy (nats) of the empirical per-task tool distribution."""
    out = {}
    for task_id, p in tool_distribution(demos).items():
        q = p[p > 0]
        out[task_id] = float(-np.sum(q * np.log(q)))
    return out


def demo_summary(demos: DemoSet) -> dict:
    lengths = Counter(len(it.trajectory) for it in demos.items)
    tools = Counter(m for it in demos.items for _, m in it.trajectory.steps)
    ent = tool_entropy(demos)
    return {
        "records": len(demos),
        "provenance": demos.provenance_counts(),
        "perturbations": demos.perturbation_counts(),
        "length_histogram": {int(k): int(v) for k, v in sorted(lengths.items())},
        "tool_frequencies": {t.tool_id: int(tools.get(t.tool_id, 0)) for t in demos.env.tools},
        "tool_entropy": ent,
        "mean_tool_entropy": float(np.mean(list(ent.values()))) if ent else 0.0,
        "mean_length": float(np.mean([len(it.trajectory) for it in demos.items])),
        "oracle_tool_calls": int(sum(it.tool_calls for it in demos.items)),
    }


# ---------- file format


def _record(item: DemoItem) -> dict:
    return {
        "initial_d": item.initial.d.tolist(),
        "initial_p": item.initial.p.tolist(),
        "steps": [[t, m] for t, m in item.trajectory.steps],
        "provenance": item.provenance,
        "tool_calls": int(item.tool_calls),
    }


def write_demos(demos: DemoSet, p) -> Path:
    path = Path(p)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": DEMO_FORMAT,
        "version": DEMO_VERSION,
        "env_digest": demos.env.digest,
        "records": len(demos),
    }
    lines = [canonical_json(header)] + [canonical_json(_record(it)) for it in demos.items]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def demos_digest(demos: DemoSet) -> str:
    return digest([_record(it) for it in demos.items])


def read_demos(p, config: EnvConfig) -> DemoSet:
    path = Path(p)
    try:
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    except OSError as e:
        raise DemoFormatError(f"{path}: {e}") from None
    if not lines:
        raise DemoFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DemoFormatError(f"{path}:1: bad header ({e})") from None
    if header.get("format") != DEMO_FORMAT or header.get("version") != DEMO_VERSION:
        raise DemoFormatError(f"{path}:1: not a {DEMO_FORMAT} v{DEMO_VERSION} file")
    if header.get("env_digest") != config.digest:
        log.warning("%s was written for a different env config", path)
    items = []
    for n, ln in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(ln)
            initial = EnvState.make(rec["initial_d"], rec["initial_p"], 0)
            steps = tuple((str(t), str(m)) for t, m in rec["steps"])
            prov = rec.get("provenance", ORACLE)
            if prov not in PROVENANCES:
                raise ValueError(f"unknown provenance {prov!r}")
            items.append(
                DemoItem(
                    initial=initial,
                    reference=clean_state(config),
                    trajectory=replay(config, initial, steps),
                    provenance=prov,
                    tool_calls=int(rec.get("tool_calls", 0)),
                )
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
            raise DemoFormatError(f"{path}:{n}: {e}") from None
    if not items:
        raise DemoFormatError(f"{path}: no records")
    return DemoSet(env=config, items=tuple(items))
