# modules/synth_env.py
"""
Synthetic degradation environment.

An EnvState stands in for an image: `d` holds residual degradation intensities
(the clean reference is d = 0) and `p` holds appearance features that tools can
inflate (sharpening, synthesized detail, contrast...). Tools are linear maps with
a clamp:

    d' = clamp(A @ d + b, 0, clip_max)
    p' = C @ p + e

Off-diagonal entries of A couple degradations, so the order of tool calls changes
the outcome. Fidelity-like metrics read d only; perceptual-like metrics also read
p, which lets some tools buy perceptual score at the cost of fidelity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .config import ConfigError, digest, load_cfg

log = logging.getLogger(__name__)

FIDELITY = "fidelity"
PERCEPTUAL = "perceptual"
METRIC_FORMS = ("exp_l2", "inv_l1", "max_comp", "logistic")


class HorizonExceeded(RuntimeError):
    pass


class EnvConfigError(ConfigError):
    pass


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# ---------- domain types


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    target: int  # index of the degradation this task removes


@dataclass(frozen=True, eq=False)
class ToolSpec:
    tool_id: str
    task_id: str
    A: np.ndarray
    b: np.ndarray
    C: np.ndarray
    e: np.ndarray
    exec_cost: float = 100.0  # simulated latency, ms

    def to_dict(self) -> dict:
        return {
            "tool_id": self.tool_id,
            "task_id": self.task_id,
            "A": self.A,
            "b": self.b,
            "C": self.C,
            "e": self.e,
            "exec_cost": float(self.exec_cost),
        }


@dataclass(frozen=True, eq=False)
class MetricDef:
    metric_id: str
    kind: str  # fidelity | perceptual
    form: str  # exp_l2 | inv_l1 | max_comp | logistic
    w_d: np.ndarray
    w_p: np.ndarray
    bias: float = 0.0
    gain: float = 1.0
    source_direction: str = "higher"  # lower-better sources are negated (1 - raw)

    def to_dict(self) -> dict:
        return {
            "metric_id": self.metric_id,
            "kind": self.kind,
            "form": self.form,
            "w_d": self.w_d,
            "w_p": self.w_p,
            "bias": float(self.bias),
            "gain": float(self.gain),
            "source_direction": self.source_direction,
        }


@dataclass(frozen=True)
class InitSpec:
    min_active: int = 1
    max_active: int = 4
    low: float = 0.3
    high: float = 1.2


@dataclass(frozen=True, eq=False)
class EnvConfig:
    degradations: tuple[str, ...]
    appearance: tuple[str, ...]
    tasks: tuple[TaskSpec, ...]
    tools: tuple[ToolSpec, ...]
    metric_defs: tuple[MetricDef, ...]
    max_horizon: int = 8
    clip_max: float = 2.0
    init: InitSpec = field(default_factory=InitSpec)

    def __post_init__(self):
        problems = validate_env(self)
        if problems:
            raise EnvConfigError(problems)

    # -- sizes / lookups

    @property
    def num_degradations(self) -> int:
        return len(self.degradations)

    @property
    def num_metrics(self) -> int:
        return len(self.metric_defs)

    @property
    def num_tools(self) -> int:
        return len(self.tools)

    @property
    def num_actions(self) -> int:
        return len(self.tools) + 1

    @property
    def terminate_index(self) -> int:
        return len(self.tools)

    @property
    def task_ids(self) -> tuple[str, ...]:
        return tuple(t.task_id for t in self.tasks)

    @property
    def metric_ids(self) -> tuple[str, ...]:
        return tuple(m.metric_id for m in self.metric_defs)

    def tool(self, tool_id: str) -> ToolSpec:
        for t in self.tools:
            if t.tool_id == tool_id:
                return t
        raise KeyError(f"unknown tool: {tool_id}")

    def tool_index(self, tool_id: str) -> int:
        for i, t in enumerate(self.tools):
            if t.tool_id == tool_id:
                return i
        raise KeyError(f"unknown tool: {tool_id}")

    def task_index(self, task_id: str) -> int:
        for i, t in enumerate(self.tasks):
            if t.task_id == task_id:
                return i
        raise KeyError(f"unknown task: {task_id}")

    def tools_for(self, task_id: str) -> tuple[ToolSpec, ...]:
        return tuple(t for t in self.tools if t.task_id == task_id)

    def fidelity_mask(self) -> np.ndarray:
        return np.array([m.kind == FIDELITY for m in self.metric_defs])

    # -- serialization

    def to_dict(self) -> dict:
        return {
            "degradations": list(self.degradations),
            "appearance": list(self.appearance),
            "tasks": [{"id": t.task_id, "target": self.degradations[t.target]} for t in self.tasks],
            "tools": [t.to_dict() for t in self.tools],
            "metrics": [m.to_dict() for m in self.metric_defs],
            "max_horizon": int(self.max_horizon),
            "clip_max": float(self.clip_max),
            "init": {
                "min_active": self.init.min_active,
                "max_active": self.init.max_active,
                "low": self.init.low,
                "high": self.init.high,
            },
        }

    @property
    def digest(self) -> str:
        return digest(self.to_dict())

    @classmethod
    def from_file(cls, p) -> "EnvConfig":
        path = Path(p)
        try:
            return cls.from_dict(load_cfg(path))
        except ConfigError as e:
            raise EnvConfigError([f"{path}: {m}" for m in e.problems]) from None

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "EnvConfig":
        return env_from_dict(raw)


@dataclass(frozen=True, eq=False)
class EnvState:
    d: np.ndarray
    p: np.ndarray
    step: int = 0

    @classmethod
    def make(cls, d, p, step: int = 0) -> "EnvState":
        return cls(d=_frozen(d), p=_frozen(p), step=int(step))

    def same_as(self, other: "EnvState") -> bool:
        """Bitwise equality (values and step)."""
        return (
            self.step == other.step
            and np.array_equal(self.d, other.d)
            and np.array_equal(self.p, other.p)
        )

    @property
    def active(self) -> int:
        return int(np.count_nonzero(self.d > 0))


@dataclass(frozen=True)
class Action:
    task_id: str | None
    tool_id: str | None

    @property
    def is_terminate(self) -> bool:
        return self.tool_id is None


TERMINATE = Action(None, None)


# ---------- config parsing / validation


def _named_vec(raw, names: Sequence[str], path: str, problems: list[str], default=0.0) -> np.ndarray:
    n = len(names)
    out = np.full(n, float(default))
    if raw is None:
        return out
    if isinstance(raw, Mapping):
        for k, v in raw.items():
            if k not in names:
                problems.append(f"{path}.{k}: unknown component")
                continue
            out[list(names).index(k)] = float(v)
        return out
    arr = np.asarray(raw, dtype=float)
    if arr.shape != (n,):
        problems.append(f"{path}: expected length {n}, got shape {arr.shape}")
        return out
    return arr


def _named_mat(raw, names: Sequence[str], path: str, problems: list[str]) -> np.ndarray:
    """Identity by default; `{diag: {name: v}, offdiag: [[row, col, v], ...]}` or a dense list."""
    n = len(names)
    out = np.eye(n)
    if raw is None:
        return out
    if isinstance(raw, Mapping):
        for k, v in (raw.get("diag") or {}).items():
            if k not in names:
                problems.append(f"{path}.diag.{k}: unknown component")
                continue
            i = list(names).index(k)
            out[i, i] = float(v)
        for j, entry in enumerate(raw.get("offdiag") or []):
            try:
                row, col, v = entry
                out[list(names).index(row), list(names).index(col)] = float(v)
            except (ValueError, TypeError):
                problems.append(f"{path}.offdiag[{j}]: expected [row, col, value] with known names")
        return out
    arr = np.asarray(raw, dtype=float)
    if arr.shape != (n, n):
        problems.append(f"{path}: expected shape ({n}, {n}), got {arr.shape}")
        return out
    return arr


def env_from_dict(raw: Mapping[str, Any]) -> EnvConfig:
    problems: list[str] = []
    degradations = tuple(str(x) for x in raw.get("degradations") or ())
    appearance = tuple(str(x) for x in raw.get("appearance") or degradations)
    if not degradations:
        raise EnvConfigError("degradations: must list at least one degradation")
    if len(appearance) != len(degradations):
        problems.append("appearance: must have the same length as degradations")

    tasks = []
    for i, t in enumerate(raw.get("tasks") or []):
        tid = str(t.get("id", ""))
        target = t.get("target")
        if target in degradations:
            tasks.append(TaskSpec(tid, degradations.index(target)))
        elif isinstance(target, int) and 0 <= target < len(degradations):
            tasks.append(TaskSpec(tid, int(target)))
        else:
            problems.append(f"tasks[{i}].target: unknown degradation {target!r}")

    tools = []
    for i, t in enumerate(raw.get("tools") or []):
        path = f"tools[{i}]"
        tools.append(
            ToolSpec(
                tool_id=str(t.get("id", t.get("tool_id", ""))),
                task_id=str(t.get("task", t.get("task_id", ""))),
                A=_frozen(_named_mat(t.get("A"), degradations, f"{path}.A", problems)),
                b=_frozen(_named_vec(t.get("b"), degradations, f"{path}.b", problems)),
                C=_frozen(_named_mat(t.get("C"), appearance, f"{path}.C", problems)),
                e=_frozen(_named_vec(t.get("e"), appearance, f"{path}.e", problems)),
                exec_cost=float(t.get("exec_cost_ms", t.get("exec_cost", 100.0))),
            )
        )

    metrics = []
    for i, m in enumerate(raw.get("metrics") or []):
        path = f"metrics[{i}]"
        metrics.append(
            MetricDef(
                metric_id=str(m.get("id", m.get("metric_id", ""))),
                kind=str(m.get("kind", "")),
                form=str(m.get("form", "")),
                w_d=_frozen(_named_vec(m.get("w_d"), degradations, f"{path}.w_d", problems, default=1.0)),
                w_p=_frozen(_named_vec(m.get("w_p"), appearance, f"{path}.w_p", problems)),
                bias=float(m.get("bias", 0.0)),
                gain=float(m.get("gain", 1.0)),
                source_direction=str(m.get("source_direction", "higher")),
            )
        )

    ini = raw.get("init") or {}
    init = InitSpec(
        min_active=int(ini.get("min_active", 1)),
        max_active=int(ini.get("max_active", min(4, len(degradations)))),
        low=float(ini.get("low", 0.3)),
        high=float(ini.get("high", 1.2)),
    )
    log.debug("env: %d degradations, %d tasks, %d tools", len(degradations), len(tasks), len(tools))
    if problems:
        raise EnvConfigError(problems)
    return EnvConfig(
        degradations=degradations,
        appearance=appearance,
        tasks=tuple(tasks),
        tools=tuple(tools),
        metric_defs=tuple(metrics),
        max_horizon=int(raw.get("max_horizon", 8)),
        clip_max=float(raw.get("clip_max", 2.0)),
        init=init,
    )


def validate_env(cfg: EnvConfig) -> list[str]:
    problems: list[str] = []
    D = len(cfg.degradations)
    task_ids = [t.task_id for t in cfg.tasks]
    if len(set(task_ids)) != len(task_ids):
        problems.append("tasks: duplicate task ids")
    tool_ids = [t.tool_id for t in cfg.tools]
    if len(set(tool_ids)) != len(tool_ids):
        problems.append("tools: duplicate tool ids")
    if cfg.max_horizon < 1:
        problems.append("max_horizon: must be a positive integer")
    if not (cfg.clip_max > 0):
        problems.append("clip_max: must be positive")

    for i, t in enumerate(cfg.tools):
        path = f"tools[{i}]({t.tool_id})"
        if t.task_id not in task_ids:
            problems.append(f"{path}.task: references unknown task {t.task_id!r}")
            continue
        if t.A.shape != (D, D) or t.b.shape != (D,) or t.C.shape != (D, D) or t.e.shape != (D,):
            problems.append(f"{path}: A/b/C/e shapes must match {D} degradations")
            continue
        if not (np.all(np.isfinite(t.A)) and np.all(np.isfinite(t.C))):
            problems.append(f"{path}: A and C must be finite")
            continue
        k = cfg.tasks[task_ids.index(t.task_id)].target
        row = np.delete(t.A[k], k)
        # the tool's own component can only shrink: d_k' = A[k,k] d_k with 0 <= A[k,k] <= 1
        if not (0.0 <= t.A[k, k] <= 1.0) or np.any(row != 0.0) or t.b[k] != 0.0:
            problems.append(f"{path}.A: must not increase its task's target degradation")
        if np.any(t.A < 0) or np.any(t.b < 0):
            problems.append(f"{path}: A and b must be non-negative")

    for t in cfg.tasks:
        if not any(tool.task_id == t.task_id for tool in cfg.tools):
            problems.append(f"tasks.{t.task_id}: needs at least one tool")

    kinds = [m.kind for m in cfg.metric_defs]
    if len(cfg.metric_defs) < 1:
        problems.append("metrics: at least one metric required")
    elif len(cfg.metric_defs) >= 2 and not (FIDELITY in kinds and PERCEPTUAL in kinds):
        problems.append("metrics: need at least one fidelity and one perceptual metric")
    for i, m in enumerate(cfg.metric_defs):
        path = f"metrics[{i}]({m.metric_id})"
        if m.kind not in (FIDELITY, PERCEPTUAL):
            problems.append(f"{path}.kind: must be fidelity or perceptual")
        if m.form not in METRIC_FORMS:
            problems.append(f"{path}.form: must be one of {METRIC_FORMS}")
        if m.kind == FIDELITY and m.form == "logistic" and np.any(m.w_p != 0):
            problems.append(f"{path}: fidelity metrics may not read appearance features")
        if m.source_direction not in ("higher", "lower"):
            problems.append(f"{path}.source_direction: must be higher or lower")
        if np.any(m.w_d < 0):
            problems.append(f"{path}.w_d: must be non-negative")

    if not (1 <= cfg.init.min_active <= cfg.init.max_active):
        problems.append("init: need 1 <= min_active <= max_active")
    if not (0 < cfg.init.low <= cfg.init.high):
        problems.append("init: need 0 < low <= high")
    return problems


# ---------- operations


def init_state(config: EnvConfig, seed) -> EnvState:
    rng = np.random.default_rng(seed)
    D = config.num_degradations
    hi = min(config.init.max_active, D)
    lo = min(config.init.min_active, hi)
    k = int(rng.integers(lo, hi + 1))
    idx = rng.choice(D, size=k, replace=False)
    d = np.zeros(D)
    d[idx] = rng.uniform(config.init.low, config.init.high, size=k)
    d = np.clip(d, 0.0, config.clip_max)
    return EnvState.make(d, np.zeros(D), 0)


def clean_state(config: EnvConfig) -> EnvState:
    D = config.num_degradations
    return EnvState.make(np.zeros(D), np.zeros(D), 0)


def apply_tool(state: EnvState, tool: ToolSpec, config: EnvConfig) -> EnvState:
    if state.step >= config.max_horizon:
        raise HorizonExceeded(f"step {state.step} is at the horizon ({config.max_horizon})")
    d = np.clip(tool.A @ state.d + tool.b, 0.0, config.clip_max)
    p = tool.C @ state.p + tool.e
    return EnvState.make(d, p, state.step + 1)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    ez = np.exp(z)
    return ez / (1.0 + ez)


def metric_value(m: MetricDef, state: EnvState) -> float:
    wd = m.w_d * state.d
    if m.form == "exp_l2":
        raw = float(np.exp(-np.sqrt(np.dot(wd, wd))))
    elif m.form == "inv_l1":
        raw = 1.0 / (1.0 + float(np.sum(np.abs(wd))))
    elif m.form == "max_comp":
        # a distance: lower is better at the source
        raw = min(1.0, float(np.max(wd))) if wd.size else 0.0
    else:
        z = m.bias + float(np.dot(m.w_p, state.p)) - float(np.sum(wd))
        raw = float(_sigmoid(m.gain * z))
    val = 1.0 - raw if m.source_direction == "lower" else raw
    return min(1.0, max(0.0, val))


def measure(state: EnvState, config: EnvConfig) -> np.ndarray:
    out = np.array([metric_value(m, state) for m in config.metric_defs])
    out.setflags(write=False)
    return out


def valid_actions(state: EnvState, config: EnvConfig) -> list[Action]:
    if state.step >= config.max_horizon:
        return [TERMINATE]
    acts = [Action(t.task_id, t.tool_id) for t in config.tools]
    acts.append(TERMINATE)
    return acts


def action_mask(state: EnvState, config: EnvConfig) -> np.ndarray:
    """Boolean mask over the fixed action index space (tools in order, then TERMINATE)."""
    mask = np.zeros(config.num_actions, dtype=bool)
    mask[config.terminate_index] = True
    if state.step < config.max_horizon:
        mask[: config.num_tools] = True
    return mask


def action_at(config: EnvConfig, index: int) -> Action:
    if index == config.terminate_index:
        return TERMINATE
    t = config.tools[index]
    return Action(t.task_id, t.tool_id)


def action_index(config: EnvConfig, action: Action) -> int:
    if action.is_terminate:
        return config.terminate_index
    return config.tool_index(action.tool_id)


def make_tool(
    tool_id: str,
    task_id: str,
    D: int,
    A=None,
    b=None,
    C=None,
    e=None,
    exec_cost: float = 100.0,
) -> ToolSpec:
    return ToolSpec(
        tool_id=tool_id,
        task_id=task_id,
        A=_frozen(np.eye(D) if A is None else A),
        b=_frozen(np.zeros(D) if b is None else b),
        C=_frozen(np.eye(D) if C is None else C),
        e=_frozen(np.zeros(D) if e is None else e),
        exec_cost=exec_cost,
    )
