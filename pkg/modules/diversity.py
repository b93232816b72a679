# modules/diversity.py
"""
Diversity statistics over groups of rollouts drawn from the same initial state.

Two rollouts are identical iff their full (task, tool) step sequences are equal.
Each distinct trajectory in a group falls in at most one category:

- order: another distinct trajectory has the same (task, tool) multiset in a
  different order
- tool: otherwise, another distinct trajectory has the same task sequence with
  different tools
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .demo_gen import Trajectory

Steps = tuple[tuple[str, str], ...]


def _steps(t) -> Steps:
    if isinstance(t, Trajectory):
        return t.steps
    return tuple((str(a), str(b)) for a, b in t)


@dataclass(frozen=True)
class GroupDiversity:
    size: int
    distinct: int
    order: int
    tool: int
    largest_identical: int  # size of the most common trajectory's cluster


@dataclass(frozen=True)
class DiversityReport:
    groups: tuple[GroupDiversity, ...]
    tool_entropy: dict[str, float] = field(default_factory=dict)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def distinct_fraction(self) -> float:
        if not self.groups:
            return 0.0
        return float(np.mean([g.distinct / g.size for g in self.groups]))

    @property
    def duplicate_fraction(self) -> float:
        if not self.groups:
            return 0.0
        return float(np.mean([(g.size - g.distinct) / g.size for g in self.groups]))

    @property
    def order_fraction(self) -> float:
        total = sum(g.distinct for g in self.groups)
        return sum(g.order for g in self.groups) / total if total else 0.0

    @property
    def tool_fraction(self) -> float:
        total = sum(g.distinct for g in self.groups)
        return sum(g.tool for g in self.groups) / total if total else 0.0

    @property
    def groups_with_order_diversity(self) -> float:
        if not self.groups:
            return 0.0
        return sum(1 for g in self.groups if g.order > 0) / len(self.groups)

    @property
    def majority_identical_fraction(self) -> float:
        # one trajectory is more than half the group
        if not self.groups:
            return 0.0
        return sum(1 for g in self.groups if 2 * g.largest_identical > g.size) / len(self.groups)

    @property
    def mean_tool_entropy(self) -> float:
        return float(np.mean(list(self.tool_entropy.values()))) if self.tool_entropy else 0.0

    def distinct_histogram(self) -> dict[int, int]:
        if not self.groups:
            return {}
        g_max = max(g.size for g in self.groups)
        c = Counter(g.distinct for g in self.groups)
        return {k: int(c.get(k, 0)) for k in range(1, g_max + 1)}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "group": i,
                    "size": g.size,
                    "distinct": g.distinct,
                    "order": g.order,
                    "tool": g.tool,
                    "largest_identical": g.largest_identical,
                }
                for i, g in enumerate(self.groups)
            ],
            columns=["group", "size", "distinct", "order", "tool", "largest_identical"],
        )

    def summary(self) -> dict:
        return {
            "groups": self.num_groups,
            "distinct_fraction": self.distinct_fraction,
            "duplicate_fraction": self.duplicate_fraction,
            "order_fraction": self.order_fraction,
            "tool_fraction": self.tool_fraction,
            "groups_with_order_diversity": self.groups_with_order_diversity,
            "majority_identical_fraction": self.majority_identical_fraction,
            "distinct_histogram": {str(k): v for k, v in self.distinct_histogram().items()},
            "tool_entropy": dict(self.tool_entropy),
            "mean_tool_entropy": self.mean_tool_entropy,
        }


def group_diversity(group: Sequence) -> GroupDiversity:
    seqs = [_steps(t) for t in group]
    counts = Counter(seqs)
    distinct = list(counts)
    order = tool = 0
    for i, s in enumerate(distinct):
        others = distinct[:i] + distinct[i + 1 :]
        if any(sorted(o) == sorted(s) for o in others):
            order += 1
        elif any(tuple(t for t, _ in o) == tuple(t for t, _ in s) for o in others):
            tool += 1
    return GroupDiversity(
        size=len(seqs),
        distinct=len(distinct),
        order=order,
        tool=tool,
        largest_identical=max(counts.values()) if counts else 0,
    )


def tool_entropy(trajectories: Iterable, task_ids: Sequence[str] | None = None) -> dict[str, float]:
    # nats, over every step of every rollout
    per_task: dict[str, Counter] = {t: Counter() for t in (task_ids or ())}
    for t in trajectories:
        for task_id, tool_id in _steps(t):
            per_task.setdefault(task_id, Counter())[tool_id] += 1
    out = {}
    for task_id, c in per_task.items():
        n = sum(c.values())
        if n == 0:
            out[task_id] = 0.0
            continue
        p = np.array(list(c.values()), dtype=float) / n
        out[task_id] = float(-np.sum(p * np.log(p)))
    return out


def diversity_stats(rollout_groups: Sequence[Sequence], task_ids: Sequence[str] | None = None) -> DiversityReport:
    groups = tuple(group_diversity(g) for g in rollout_groups)
    ent = tool_entropy((t for g in rollout_groups for t in g), task_ids)
    return DiversityReport(groups=groups, tool_entropy=ent)
