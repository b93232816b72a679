import numpy as np
import pytest

from modules.diversity import diversity_stats, group_diversity, tool_entropy
from modules.policy import PolicyParams, rollout
from modules.synth_env import init_state

A = ("denoise", "dn_a")
B = ("deblur", "db_a")
B2 = ("deblur", "db_b")


def test_hand_built_group():
    group = [
        [A, B],
        [B, A],  # same multiset as [A, B]
        [A, B2],  # same task sequence as [A, B], different tool
        [A],
        [A],
    ]
    g = group_diversity(group)
    assert (g.distinct, g.order, g.tool) == (4, 2, 1)
    assert g.largest_identical == 2
    assert g.size == 5


def test_three_two_one_fixture():
    group = [
        [A, B],
        [B, A],
        [A, B2],
        [A, B],
        [B, A],
        [A, B2],
    ]
    g = group_diversity(group)
    assert (g.distinct, g.order, g.tool) == (3, 2, 1)


def test_identical_group():
    g = group_diversity([[A, B]] * 8)
    assert (g.distinct, g.order, g.tool, g.largest_identical) == (1, 0, 0, 8)


def test_report_fractions():
    report = diversity_stats([[[A, B]] * 4, [[A, B], [B, A], [A], [B]]])
    assert report.num_groups == 2
    assert report.distinct_fraction == pytest.approx((1 / 4 + 4 / 4) / 2)
    assert report.duplicate_fraction == pytest.approx((3 / 4 + 0) / 2)
    assert report.order_fraction == pytest.approx(2 / 5)
    assert report.tool_fraction == 0.0
    assert report.groups_with_order_diversity == 0.5
    assert report.majority_identical_fraction == 0.5
    assert report.distinct_histogram() == {1: 1, 2: 0, 3: 0, 4: 1}


def test_empty_report():
    report = diversity_stats([])
    assert report.distinct_fraction == 0.0
    assert report.distinct_histogram() == {}
    assert list(report.to_frame().columns) == ["group", "size", "distinct", "order", "tool", "largest_identical"]


def test_tool_entropy():
    ent = tool_entropy([[A, B], [A, B2]], ["denoise", "deblur", "dehaze"])
    assert ent["denoise"] == 0.0
    assert ent["deblur"] == pytest.approx(np.log(2))
    assert ent["dehaze"] == 0.0


def test_summary_is_plain(tiny_env):
    groups = []
    for j in range(3):
        s = init_state(tiny_env, j)
        groups.append([rollout(PolicyParams.zeros(tiny_env), tiny_env, s, [j, k]) for k in range(4)])
    report = diversity_stats(groups, tiny_env.task_ids)
    summary = report.summary()
    assert summary["groups"] == 3
    assert set(summary["tool_entropy"]) == {"denoise", "deblur"}
    assert 0.0 < summary["distinct_fraction"] <= 1.0
    assert len(report.to_frame()) == 3
