import json
from collections import Counter

import numpy as np
import pytest

from modules.demo_gen import (
    ORACLE,
    ORDER_PERTURBED,
    ORDER_TOOL_PERTURBED,
    TOOL_PERTURBED,
    DemoFormatError,
    DemoItem,
    DemoSet,
    EdpConfig,
    EmptyToolSet,
    Trajectory,
    build_sft_set,
    demo_summary,
    demos_digest,
    generate_oracle_demos,
    mixture_distribution,
    oracle_episode,
    perturb_order,
    perturb_tools,
    read_demos,
    replay,
    replay_consistent,
    sample_tool,
    tool_distribution,
    tool_entropy,
    write_demos,
)
from modules.synth_env import EnvConfig, EnvState, clean_state, init_state, measure

from conftest import tiny_env_dict


def _plain_tiny() -> EnvConfig:
    raw = tiny_env_dict()
    for t in raw["tools"]:
        t.pop("e", None)
    return EnvConfig.from_dict(raw)


def _annihilating_env() -> EnvConfig:
    raw = tiny_env_dict()
    for t in raw["tools"]:
        t["A"] = [[0.0, 0.0], [0.0, 0.0]]
        t.pop("e", None)
    return EnvConfig.from_dict(raw)


def _item(config, steps, provenance=ORACLE, d=(1.0, 0.5)) -> DemoItem:
    initial = EnvState.make(list(d), [0.0] * len(d), 0)
    return DemoItem(
        initial=initial,
        reference=clean_state(config),
        trajectory=replay(config, initial, steps),
        provenance=provenance,
    )


# ---------- oracle


def test_clean_input_gives_empty_trajectory(env):
    item = oracle_episode(env, clean_state(env))
    assert len(item.trajectory) == 0
    assert item.tool_calls == env.num_tools


def test_clean_input_gives_empty_trajectory_without_appearance_effects():
    cfg = _plain_tiny()
    assert len(oracle_episode(cfg, clean_state(cfg)).trajectory) == 0


def test_annihilating_tools_reach_perfect_fidelity():
    cfg = _annihilating_env()
    fid = cfg.fidelity_mask()
    for seed in range(20):
        item = oracle_episode(cfg, init_state(cfg, seed))
        assert 1 <= len(item.trajectory) <= cfg.num_degradations
        np.testing.assert_array_equal(item.trajectory.final_metrics[fid], 1.0)


def test_oracle_never_makes_the_mean_metric_worse(env):
    for seed in range(30):
        item = oracle_episode(env, init_state(env, seed))
        means = [float(np.mean(measure(s, env))) for s in item.trajectory.states]
        assert all(b > a for a, b in zip(means, means[1:]))
        assert len(item.trajectory) <= env.max_horizon


def test_oracle_demos_are_deterministic(env):
    a = generate_oracle_demos(env, 12, [5, 10])
    b = generate_oracle_demos(env, 12, [5, 10], workers=4)
    assert a.same_as(b)
    assert demos_digest(a) == demos_digest(b)


def test_oracle_demos_replay(default_demos):
    assert len(default_demos) == 200
    assert all(replay_consistent(default_demos.env, it) for it in default_demos.items)
    assert default_demos.provenance_counts()[ORACLE] == 200


def test_zero_demos_is_rejected(env):
    with pytest.raises(ValueError):
        generate_oracle_demos(env, 0, 1)


# ---------- order perturbation


def test_alpha_t_zero_is_identity(default_demos):
    out = perturb_order(default_demos, EdpConfig(alpha_t=0.0, alpha_m=0.0, seed=1))
    assert out.same_as(default_demos)


def test_alpha_t_one_doubles_with_same_multisets(default_demos):
    out = perturb_order(default_demos, EdpConfig(alpha_t=1.0, alpha_m=0.0, seed=1))
    n = len(default_demos)
    assert len(out) == 2 * n
    for orig, copy in zip(out.items[:n], out.items[n:]):
        assert copy.provenance == ORDER_PERTURBED
        assert Counter(copy.trajectory.steps) == Counter(orig.trajectory.steps)
        assert copy.initial.same_as(orig.initial)
        assert replay_consistent(out.env, copy)


def test_order_perturbation_properties_on_random_sets(tiny_env):
    rng = np.random.default_rng(0)
    tools = [(t.task_id, t.tool_id) for t in tiny_env.tools]
    for trial in range(1000):
        items = []
        for _ in range(int(rng.integers(1, 6))):
            k = int(rng.integers(0, tiny_env.max_horizon + 1))
            steps = [tools[int(j)] for j in rng.integers(len(tools), size=k)]
            d = rng.uniform(0.0, 1.5, tiny_env.num_degradations)
            items.append(_item(tiny_env, steps, d=tuple(d)))
        demos = DemoSet(env=tiny_env, items=tuple(items))
        out = perturb_order(demos, EdpConfig(alpha_t=float(rng.uniform()), alpha_m=0.0, seed=trial))
        n = len(demos)
        assert DemoSet(env=tiny_env, items=out.items[:n]).same_as(demos)
        copies = list(out.items[n:])
        assert len(copies) <= n
        src = iter(demos.items)
        for copy in copies:
            assert copy.provenance == ORDER_PERTURBED
            orig = next(it for it in src if it.initial.same_as(copy.initial))
            assert Counter(copy.trajectory.steps) == Counter(orig.trajectory.steps)
            assert replay_consistent(out.env, copy)


def test_order_selection_rate(tiny_env):
    demos = DemoSet(env=tiny_env, items=(_item(tiny_env, [("denoise", "dn_a"), ("deblur", "db_a")]),) * 10_000)
    out = perturb_order(demos, EdpConfig(alpha_t=0.3, alpha_m=0.0, seed=3))
    rate = (len(out) - len(demos)) / len(demos)
    assert 0.28 <= rate <= 0.32


# ---------- tool perturbation


def test_mixture_distribution_example():
    np.testing.assert_allclose(
        mixture_distribution(np.array([1.0, 0.0, 0.0]), 0.4),
        [0.7333333, 0.1333333, 0.1333333],
        atol=1e-6,
    )


@pytest.mark.parametrize(
    "base, alpha_m, expected",
    [
        ([1.0, 0.0, 0.0], 0.4, [0.7333, 0.1333, 0.1333]),
        ([1.0, 0.0, 0.0], 1.0, [1 / 3, 1 / 3, 1 / 3]),
        ([0.5, 0.5, 0.0], 0.0, [0.5, 0.5, 0.0]),
    ],
)
def test_sample_tool_frequencies(base, alpha_m, expected):
    rng = np.random.default_rng(0)
    n = 50_000
    draws = np.bincount([sample_tool(rng, np.array(base), alpha_m) for _ in range(n)], minlength=3)
    np.testing.assert_allclose(draws / n, expected, atol=0.01)


def test_mixture_gives_every_tool_at_least_its_uniform_share(default_demos):
    rng = np.random.default_rng(1)
    for _ in range(1000):
        k = int(rng.integers(1, 6))
        base = rng.dirichlet(np.ones(k)) if rng.random() < 0.7 else np.eye(k)[int(rng.integers(k))]
        alpha_m = float(rng.uniform())
        p = mixture_distribution(base, alpha_m)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(p >= alpha_m / k - 1e-12)
    for alpha_m in (0.0, 0.4, 1.0):
        for base in tool_distribution(default_demos).values():
            assert np.all(mixture_distribution(base, alpha_m) >= alpha_m / len(base) - 1e-12)


def test_tool_distribution_falls_back_to_uniform(tiny_env):
    demos = DemoSet(env=tiny_env, items=(_item(tiny_env, [("denoise", "dn_a")]),))
    dist = tool_distribution(demos)
    np.testing.assert_array_equal(dist["denoise"], [1.0, 0.0])
    np.testing.assert_array_equal(dist["deblur"], [0.5, 0.5])


def test_alpha_m_zero_keeps_single_tool_demos(tiny_env):
    demos = DemoSet(env=tiny_env, items=tuple(_item(tiny_env, [("denoise", "dn_a")]) for _ in range(20)))
    out = perturb_tools(demos, EdpConfig(alpha_t=0.0, alpha_m=0.0, seed=2))
    assert out.same_as(demos)
    assert out.provenance_counts()[TOOL_PERTURBED] == 0


def test_tool_perturbation_keeps_tasks(default_demos):
    out = perturb_tools(default_demos, EdpConfig(alpha_t=0.0, alpha_m=1.0, seed=4))
    assert len(out) == len(default_demos)
    changed = 0
    for a, b in zip(default_demos.items, out.items):
        assert a.trajectory.tasks == b.trajectory.tasks
        assert replay_consistent(out.env, b)
        if b.provenance == TOOL_PERTURBED:
            changed += 1
            assert a.trajectory.tools != b.trajectory.tools
    assert changed > 0


def test_unknown_task_raises_empty_tool_set(tiny_env):
    s = clean_state(tiny_env)
    ghost = DemoItem(
        initial=s,
        reference=s,
        trajectory=Trajectory(steps=(("inpaint", "ip_a"),), states=(s,), final_metrics=measure(s, tiny_env)),
    )
    demos = DemoSet(env=tiny_env, items=(ghost,))
    with pytest.raises(EmptyToolSet):
        perturb_tools(demos, EdpConfig(seed=0))


# ---------- composition


def test_build_sft_set_identity_at_zero_rates(tiny_env):
    # one tool per task in the input, so the empirical distribution is degenerate
    items = (
        _item(tiny_env, [("denoise", "dn_a"), ("deblur", "db_b")]),
        _item(tiny_env, [("deblur", "db_b")], d=(0.0, 0.9)),
    )
    demos = DemoSet(env=tiny_env, items=items)
    out = build_sft_set(demos, EdpConfig(alpha_t=0.0, alpha_m=0.0, seed=9))
    assert out.same_as(demos)


def test_build_sft_set_is_deterministic(default_demos):
    cfg = EdpConfig(alpha_t=0.3, alpha_m=0.4, seed=9)
    a, b = build_sft_set(default_demos, cfg), build_sft_set(default_demos, cfg)
    assert a.same_as(b)
    assert len(a) >= len(default_demos)
    counts = a.provenance_counts()
    assert counts[ORDER_PERTURBED] + counts[TOOL_PERTURBED] > 0


def test_order_tag_survives_tool_perturbation(default_demos):
    cfg = EdpConfig(alpha_t=1.0, alpha_m=0.4, seed=9)
    n = len(default_demos)
    ordered = perturb_order(default_demos, cfg).perturbation_counts()["order_perturbed"]
    out = build_sft_set(default_demos, cfg)
    assert ordered == n
    assert out.perturbation_counts()["order_perturbed"] == ordered
    assert all(it.order_perturbed for it in out.items[n:])
    assert not any(it.order_perturbed for it in out.items[:n])
    counts = out.provenance_counts()
    assert counts[ORDER_TOOL_PERTURBED] > 0
    assert out.perturbation_counts()["tool_perturbed"] == counts[TOOL_PERTURBED] + counts[ORDER_TOOL_PERTURBED]


def test_combined_tag_round_trips(tmp_path, default_demos):
    out = build_sft_set(default_demos, EdpConfig(alpha_t=1.0, alpha_m=0.4, seed=9))
    back = read_demos(write_demos(out, tmp_path / "edp.jsonl"), default_demos.env)
    assert back.provenance_counts() == out.provenance_counts()


def test_edp_does_not_lower_tool_entropy(default_demos):
    before = tool_entropy(default_demos)
    after = tool_entropy(build_sft_set(default_demos, EdpConfig(alpha_t=0.3, alpha_m=0.4, seed=9)))
    assert np.mean(list(after.values())) >= np.mean(list(before.values()))


def test_demo_summary_counts(default_demos):
    s = demo_summary(default_demos)
    assert s["records"] == 200
    assert sum(s["length_histogram"].values()) == 200
    assert s["oracle_tool_calls"] > 0
    assert set(s["tool_frequencies"]) == {t.tool_id for t in default_demos.env.tools}


def test_edp_invalid_rates():
    with pytest.raises(ValueError, match="alpha_t"):
        EdpConfig(alpha_t=1.5)


def test_oracle_demo_digest_golden(default_demos, golden):
    golden("oracle_demos_200.sha256", demos_digest(default_demos) + "\n")


def test_sft_set_digest_golden(default_demos, golden):
    sft_set = build_sft_set(default_demos, EdpConfig(alpha_t=0.3, alpha_m=0.4, seed=20251019))
    golden("sft_set_200.sha256", demos_digest(sft_set) + "\n")


# ---------- files


def test_file_round_trip(tmp_path, default_demos):
    p = write_demos(default_demos, tmp_path / "demos.jsonl")
    back = read_demos(p, default_demos.env)
    assert back.same_as(default_demos)
    assert p.read_bytes() == write_demos(back, tmp_path / "again.jsonl").read_bytes()


def test_header_is_checked(tmp_path, tiny_env):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"format": "something-else", "version": 1}) + "\n")
    with pytest.raises(DemoFormatError):
        read_demos(p, tiny_env)


def test_bad_record_names_its_line(tmp_path, tiny_env):
    demos = DemoSet(env=tiny_env, items=(_item(tiny_env, [("denoise", "dn_a")]),))
    p = write_demos(demos, tmp_path / "demos.jsonl")
    with open(p, "a", encoding="utf-8") as f:
        f.write('{"initial_d": [1, 0], "initial_p": [0, 0], "steps": [["denoise", "db_a"]]}\n')
    with pytest.raises(DemoFormatError, match=":3:"):
        read_demos(p, tiny_env)


def test_validation_report(tmp_path, default_demos):
    from scripts.validate_demos import build_report

    p = write_demos(default_demos, tmp_path / "demos.jsonl")
    text, bad = build_report(p, read_demos(p, default_demos.env))
    assert bad == 0
    assert "**Records:** 200" in text
    assert "- Records failing replay: 0" in text
    assert "- Unknown tools: None" in text
