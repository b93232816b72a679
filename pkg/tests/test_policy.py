import numpy as np
import pytest

from modules.demo_gen import DemoItem, DemoSet, replay
from modules.policy import (
    CheckpointError,
    FeatureSpec,
    InvalidAction,
    PolicyParams,
    SftConfig,
    action_distribution,
    decisions,
    greedy_action,
    load_checkpoint,
    log_prob,
    log_prob_grad,
    rollout,
    save_checkpoint,
    sft_update,
    trajectory_log_prob_grad,
)
from modules.synth_env import EnvConfig, EnvState, clean_state, init_state

from conftest import tiny_env_dict


def _random_params(config, rng, scale=1.0) -> PolicyParams:
    shape = PolicyParams.zeros(config).shape
    return PolicyParams(rng.normal(0.0, scale, size=shape))


def _random_history(config, rng, k):
    tools = [config.tools[int(i)] for i in rng.integers(config.num_tools, size=k)]
    return tuple((t.task_id, t.tool_id) for t in tools)


def _state_at(config, rng, step):
    d = rng.uniform(0, config.clip_max, config.num_degradations)
    p = rng.normal(0, 1, config.num_degradations)
    return EnvState.make(d, p, step)


# ---------- distribution


def test_feature_dim(env):
    spec = FeatureSpec.for_env(env)
    assert spec.dim == 2 * 6 + 6 + 2
    x = spec.encode(init_state(env, 0), ())
    assert x.shape == (spec.dim,)
    assert x[-1] == 1.0
    assert np.dot(x, x) <= 2 * env.num_degradations + 3


def test_zero_params_give_uniform(env):
    pi = action_distribution(PolicyParams.zeros(env), init_state(env, 1), (), env)
    np.testing.assert_allclose(pi, np.full(env.num_actions, 1.0 / env.num_actions), atol=1e-12)


def test_shift_invariance(env):
    rng = np.random.default_rng(0)
    params = _random_params(env, rng)
    s = init_state(env, 2)
    # adding the same vector v to every row shifts all logits by v @ x
    v = rng.normal(size=params.shape[1])
    shifted = PolicyParams(params.theta + v[None, :])
    np.testing.assert_allclose(
        action_distribution(params, s, (), env),
        action_distribution(shifted, s, (), env),
        atol=1e-12,
    )


def test_only_terminate_at_horizon(env):
    rng = np.random.default_rng(1)
    s = _state_at(env, rng, env.max_horizon)
    pi = action_distribution(_random_params(env, rng), s, _random_history(env, rng, env.max_horizon), env)
    assert pi[env.terminate_index] == 1.0
    assert np.all(pi[: env.num_tools] == 0.0)


def test_history_must_match_step(env):
    with pytest.raises(ValueError, match="history"):
        action_distribution(PolicyParams.zeros(env), init_state(env, 0), (("denoise", "dn_restore"),), env)


def test_distribution_is_a_distribution(env):
    rng = np.random.default_rng(2)
    for _ in range(20):
        step = int(rng.integers(env.max_horizon))
        pi = action_distribution(
            _random_params(env, rng, 3.0), _state_at(env, rng, step), _random_history(env, rng, step), env
        )
        assert np.all(pi > 0)
        assert abs(pi.sum() - 1.0) < 1e-12


# ---------- gradients


def test_log_prob_grad_matches_finite_differences(tiny_env):
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(50):
        params = _random_params(tiny_env, rng)
        step = int(rng.integers(tiny_env.max_horizon))
        s = _state_at(tiny_env, rng, step)
        hist = _random_history(tiny_env, rng, step)
        a = int(rng.integers(tiny_env.num_actions))
        g = log_prob_grad(params, s, hist, a, tiny_env)
        i, j = int(rng.integers(params.shape[0])), int(rng.integers(params.shape[1]))
        up, dn = np.array(params.theta), np.array(params.theta)
        up[i, j] += h
        dn[i, j] -= h
        fd = (
            log_prob(PolicyParams(up), s, hist, a, tiny_env) - log_prob(PolicyParams(dn), s, hist, a, tiny_env)
        ) / (2 * h)
        assert abs(fd - g[i, j]) <= 1e-5 * max(1.0, abs(fd))


def test_score_identity(env):
    rng = np.random.default_rng(4)
    params = _random_params(env, rng)
    s = init_state(env, 4)
    pi = action_distribution(params, s, (), env)
    total = sum(pi[a] * log_prob_grad(params, s, (), a, env) for a in range(env.num_actions))
    assert np.max(np.abs(total)) < 1e-9


def test_closed_form_gradient(tiny_env):
    s = EnvState.make([1.0, 0.5], [0.0, 0.0], 0)
    x = FeatureSpec.for_env(tiny_env).encode(s, ())
    g = log_prob_grad(PolicyParams.zeros(tiny_env), s, (), 0, tiny_env)
    expected = np.outer(np.eye(tiny_env.num_actions)[0] - 1.0 / tiny_env.num_actions, x)
    np.testing.assert_allclose(g, expected, atol=1e-15)


def test_invalid_action_is_rejected(env):
    s = EnvState.make(np.ones(6), np.zeros(6), env.max_horizon)
    hist = (("denoise", "dn_restore"),) * env.max_horizon
    with pytest.raises(InvalidAction):
        log_prob_grad(PolicyParams.zeros(env), s, hist, 0, env)
    with pytest.raises(InvalidAction):
        log_prob_grad(PolicyParams.zeros(env), init_state(env, 0), (), env.num_actions, env)


def test_decisions_add_terminate_before_horizon(tiny_env):
    s = EnvState.make([1.0, 0.5], [0, 0], 0)
    traj = replay(tiny_env, s, [("denoise", "dn_a")])
    ds = decisions(traj, tiny_env)
    assert [a for _, _, a in ds] == [0, tiny_env.terminate_index]
    assert len(decisions(traj, tiny_env, include_terminate=False)) == 1
    full = replay(tiny_env, s, [("denoise", "dn_b")] * tiny_env.max_horizon)
    assert decisions(full, tiny_env)[-1][2] == tiny_env.tool_index("dn_b")


def test_trajectory_gradient_is_sum_of_decisions(tiny_env):
    rng = np.random.default_rng(5)
    params = _random_params(tiny_env, rng)
    traj = replay(tiny_env, EnvState.make([1.0, 0.5], [0, 0], 0), [("denoise", "dn_a"), ("deblur", "db_a")])
    total = sum(log_prob_grad(params, s, h, a, tiny_env) for s, h, a in decisions(traj, tiny_env))
    np.testing.assert_allclose(trajectory_log_prob_grad(params, traj, tiny_env), total, atol=1e-12)


# ---------- behavior cloning


def _single_example(config) -> DemoSet:
    s = EnvState.make([1.0, 0.5], [0, 0], 0)
    item = DemoItem(initial=s, reference=clean_state(config), trajectory=replay(config, s, [("denoise", "dn_a")]))
    return DemoSet(env=config, items=(item,))


def test_sft_saturates_on_one_example(tiny_env):
    demos = _single_example(tiny_env)
    res = sft_update(PolicyParams.zeros(tiny_env), demos, SftConfig(lr=0.5, epochs=2000, include_terminate=False))
    s = demos.items[0].initial
    assert action_distribution(res.params, s, (), tiny_env)[0] >= 0.99


def test_zero_learning_rate_is_identity(default_demos):
    params = PolicyParams.zeros(default_demos.env)
    res = sft_update(params, default_demos, SftConfig(lr=0.0, epochs=5))
    assert res.params.same_as(params)


def test_sft_loglik_increases(default_demos):
    res = sft_update(PolicyParams.zeros(default_demos.env), default_demos, SftConfig(epochs=50))
    assert len(res.loglik) == 51
    assert res.final_loglik > res.loglik[0]
    assert all(b >= a - 1e-6 for a, b in zip(res.loglik, res.loglik[1:]))


def test_sft_minibatch_is_deterministic(default_demos):
    cfg = SftConfig(lr=0.2, epochs=5, batch_size=64, seed=3)
    a = sft_update(PolicyParams.zeros(default_demos.env), default_demos, cfg)
    b = sft_update(PolicyParams.zeros(default_demos.env), default_demos, cfg)
    assert a.params.same_as(b.params)
    assert a.final_loglik > a.loglik[0]


def test_sft_does_not_mutate_input(default_demos):
    params = PolicyParams.zeros(default_demos.env)
    sft_update(params, default_demos, SftConfig(epochs=3))
    assert np.all(params.theta == 0)


# ---------- rollout


def test_rollout_is_deterministic(env):
    rng = np.random.default_rng(6)
    params = _random_params(env, rng)
    s = init_state(env, 6)
    a, b = rollout(params, env, s, [1, 2, 3]), rollout(params, env, s, [1, 2, 3])
    assert a.same_as(b)
    assert len(a) <= env.max_horizon
    assert len(a.states) == len(a) + 1


def test_terminate_bias_gives_empty_rollouts(env):
    theta = np.zeros(PolicyParams.zeros(env).shape)
    theta[env.terminate_index, -1] = 20.0
    params = PolicyParams(theta)
    empty = sum(len(rollout(params, env, init_state(env, seed), seed)) == 0 for seed in range(1000))
    assert empty >= 999


def test_rollout_stops_at_horizon(env):
    theta = np.zeros(PolicyParams.zeros(env).shape)
    theta[env.terminate_index, -1] = -50.0
    traj = rollout(PolicyParams(theta), env, init_state(env, 7), 7)
    assert len(traj) == env.max_horizon


def test_rollout_uses_the_executor(tiny_env):
    calls = []

    def run(state, tool):
        calls.append(tool.tool_id)
        return EnvState.make(state.d, state.p, state.step + 1)

    traj = rollout(PolicyParams.zeros(tiny_env), tiny_env, init_state(tiny_env, 1), 1, executor=run)
    assert list(traj.tools) == calls


def test_greedy_action(tiny_env):
    theta = np.zeros(PolicyParams.zeros(tiny_env).shape)
    theta[2, -1] = 1.0
    assert greedy_action(PolicyParams(theta), init_state(tiny_env, 0), (), tiny_env) == 2


# ---------- checkpoints


def test_checkpoint_round_trip(tmp_path, env):
    params = _random_params(env, np.random.default_rng(8))
    p = save_checkpoint(tmp_path / "policy.json", params, env, {"stage": "sft"})
    back, extra = load_checkpoint(p, env)
    assert back.same_as(params)
    assert extra == {"stage": "sft"}


def test_checkpoint_rejects_other_env(tmp_path, env):
    other = EnvConfig.from_dict(tiny_env_dict())
    p = save_checkpoint(tmp_path / "policy.json", PolicyParams.zeros(other), other)
    with pytest.raises(CheckpointError, match="different env"):
        load_checkpoint(p, env)


def test_checkpoint_rejects_garbage(tmp_path, env):
    p = tmp_path / "policy.json"
    p.write_text("not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(p, env)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json", env)
