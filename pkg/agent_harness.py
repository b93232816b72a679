"""
Command-line entry point for the restoration-agent harness.

    python agent_harness.py gen-demos --n 200 --out out/demos
    python agent_harness.py edp --in out/demos/demos.jsonl --alpha-t 0.3 --alpha-m 0.4 --out out/edp
    python agent_harness.py sft --in out/edp/demos_edp.jsonl --out out/sft
    python agent_harness.py rl --checkpoint out/sft/policy_sft.json --out out/rl
    python agent_harness.py eval --checkpoint out/rl/policy_rl.json --out out/eval
    python agent_harness.py stats --checkpoint out/rl/policy_rl.json --out out/stats
    python agent_harness.py pool-bench --out out/pool
    python agent_harness.py ablate --mode all --out out/ablate
    python agent_harness.py sweep --param alpha_t --values 0,0.1,0.3,0.5 --out out/sweep

Exit codes: 0 ok, 1 config / I/O / training error, 2 usage error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import pandas as pd
from tqdm import tqdm

from modules.config import ConfigError, load_experiment_config, setup_logging
from modules.demo_gen import (
    DemoFormatError,
    build_sft_set,
    demo_summary,
    generate_oracle_demos,
    read_demos,
    tool_entropy,
    write_demos,
)
from modules.mar_reward import MarState, telemetry_row
from modules.mc_pool import ModelCallPool, PoolError, run_pool_bench
from modules.policy import CheckpointError, PolicyParams, load_checkpoint, save_checkpoint, sft_update
from modules.rl_trainer import (
    EXPERIMENT_MODES,
    TAG_DEMOS,
    EvalError,
    TrainStepError,
    evaluate,
    heldout_states,
    run_experiment,
    run_sweep,
    tool_effect_table,
    train_step,
)

DEFAULT_CONFIG = Path(__file__).resolve().parent / "configs" / "experiment_default.yaml"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVARIANT = 3


class InvariantViolation(RuntimeError):
    pass


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _seed(s: str) -> int:
    v = int(s)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("must be an unsigned 64-bit integer")
    return v


def _unit(s: str) -> float:
    v = float(s)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("must be in [0, 1]")
    return v


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _load(a):
    overrides = {
        "seed": a.seed,
        "edp.alpha_t": getattr(a, "alpha_t", None),
        "edp.alpha_m": getattr(a, "alpha_m", None),
        "train.reward_mode": getattr(a, "reward_mode", None),
        "train.group_size": getattr(a, "group_size", None),
        "train.batch_size": getattr(a, "batch", None),
        "train.steps": getattr(a, "steps", None),
        "train.workers": a.workers,
        "pool.size": getattr(a, "pool_size", None),
        "pool.failure_rate": getattr(a, "failure_rate", None),
        "pool.latency_scale": getattr(a, "latency_scale", None),
        "pool.jitter_ms": getattr(a, "jitter_ms", None),
    }
    cfg = load_experiment_config(a.config, overrides)
    out = Path(a.out) if a.out else cfg.out_dir
    return cfg, out


def _params(a, cfg):
    if getattr(a, "checkpoint", None):
        params, extra = load_checkpoint(a.checkpoint, cfg.env)
        return params, extra
    return PolicyParams.zeros(cfg.env), {}


# ---------- subcommands


def cmd_gen_demos(a) -> int:
    cfg, out = _load(a)
    n = a.n or cfg.n_demos
    demos = generate_oracle_demos(cfg.env, n, [cfg.seed, TAG_DEMOS], workers=cfg.train.workers)
    p = write_demos(demos, out / "demos.jsonl")
    summary = {"config_digest": cfg.digest, **demo_summary(demos)}
    s = _write_json(out / "demos_summary.json", summary)
    print(f"{n} oracle demos, mean length {summary['mean_length']:.2f}")
    print("length histogram:", summary["length_histogram"])
    print("Wrote", p, "and", s)
    return EXIT_OK


def cmd_edp(a) -> int:
    cfg, out = _load(a)
    demos = read_demos(a.inp, cfg.env)
    edp = cfg.edp
    new = build_sft_set(demos, edp)
    before, after = tool_entropy(demos), tool_entropy(new)
    p = write_demos(new, out / "demos_edp.jsonl")
    table = pd.DataFrame(
        {"task": list(before), "entropy_before": list(before.values()), "entropy_after": [after[t] for t in before]}
    )
    t = out / "edp_tool_entropy.csv"
    table.to_csv(t, index=False)
    s = _write_json(
        out / "edp_summary.json",
        {"config_digest": cfg.digest, "edp": edp.to_dict(), "before": demo_summary(demos), "after": demo_summary(new)},
    )
    counts = new.perturbation_counts()
    print(f"records: {len(demos)} -> {len(new)}")
    print(f"order-perturbed: {counts['order_perturbed']}, tool-perturbed: {counts['tool_perturbed']}")
    print(table.to_string(index=False))
    print("Wrote", p, t, "and", s)
    return EXIT_OK


def cmd_sft(a) -> int:
    cfg, out = _load(a)
    demos = read_demos(a.inp, cfg.env)
    params, _ = _params(a, cfg)
    res = sft_update(params, demos, cfg.sft)
    c = save_checkpoint(out / "policy_sft.json", res.params, cfg.env, extra={"config_digest": cfg.digest})
    curve = out / "sft_curve.csv"
    pd.DataFrame({"epoch": range(len(res.loglik)), "mean_loglik": res.loglik}).to_csv(curve, index=False)
    print(f"mean log-likelihood {res.loglik[0]:.4f} -> {res.final_loglik:.4f}" if res.loglik else "no decisions")
    print("Wrote", c, "and", curve)
    return EXIT_OK


def cmd_rl(a) -> int:
    cfg, out = _load(a)
    params, extra = _params(a, cfg)
    train = cfg.train
    mar = MarState.initial(cfg.env.num_metrics, train.mar_epsilon, train.mar_beta)
    if "mar_state" in extra:
        mar = MarState.from_dict(extra["mar_state"])
    pool = ModelCallPool(cfg.pool, cfg.env)
    reports, telemetry = [], []
    for step in tqdm(range(train.steps), desc="rl", disable=None if train.progress else True):
        params, mar, rep = train_step(params, mar, train, cfg.env, pool, step)
        reports.append(rep)
        telemetry.append(telemetry_row(step, rep.mean_reward, mar, cfg.env.metric_ids))
    out.mkdir(parents=True, exist_ok=True)
    curve, tel, ps = out / "train_curve.csv", out / "mar_telemetry.csv", out / "pool_stats.csv"
    pd.DataFrame([r.to_row() for r in reports]).to_csv(curve, index=False)
    pd.DataFrame(telemetry).to_csv(tel, index=False)
    stats = pool.stats()
    stats.to_frame().to_csv(ps, index=False)
    c = save_checkpoint(
        out / "policy_rl.json",
        params,
        cfg.env,
        extra={"config_digest": cfg.digest, "mar_state": mar.to_dict(), "reward_mode": train.reward_mode},
    )
    if reports:
        last = reports[-1]
        print(f"{len(reports)} steps, final worst metric {last.worst_metric:.4f}")
        print("weights:", {m: round(float(w), 4) for m, w in zip(cfg.env.metric_ids, last.weights)})
    print("Wrote", curve, tel, ps, "and", c)
    peak = max((r.peak_in_flight for r in reports), default=0)
    if peak > train.max_parallel_rollouts or stats.exclusion_violations:
        raise InvariantViolation(
            f"in-flight peak {peak} (cap {train.max_parallel_rollouts}), "
            f"exclusion violations {stats.exclusion_violations}"
        )
    return EXIT_OK


def cmd_eval(a) -> int:
    cfg, out = _load(a)
    params, _ = _params(a, cfg)
    rep = evaluate(params, cfg.env, cfg.eval, None, cfg.train.workers, cfg.train.max_parallel_rollouts)
    s = _write_json(out / "eval_summary.json", {"config_digest": cfg.digest, **rep.to_dict()})
    b = out / "eval_breakdown.csv"
    rep.breakdown_frame().to_csv(b, index=False)
    print(pd.Series(rep.to_dict()["per_metric"]).to_string())
    print(f"worst metric {rep.worst_metric:.4f}, mean length {rep.mean_length:.2f}")
    print("Wrote", s, "and", b)
    return EXIT_OK


def cmd_stats(a) -> int:
    cfg, out = _load(a)
    params, _ = _params(a, cfg)
    rep = evaluate(params, cfg.env, cfg.eval, None, cfg.train.workers, cfg.train.max_parallel_rollouts)
    div = rep.diversity
    out.mkdir(parents=True, exist_ok=True)
    g = out / "diversity_groups.csv"
    div.to_frame().to_csv(g, index=False)
    s = _write_json(out / "diversity_summary.json", {"config_digest": cfg.digest, **div.summary()})
    effects = tool_effect_table(cfg.env, heldout_states(cfg.env, cfg.eval.seed, cfg.eval.n_states))
    e = out / "tool_effects.csv"
    effects.to_csv(e, index=False)
    print(f"distinct {div.distinct_fraction:.3f}, duplicate {div.duplicate_fraction:.3f}")
    print(f"order {div.order_fraction:.3f}, tool {div.tool_fraction:.3f}, groups with order diversity {div.groups_with_order_diversity:.3f}")
    print("distinct histogram:", div.distinct_histogram())
    print("Wrote", g, s, "and", e)
    return EXIT_OK


def cmd_pool_bench(a) -> int:
    # pool flags override the config's pool section
    cfg, out = _load(a)
    pc = cfg.pool
    rep = run_pool_bench(cfg.env, pc, n_requests=a.requests, workers=a.workers or 64, seed=cfg.seed)
    problems = rep.violations(pc.failure_rate)
    s = _write_json(
        out / "pool_bench.json",
        {"config_digest": cfg.digest, "pool": pc.to_dict(), **rep.to_dict(), "violations": problems},
    )
    r = out / "pool_resources.csv"
    rep.stats.to_frame().to_csv(r, index=False)
    print(f"requests: {rep.requests}, settled: {rep.settled} ({rep.succeeded} ok, {rep.exhausted} exhausted), errors: {rep.errors}")
    print(f"retried: {rep.retried}, exhausted: {rep.exhausted}, max attempts: {rep.max_attempts_seen}")
    print(f"max concurrency: {rep.stats.max_concurrency} / {pc.size}")
    print(f"mutual exclusion violations: {rep.stats.exclusion_violations}")
    print("Wrote", s, "and", r)
    if problems:
        raise InvariantViolation("; ".join(problems))
    return EXIT_OK


def cmd_ablate(a) -> int:
    cfg, out = _load(a)
    modes = list(EXPERIMENT_MODES) if a.mode == "all" else [a.mode]
    rows = []
    for mode in modes:
        rep = run_experiment(cfg, mode, out_dir=out / mode, workers=a.workers)
        f = rep.final
        rows.append(
            {
                "mode": mode,
                **{m: float(v) for m, v in zip(rep.metric_ids, f.per_metric)},
                "worst_metric": f.worst_metric,
                "mean_score": f.mean_score,
                "distinct_fraction": f.diversity.distinct_fraction,
                "mean_tool_entropy": f.diversity.mean_tool_entropy,
                "tool_calls": f.tool_calls,
                "digest": rep.digest,
            }
        )
        print(f"{mode}: worst {f.worst_metric:.4f}, distinct {f.diversity.distinct_fraction:.3f}, digest {rep.digest[:12]}")
        peak = max((s.peak_in_flight for s in rep.steps), default=0)
        if peak > cfg.train.max_parallel_rollouts:
            raise InvariantViolation(f"{mode}: in-flight peak {peak} above cap")
    table = pd.DataFrame(rows)
    t = out / "ablation_table.csv"
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(t, index=False)
    print("Wrote", t)
    return EXIT_OK


def cmd_sweep(a) -> int:
    cfg, out = _load(a)
    values = [float(v) for v in a.values.split(",") if v.strip()]
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"--values: {v} is not in [0, 1]")
    df = run_sweep(cfg, a.param, values, mode=a.mode, workers=a.workers)
    out.mkdir(parents=True, exist_ok=True)
    p = out / f"sweep_{a.param}.csv"
    df.to_csv(p, index=False)
    print(df.to_string(index=False))
    print("Wrote", p)
    return EXIT_OK


# ---------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=str(DEFAULT_CONFIG), help="experiment YAML")
    common.add_argument("--seed", type=_seed, default=None, help="overrides the config seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--workers", type=_positive_int, default=None)

    ap = argparse.ArgumentParser(prog="agent_harness", description=__doc__.strip().splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-demos", parents=[common], help="oracle demonstrations")
    p.add_argument("--n", type=_positive_int, default=None)
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("edp", parents=[common], help="exploration-driven perturbation")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--alpha-t", type=_unit, default=None)
    p.add_argument("--alpha-m", type=_unit, default=None)
    p.set_defaults(func=cmd_edp)

    p = sub.add_parser("sft", parents=[common], help="behavior cloning")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--checkpoint", default=None, help="start from these params (default: zeros)")
    p.set_defaults(func=cmd_sft)

    for name, func, help_ in (
        ("rl", cmd_rl, "group-rollout RL"),
        ("eval", cmd_eval, "held-out evaluation"),
        ("stats", cmd_stats, "diversity and tool-effect tables"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--checkpoint", default=None)
        p.set_defaults(func=func)
        if name == "rl":
            p.add_argument("--reward-mode", default=None)
            p.add_argument("--group-size", type=_positive_int, default=None)
            p.add_argument("--batch", type=_positive_int, default=None)
            p.add_argument("--steps", type=int, default=None)
            p.add_argument("--pool-size", type=_positive_int, default=None)
            p.add_argument("--failure-rate", type=float, default=None)

    p = sub.add_parser("pool-bench", parents=[common], help="pool stress test")
    p.add_argument("--pool-size", type=_positive_int, default=None)
    p.add_argument("--requests", type=_positive_int, default=512)
    p.add_argument("--failure-rate", type=float, default=None)
    p.add_argument("--latency-scale", type=float, default=None)
    p.add_argument("--jitter-ms", type=float, default=None)
    p.set_defaults(func=cmd_pool_bench)

    for name, func in (("ablate", cmd_ablate), ("sweep", cmd_sweep)):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--alpha-t", type=_unit, default=None)
        p.add_argument("--alpha-m", type=_unit, default=None)
        p.add_argument("--reward-mode", default=None)
        p.add_argument("--group-size", type=_positive_int, default=None)
        p.add_argument("--batch", type=_positive_int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.set_defaults(func=func)
        if name == "ablate":
            p.add_argument("--mode", choices=[*EXPERIMENT_MODES, "all"], default="full")
        else:
            p.add_argument("--param", choices=["alpha_t", "alpha_m"], required=True)
            p.add_argument("--values", default="0,0.1,0.2,0.3,0.4,0.5")
            p.add_argument("--mode", choices=list(EXPERIMENT_MODES), default="full")
    return ap


def main(argv=None) -> int:
    setup_logging()
    a = build_parser().parse_args(argv)
    try:
        return a.func(a)
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, DemoFormatError, CheckpointError, TrainStepError, EvalError, PoolError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
