"""
Multi-seed acceptance experiments on the shipped desk-scale config.

- diversity: full pipeline vs no EDP (distinct-trajectory fraction, tool entropy,
  majority-identical regime of the baseline)
- reward hacking: median worst metric under mar vs vanilla / no_decouple / no_weights
- determinism: identical report digests across reruns and worker counts
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import pandas as pd
from tqdm import tqdm

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from modules.config import load_experiment_config, setup_logging  # noqa: E402
from modules.rl_trainer import run_experiment  # noqa: E402

REWARD_BASELINES = ("vanilla", "no_decouple", "no_weights")


def diversity_check(cfg, seeds, workers):
    rows = []
    for s in tqdm(seeds, desc="diversity"):
        c = load_seeded(cfg, s)
        for mode in ("full", "no_edp"):
            f = run_experiment(c, mode, workers=workers).final
            rows.append(
                {
                    "seed": s,
                    "mode": mode,
                    "distinct_fraction": f.diversity.distinct_fraction,
                    "mean_tool_entropy": f.diversity.mean_tool_entropy,
                    "majority_identical_fraction": f.diversity.majority_identical_fraction,
                }
            )
    df = pd.DataFrame(rows)
    m = df.groupby("mode").mean(numeric_only=True)
    ok = (
        m.loc["full", "distinct_fraction"] > m.loc["no_edp", "distinct_fraction"]
        and m.loc["full", "mean_tool_entropy"] > m.loc["no_edp", "mean_tool_entropy"]
        and m.loc["no_edp", "majority_identical_fraction"] > 0.5
    )
    return df, bool(ok)


def reward_check(cfg, seeds, workers):
    rows = []
    for s in tqdm(seeds, desc="reward"):
        c = load_seeded(cfg, s)
        for rm in ("mar", *REWARD_BASELINES):
            sub = replace(c, train=replace(c.train, reward_mode=rm))
            f = run_experiment(sub, "full", workers=workers).final
            rows.append({"seed": s, "reward_mode": rm, "worst_metric": f.worst_metric, "mean_score": f.mean_score})
    df = pd.DataFrame(rows)
    med = df.groupby("reward_mode")["worst_metric"].median()
    ok = all(med["mar"] >= med[b] for b in REWARD_BASELINES) and med["mar"] > med["vanilla"]
    return df, bool(ok)


def determinism_check(cfg, worker_counts=(1, 4)):
    digests = {f"workers={w}": run_experiment(cfg, "full", workers=w).digest for w in worker_counts}
    digests["rerun"] = run_experiment(cfg, "full", workers=worker_counts[0]).digest
    return digests, len(set(digests.values())) == 1


def load_seeded(cfg, seed):
    return load_experiment_config(cfg.source, {"seed": int(seed)})


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "experiment_default.yaml"))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--out", default="out/acceptance")
    ap.add_argument("--only", choices=["diversity", "reward", "determinism"], default=None)
    a = ap.parse_args()
    setup_logging()

    cfg = load_experiment_config(a.config)
    seeds = [cfg.seed + k for k in range(a.seeds)]
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}

    if a.only in (None, "diversity"):
        df, ok = diversity_check(cfg, seeds, a.workers)
        df.to_csv(out / "acceptance_diversity.csv", index=False)
        results["diversity"] = ok
        print(df.groupby("mode").mean(numeric_only=True).drop(columns="seed").to_string())
    if a.only in (None, "reward"):
        df, ok = reward_check(cfg, seeds, a.workers)
        df.to_csv(out / "acceptance_reward.csv", index=False)
        results["reward"] = ok
        print(df.groupby("reward_mode")["worst_metric"].median().to_string())
    if a.only in (None, "determinism"):
        digests, ok = determinism_check(cfg)
        results["determinism"] = ok
        results["digests"] = digests

    (out / "acceptance.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for k in ("diversity", "reward", "determinism"):
        if k in results:
            print(f"{k}: {'PASS' if results[k] else 'FAIL'}")
    print("Wrote", out / "acceptance.json")
    sys.exit(0 if all(v for k, v in results.items() if k != "digests") else 3)


if __name__ == "__main__":
    main()
