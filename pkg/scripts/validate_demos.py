import argparse
import sys
from pathlib import Path

import pandas as pd

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from modules.config import ConfigError, load_experiment_config  # noqa: E402
from modules.demo_gen import DemoFormatError, demo_summary, read_demos, replay_consistent  # noqa: E402


def build_report(fp: Path, demos) -> tuple[str, int]:
    """Markdown report plus the number of records that fail to replay."""
    s = demo_summary(demos)
    bad = [i for i, it in enumerate(demos.items) if not replay_consistent(demos.env, it)]
    known = {t.tool_id for t in demos.env.tools}
    unknown = sorted({m for it in demos.items for _, m in it.trajectory.steps} - known)

    lines = ["# Demonstrations: Validation Report", ""]
    lines += [f"**File:** {fp}", f"**Records:** {s['records']:,}", ""]

    lines += ["## Provenance distribution"]
    lines += [pd.Series(s["provenance"]).to_string(), ""]

    lines += ["## Trajectory length histogram"]
    lines += [pd.Series(s["length_histogram"], name="records").rename_axis("length").to_string(), ""]

    lines += ["## Tool frequencies"]
    freq = pd.Series(s["tool_frequencies"]).sort_values(ascending=False)
    lines += [freq.to_string(), ""]

    lines += ["## Per-task tool entropy (nats)"]
    lines += [pd.Series(s["tool_entropy"]).round(4).to_string(), ""]

    lines += ["## Sanity checks"]
    lines += [f"- Records failing replay: {len(bad)}" + (f" (first: {bad[:5]})" if bad else "")]
    lines += [f"- Unknown tools: {unknown if unknown else 'None'}"]
    lines += [f"- Oracle tool executions: {s['oracle_tool_calls']:,}"]
    return "\n".join(lines) + "\n", len(bad)


def main():
    ap = argparse.ArgumentParser(description="Validate a demonstration file and write a markdown report.")
    ap.add_argument("--in", dest="inp", required=True)
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "experiment_default.yaml"))
    ap.add_argument("--report", default="validation_report.md")
    a = ap.parse_args()

    fp, rp = Path(a.inp), Path(a.report)
    if not fp.exists():
        print(f"File not found: {fp}")
        sys.exit(1)
    try:
        cfg = load_experiment_config(a.config)
        demos = read_demos(fp, cfg.env)
    except (ConfigError, DemoFormatError) as e:
        print(f"error: {e}")
        sys.exit(1)

    text, bad = build_report(fp, demos)
    rp.write_text(text, encoding="utf-8")
    print("Wrote", rp)
    sys.exit(3 if bad else 0)


if __name__ == "__main__":
    main()
