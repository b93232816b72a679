from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from modules.config import experiment_from_dict  # noqa: E402
from modules.demo_gen import generate_oracle_demos  # noqa: E402
from modules.synth_env import EnvConfig  # noqa: E402

CONFIGS = ROOT / "configs"
GOLDEN = Path(__file__).resolve().parent / "golden"


def pytest_addoption(parser):
    parser.addoption("--update-golden", action="store_true", default=False, help="rewrite tests/golden files")


def tiny_env_dict(**overrides) -> dict:
    """Two degradations, two tasks, two tools each; denoising leaks into blur."""
    raw = {
        "degradations": ["noise", "blur"],
        "appearance": ["sharpness", "smoothness"],
        "max_horizon": 4,
        "clip_max": 2.0,
        "init": {"min_active": 1, "max_active": 2, "low": 0.3, "high": 1.2},
        "tasks": [{"id": "denoise", "target": "noise"}, {"id": "deblur", "target": "blur"}],
        "tools": [
            {"id": "dn_a", "task": "denoise", "A": [[0.1, 0.0], [0.3, 1.0]], "e": {"smoothness": 0.2}},
            {"id": "dn_b", "task": "denoise", "A": {"diag": {"noise": 0.5}}},
            {"id": "db_a", "task": "deblur", "A": {"diag": {"blur": 0.2, "noise": 1.2}}},
            {"id": "db_b", "task": "deblur", "A": {"diag": {"blur": 0.5}}, "e": {"sharpness": 0.3}},
        ],
        "metrics": [
            {"id": "fid", "kind": "fidelity", "form": "exp_l2"},
            {"id": "perc", "kind": "perceptual", "form": "logistic", "gain": 1.0, "w_p": {"sharpness": 1.0}},
        ],
    }
    raw.update(overrides)
    return raw


@pytest.fixture(scope="session")
def env() -> EnvConfig:
    return EnvConfig.from_file(CONFIGS / "env_default.yaml")


@pytest.fixture
def tiny_env() -> EnvConfig:
    return EnvConfig.from_dict(tiny_env_dict())


@pytest.fixture(scope="session")
def default_demos(env):
    return generate_oracle_demos(env, 200, [20251019, 10])


def small_experiment_dict(**sections) -> dict:
    raw = {
        "seed": 7,
        "env": "env_default.yaml",
        "n_demos": 24,
        "edp": {"alpha_t": 0.3, "alpha_m": 0.4},
        "sft": {"lr": 0.2, "epochs": 20},
        "train": {"batch_size": 4, "group_size": 4, "steps": 3, "workers": 1, "max_parallel_rollouts": 8},
        "pool": {"size": 4},
        "eval": {"n_states": 16, "diversity_states": 4, "diversity_group": 4, "oracle_baseline": False},
    }
    for k, v in sections.items():
        if isinstance(v, dict) and isinstance(raw.get(k), dict):
            raw[k] = {**raw[k], **v}
        else:
            raw[k] = v
    return raw


@pytest.fixture
def small_cfg():
    return experiment_from_dict(small_experiment_dict(), base_dir=CONFIGS)


@pytest.fixture
def golden(request):
    """
    golden(name, text): compare against tests/golden/<name>.

    With `atol`, both sides are JSON objects of numbers or number lists compared
    key by key. A missing file fails the test; `pytest --update-golden` rewrites.
    """
    update = request.config.getoption("--update-golden")

    def check(name: str, text: str, atol: float | None = None) -> None:
        path = GOLDEN / name
        if update:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
            return
        if not path.exists():
            pytest.fail(f"missing golden file tests/golden/{name}; generate it with `pytest --update-golden`")
        expected = path.read_text(encoding="utf-8")
        if atol is None:
            assert text == expected
            return
        want, got = json.loads(expected), json.loads(text)
        assert sorted(got) == sorted(want)
        for key in want:
            np.testing.assert_allclose(got[key], want[key], rtol=0, atol=atol, err_msg=key)

    return check
