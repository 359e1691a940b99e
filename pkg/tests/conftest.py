import copy
import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from newtonfly.config import config_from_mapping  # noqa: E402

SMALL = {
    "seed": 0,
    "output_dir": "unused",
    "scene": {"arena_size": [20.0, 20.0, 8.0], "goal_distance": [6.0, 10.0], "obstacle_count": [3, 5]},
    "train": {"envs": 4, "steps": 20, "iterations": 10},
    "policy": {"preset": "tiny"},
    "eval": {"steps": 60, "episodes": 4},
    "ppo": {"envs": 4, "minibatch": 40, "epochs": 2},
}


def merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def make_cfg(**sections):
    """Small experiment config; keyword arguments are merged section by section."""
    return config_from_mapping(merge(SMALL, sections))


@pytest.fixture
def small_cfg():
    return make_cfg()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
