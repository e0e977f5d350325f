import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pointy.backbone import ModelConfig  # noqa: E402
from pointy.geometry import PointCloud  # noqa: E402


def tiny_config(**kw):
    base = dict(D=12, H=4, L=2, P=4, k=4, n_points=32, merge_schedule=(2, 1), num_classes=3)
    return ModelConfig(**{**base, **kw})


def random_cloud(seed, n=64, label=None):
    return PointCloud(np.random.default_rng(seed).normal(size=(n, 3)), label=label)


@pytest.fixture
def tiny():
    return tiny_config()


# One line per acceptance criterion, echoed again in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
