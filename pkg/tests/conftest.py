import warnings

import numpy as np
import pytest
import torch

warnings.filterwarnings("ignore", message=".*TBB.*")

from splatlayers.body_model import make_toy_model
from splatlayers.template import build_layered_template


@pytest.fixture(scope="session")
def toy_model():
    return make_toy_model(0)


@pytest.fixture(scope="session")
def layered(toy_model):
    return build_layered_template(toy_model, levels=1)


@pytest.fixture(scope="session")
def coarse_layered(toy_model):
    return build_layered_template(toy_model, levels=0, field_res=32)


@pytest.fixture(scope="session")
def toy_scene_dir(tmp_path_factory):
    from splatlayers.assets_io import make_toy_scene

    out = tmp_path_factory.mktemp("toy")
    make_toy_scene(out, seed=0)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_batch(rng, n, dtype=torch.float64, spread=0.5, scale=(0.02, 0.1), labels=None):
    from scipy.spatial.transform import Rotation

    from splatlayers.renderer import GaussianBatch

    rot = Rotation.random(n, random_state=int(rng.integers(1 << 31))).as_matrix() if n else np.zeros((0, 3, 3))
    return GaussianBatch(
        torch.tensor(rng.normal(0, spread, (n, 3)), dtype=dtype),
        torch.tensor(rot, dtype=dtype),
        torch.tensor(rng.uniform(*scale, (n, 3)), dtype=dtype),
        torch.tensor(rng.uniform(0.2, 0.9, n), dtype=dtype),
        torch.tensor(rng.uniform(0, 1, (n, 3)), dtype=dtype),
        rng.integers(0, 5, n) if labels is None else labels,
    )


# acceptance rows collected by test_acceptance.py, echoed after the run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for row in ACCEPTANCE:
        terminalreporter.write_line(row.line())
    by_criterion: dict = {}
    for row in ACCEPTANCE:
        by_criterion.setdefault(row.criterion, []).append(row.passed)
    for c in sorted(by_criterion):
        verdict = "PASS" if all(by_criterion[c]) else "FAIL"
        terminalreporter.write_line(f"criterion {c:>2}: {verdict} ({sum(by_criterion[c])}/{len(by_criterion[c])} checks)")
