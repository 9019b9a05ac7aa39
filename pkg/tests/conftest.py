import numpy as np
import pytest
import torch

from ristcorr.config import ModelConfig
from ristcorr.model import build_model

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model():
    return build_model(ModelConfig.preset("test"), seed=7)


@pytest.fixture
def model32():
    return build_model(ModelConfig.preset("test", dtype="float32"), seed=7)


def random_cloud(rng, n=128):
    pts = rng.normal(size=(n, 3))
    pts -= pts.mean(0)
    return pts / np.linalg.norm(pts, axis=1).max()


def rescale_head(model, pts):
    """Scale the decoder output so self-reconstruction of ``pts`` has the input's norm.

    Freshly initialized models reconstruct to near zero, which makes finite
    differences of reconstruction losses roundoff dominated.  The decoder is
    positively homogeneous in its head weights, so this only changes the scale.
    """
    with torch.no_grad():
        x = model.as_tensor(pts)
        rec = model.self_reconstruct(model.encode(x))
        model.decoder.head.weight.mul_(x.norm() / rec.norm())
    return model


ACCEPTANCE_LINES: list = []


@pytest.fixture
def report_criterion():
    """Record one pass/fail line for the acceptance summary."""

    def record(name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{name} {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
