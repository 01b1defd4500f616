"""Shared fixtures: tiny detectors, tiny scene sets and hypothesis profiles."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sdcot.data import DEFAULT_CATALOG, SceneParams, generate_dataset
from sdcot.detector import Detector, DetectorConfig, init_params
from sdcot.numerics import RngStream

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def tiny_config(n_classes=3, **kw):
    args = dict(n_points=64, n_seeds=16, n_proposals=4, n_classes=n_classes, feature_dim=8, n_neighbors=4)
    args.update(kw)
    return DetectorConfig(**args)


def tiny_detector(n_classes=3, seed=0, names=None, **kw):
    cfg = tiny_config(n_classes, **kw)
    names = names or DEFAULT_CATALOG.names[:n_classes]
    return Detector(cfg, init_params(cfg, RngStream(seed, "init")), list(names), DEFAULT_CATALOG.mean_size())


@pytest.fixture
def detector():
    return tiny_detector()


@pytest.fixture(scope="session")
def small_scenes():
    params = SceneParams(n_points=256)
    return generate_dataset(DEFAULT_CATALOG, 40, 10, 3, params)


@pytest.fixture
def rng():
    return RngStream(1234, "test")


def random_cloud(seed, n=64, scale=2.0):
    return np.random.default_rng(seed).uniform(-scale, scale, size=(n, 3))


def generic_point(det, seed=0):
    """Give every bias a small random value so no ReLU sits exactly on its kink.

    Freshly initialised biases are zero and each seed is its own neighbour
    (relative coordinate 0), which puts those pre-activations at exactly 0.
    """
    r = np.random.default_rng(seed)
    for name in det.params.names():
        if name.endswith(".b"):
            det.params.replace(name, r.uniform(-0.2, 0.2, size=det.params[name].shape))
    return det


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    """Remember one acceptance verdict; printed in the terminal summary and returned for asserts."""
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
