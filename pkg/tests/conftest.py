import numpy as np
import pytest

from moei2.calibration import make_calibration
from moei2.model import Dense, ModelConfig, random_init


@pytest.fixture
def small_config():
    return ModelConfig(vocab_size=16, d_model=6, d_ff=10, n_layers=2, experts_per_layer=4, top_k=2, seed=7)


@pytest.fixture
def small_model(small_config):
    return random_init(small_config)


@pytest.fixture
def small_calib(small_config):
    return make_calibration(small_config, 6, 9, seed=3)


@pytest.fixture(scope="session")
def default_model():
    return random_init(ModelConfig(seed=0))


@pytest.fixture(scope="session")
def default_calib():
    return make_calibration(ModelConfig(), 32, 32, seed=1)


def starve_expert(model, layer, expert):
    """Make ``expert`` in ``layer`` unreachable by the router.

    Embedding coordinate 0 is forced to be >= 1, so the layer-0 mix has a
    positive coordinate 0 and a router row of -1e3 * e0 always scores last.
    Only valid for layer 0.
    """
    assert layer == 0
    model.embedding[:, 0] = 1.0 + np.abs(model.embedding[:, 0])
    row = np.zeros(model.config.d_model)
    row[0] = -1e3
    model.layers[layer].router[expert] = row
    return model


def duplicate_expert(model, layer, src, dst):
    """Copy expert ``src`` (weights and router row) over ``dst``."""
    e = model.layers[layer].experts[src]
    model.layers[layer].experts[dst].gate = Dense(e.gate.w.copy())
    model.layers[layer].experts[dst].up = Dense(e.up.w.copy())
    model.layers[layer].experts[dst].down = Dense(e.down.w.copy())
    model.layers[layer].router[dst] = model.layers[layer].router[src]
    return model


# (criterion, passed, detail) rows recorded by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE.append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
