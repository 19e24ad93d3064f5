import numpy as np
import pytest

from icse.transformer import ModelConfig, init_weights

TOY = ModelConfig(n_layers=2, n_heads=2, n_ctx=6, d_filter=8)


def random_weights(cfg, seed=0, scale=0.3):
    """Weights with every tensor (including the zero-initialised head) randomised."""
    rng = np.random.default_rng(seed)
    return {k: v + rng.normal(0.0, scale, v.shape) for k, v in init_weights(cfg, 0).items()}


@pytest.fixture
def toy_cfg():
    return TOY


@pytest.fixture
def toy_weights():
    return random_weights(TOY)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
