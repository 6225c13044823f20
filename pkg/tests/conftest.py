import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from selfalign.config import PairPolicy, continuous_defaults, discrete_defaults  # noqa: E402


def tiny_config(mode="Continuous", **kw):
    """A configuration small enough for unit tests (a few seconds per run)."""
    cfg = continuous_defaults() if mode == "Continuous" else discrete_defaults()
    cfg.world.prompts_per_category = 8
    cfg.world.heldout_per_category = 8
    cfg.iterations = 2
    cfg.optim.steps = 10
    cfg.optim.warmup = 2
    cfg.optim.batch_size = 64
    if mode == "Continuous":
        cfg.pairs = PairPolicy(samples_per_prompt=8, top_n=3, last_n=3)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg.validate()


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    RESULTS = module.RESULTS
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])
