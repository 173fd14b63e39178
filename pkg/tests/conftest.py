import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from depthgrow.gradcheck import random_grown_model, tiny_config  # noqa: E402
from depthgrow.growth import ShallowModel, grow  # noqa: E402
from depthgrow.transformer import ModelConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def make_grown(N=1, M=1, precision=64, seed=0, d_model=8, vocab_size=12, random_top=True):
    """Tiny grown model; ``random_top`` replaces the zero-initialised projections."""
    cfg = tiny_config(n_bottom_blocks=N, n_top_blocks=M, precision=precision, d_model=d_model, vocab_size=vocab_size)
    if random_top:
        return random_grown_model(cfg, seed)
    shallow = ShallowModel(cfg, seed=seed)
    return grow(shallow.to_checkpoint(), M, init_seed=seed + 1, cfg=cfg)


@pytest.fixture
def grown64():
    return make_grown()


def small_cfg(**kw) -> ModelConfig:
    base = dict(d_model=16, d_ff=32, n_heads=2, n_bottom_blocks=1, n_top_blocks=1, vocab_size=16, dropout=0.0, max_len=32)
    base.update(kw)
    return ModelConfig(**base)


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion-marked test


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion listed in the terminal summary")
    config._acceptance_lines = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "FAIL"
        details = ", ".join(f"{k}={v}" for k, v in rep.user_properties)
        line = f"{status}  {marker.args[0]}" + (f"  [{details}]" if details else "")
        item.config._acceptance_lines.append(line)
        reporter = item.config.pluginmanager.get_plugin("terminalreporter")
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(f"ACCEPTANCE {line}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
