import math

import numpy as np
import pytest

from scalelaw.forms import OursParams
from scalelaw.verify import SynthDesign, synth_grid

LN10 = math.log(10)

TRUE = OursParams(e=0.5, a=50.0, b=100.0, c=0.5, alpha=0.4, beta=0.35, gamma=0.3, delta=0.6)

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(key: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[key] = (bool(ok), detail)


@pytest.fixture(scope="session")
def true_params():
    return TRUE


@pytest.fixture(scope="session")
def small_design():
    return SynthDesign(
        n_values=np.logspace(5, 8, 4),
        d_values=np.logspace(4, 7, 4),
        epochs=(1.0, 4.0, 16.0, 64.0),
    )


@pytest.fixture(scope="session")
def small_grid(small_design):
    """64-cell noiseless grid of the reference law."""
    return synth_grid(TRUE, LN10, small_design, name="small")


@pytest.fixture(scope="session")
def noisy_grid(small_design):
    design = SynthDesign(small_design.n_values, small_design.d_values, small_design.epochs, sigma=0.01, seed=3)
    return synth_grid(TRUE, LN10, design, name="noisy")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}  {detail}")
