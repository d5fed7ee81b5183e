import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from graspsense.checkpoint import load_checkpoint  # noqa: E402
from graspsense.engine import InferenceEngine  # noqa: E402
from graspsense.sim import SimConfig, generate_dataset  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def small_dataset():
    """13 two-second episodes, one per shape."""
    return generate_dataset(13, seed=5, config=SimConfig(duration=2.0))


@pytest.fixture(scope="session")
def golden_engine():
    return InferenceEngine(load_checkpoint(FIXTURES / "golden_slip.ckpt"),
                           load_checkpoint(FIXTURES / "golden_shape.ckpt"))


def pytest_terminal_summary(terminalreporter):
    from criteria import summary_lines
    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
