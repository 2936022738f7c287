import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cmbdet.config import DetectorConfig  # noqa: E402
from cmbdet.synthetic import PhantomSpec, generate_phantom  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_spec():
    return PhantomSpec(shape=(48, 48, 24), n_cmbs=2, n_vessels=1, n_calcifications=1,
                       cmb_diameter_range_mm=(2.0, 5.0), min_gap_mm=2.0, seed=11)


@pytest.fixture(scope="session")
def small_phantom(small_spec):
    return generate_phantom(small_spec)


@pytest.fixture
def tiny_detector_config():
    return DetectorConfig(base_channels=2, fused_channels=4, target_slices=48,
                          train_crop=(16, 16, 8), window=(24, 24, 24))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
