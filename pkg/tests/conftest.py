import numpy as np
import pytest
import torch

from vidconcepts.config import ExperimentConfig


def micro_config(**overrides):
    """C=16 model, K_s=K_d=4, tiny clips: for gradient and pipeline checks."""
    data = {
        "videokit": {"n_samples": 16, "shape": [4, 8, 8, 3], "n_static_classes": 2,
                     "n_dynamic_classes": 2},
        "encoder": {"widths": [8, 16], "temporal_strides": [1, 2], "spatial_strides": [2, 2]},
        "conceptspace": {"K_s": 4, "K_d": 4},
        "localcontrast": {"K_top": 2},
        "trainer": {"epochs": 2, "batch_size": 8, "warmup_epochs": 1, "checkpoint_every": 1},
    }
    for section, values in overrides.items():
        data.setdefault(section, {}).update(values)
    return ExperimentConfig.from_dict(data)


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def rng_tensor(rng, *shape, scale=1.0):
    return torch.from_numpy(rng.standard_normal(shape) * scale)


# one line per acceptance criterion, echoed after the run whatever the capture mode
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
