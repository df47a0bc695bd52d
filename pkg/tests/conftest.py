import numpy as np
import pytest
import torch

from sourcefree.data import reset_access_log

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _clean_audit():
    reset_access_log()
    yield
    reset_access_log()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_CONFIG = {
    "seed": 0,
    "synthetic": {"num_classes": 5, "images_per_class": 6, "image_size": 16},
    "labels": {"source": [0, 1, 2], "target": [1, 2, 3, 4]},
    "negatives": {"per_class": 3},
    "arch": {"conv_widths": [4, 8], "hidden_dim": 8, "u_dim": 4},
    "procurement": {"pretrain_steps": 5, "max_iter": 8, "update_iter": 4, "batch_size": 8, "prior_samples_per_class": 4},
    "adaptation": {"iterations": 3, "batch_size": 8},
}


@pytest.fixture
def tiny_config(tmp_path):
    import copy

    cfg = copy.deepcopy(TINY_CONFIG)
    cfg["output_dir"] = str(tmp_path / "run")
    return cfg


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
