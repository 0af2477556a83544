import numpy as np
import pytest
import torch

from surgseg.data import default_registry, synth_generate

# desk-scale optimiser settings shared by training tests (random init, not fine-tuning)
FAST_LR = dict(lr_base=1e-4, lr_max=2e-3, cycle_length_steps=200)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def registry():
    return default_registry(2, 2)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, registry):
    root = tmp_path_factory.mktemp("synth_small")
    return synth_generate(root, seed=3, n_train=16, n_val=8, size=64, registry=registry)


# (criterion number, title, passed, detail) rows filled in by test_acceptance
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num}. {title}: {detail}")
