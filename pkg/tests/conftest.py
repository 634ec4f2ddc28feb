"""Shared fixtures and the acceptance summary hook."""

import numpy as np
import pytest
import torch

from adaptbench.datasets import SyntheticShiftSpec, make_synthetic_domain_pair
from adaptbench.models import TrainConfig, train_source

# criterion id -> (description, outcome) filled in by tests/test_acceptance.py
ACCEPTANCE_OUTCOMES = {}


def pytest_configure(config):
    torch.set_num_threads(max(1, torch.get_num_threads()))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_OUTCOMES):
        desc, outcome = ACCEPTANCE_OUTCOMES[cid]
        terminalreporter.write_line(f"[criterion {cid}] {outcome}: {desc}")


@pytest.fixture(scope="session")
def tiny_pair():
    """Small 4-class domain pair; shared across unit tests needing real data."""
    spec = SyntheticShiftSpec(
        class_count=4,
        samples_per_class=20,
        image_size=(16, 16, 3),
        shift_kind="color_jitter",
        shift_strength=0.3,
        seed=11,
    )
    return make_synthetic_domain_pair(spec)


@pytest.fixture(scope="session")
def tiny_model(tiny_pair):
    """A briefly trained classifier on the tiny source domain."""
    source, _ = tiny_pair
    # Small batches so the BN running stats see enough updates to converge.
    cfg = TrainConfig(epochs=20, batch_size=16, lr=0.05, seed=7)
    return train_source(source, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
