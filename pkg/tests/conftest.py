from __future__ import annotations

import numpy as np
import pytest

from steeradv.pipeline import PipelineConfig, build_corpus, finetune, pretrain
from steeradv.steering import Experts

SMALL = PipelineConfig(n_scenarios=16, pretrain_steps=300, epochs=30, group_size=16, batch_size=8)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corpus():
    return build_corpus(SMALL)


@pytest.fixture(scope="session")
def scenario(corpus):
    return corpus[0]


@pytest.fixture(scope="session")
def theta_ref(corpus):
    return pretrain(corpus, SMALL)


@pytest.fixture(scope="session")
def trained(corpus, theta_ref):
    """``(experts, histories)`` fine-tuned on the small corpus."""
    adv, h_adv = finetune(theta_ref, corpus, SMALL, "adv")
    real, h_real = finetune(theta_ref, corpus, SMALL, "real")
    return Experts(adv, real), {"adv": h_adv, "real": h_real}


@pytest.fixture(scope="session")
def experts(trained):
    return trained[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
