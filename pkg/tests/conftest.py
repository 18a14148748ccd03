"""Shared fixtures: the default planted corpus and its trained pipeline state.

Session-scoped because meta-training and cache construction are the expensive
steps; tests treat these as read-only (the cache's consult counters are the
one mutable field, and tests that assert on them make their own).
"""

import pytest

from gradsel.estimate import SolveConfig
from gradsel.linearize import build_cache
from gradsel.model import ModelConfig, Network
from gradsel.project import Projector
from gradsel.taskgen import gen_multitask_gaussian
from gradsel.trainer import TrainConfig, meta_train

DEFAULT_CORPUS = dict(
    n=20,
    samples_per_task=40,
    dim=10,
    frac_helpful=0.5,
    rotation_deg=135.0,
    label_noise=0.3,
    seed=11,
)

META_CFG = TrainConfig(
    step_size=0.3, batch_size=32, max_epochs=300, early_stop_patience=30,
    seed=3, optimizer="sgd",
)

FINETUNE_CFG = TrainConfig(
    step_size=0.1, batch_size=4096, max_epochs=60, early_stop_patience=3,
    seed=4, optimizer="sgd",
)

SOLVE_CFG = SolveConfig(ridge_lambda=0.1)


@pytest.fixture(scope="session")
def gauss_corpus():
    return gen_multitask_gaussian(**DEFAULT_CORPUS)


@pytest.fixture(scope="session")
def gauss_net():
    return Network(
        ModelConfig(input_dim=10, hidden_dims=(320,), activation="tanh",
                    num_classes=2, init_scale=0.5, seed=7)
    )


@pytest.fixture(scope="session")
def theta_star(gauss_net, gauss_corpus):
    return meta_train(gauss_net, gauss_corpus, META_CFG).params


@pytest.fixture(scope="session")
def projector(gauss_net):
    return Projector(p=gauss_net.param_count, d=100, seed=5)


@pytest.fixture(scope="session")
def cache(gauss_net, theta_star, gauss_corpus, projector):
    return build_cache(gauss_net, theta_star, gauss_corpus, projector)
