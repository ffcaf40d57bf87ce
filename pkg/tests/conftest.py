import numpy as np
import pytest

import quadfit.data as dt
import quadfit.toy as toy


@pytest.fixture(scope="session")
def model():
    return toy.toy_model()


@pytest.fixture(scope="session")
def seq(model):
    # 7-frame trot: enough for one T=5 clip plus sliding-window slack
    return dt.synth_sequence(model, "trot", 7, seed=0)


@pytest.fixture(scope="session")
def clip(seq):
    return dt.clips_from_sequence(seq, T=5)[1]


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
