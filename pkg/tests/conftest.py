import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sparseatk import data

# Desk-scale corpus shared by the expensive fixtures. Sized so a small CNN
# clears 95% test accuracy in 3 epochs while the whole suite stays fast.
CORPUS_SEED = 0
N_TRAIN = 9000
N_TEST = 1500


@pytest.fixture(scope="session")
def digits():
    return data.make_digits_dataset(CORPUS_SEED, N_TRAIN, N_TEST)


@pytest.fixture(scope="session")
def victim(digits):
    train_set, _ = digits
    result = data.train(data.synth_model(0, "mnist_conv"), train_set,
                        epochs=3, learning_rate=0.01, seed=0)
    return result


@pytest.fixture(scope="session")
def victim_model(victim):
    return victim.model


@pytest.fixture(scope="session")
def substitute_model(digits):
    train_set, _ = digits
    return data.train(data.synth_model(11, "mnist_conv_alt"), train_set,
                      epochs=3, learning_rate=0.01, seed=11).model


@pytest.fixture(scope="session")
def tiny_model():
    return data.synth_model(5, "tiny")


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
