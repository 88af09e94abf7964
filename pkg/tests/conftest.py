import numpy as np
import pytest

from r2mdp.mdp import TabularMdp

STAY, GO = 0, 1


def make_chain2(mu0=(1.0, 0.0)):
    """Two states; "stay" self-loops, "go" swaps; reward 1 in state 1; gamma 0.5."""
    P = np.zeros((2, 2, 2))
    P[0, STAY, 0] = P[1, STAY, 1] = 1.0
    P[0, GO, 1] = P[1, GO, 0] = 1.0
    r = np.array([[0.0, 0.0], [1.0, 1.0]])
    return TabularMdp(P, r, 0.5, np.asarray(mu0))


def make_one_state():
    """One self-looping state, two actions with rewards 1 and 2, gamma 0.5."""
    return TabularMdp(np.ones((1, 2, 1)), np.array([[1.0, 2.0]]), 0.5, np.ones(1))


@pytest.fixture
def chain2():
    return make_chain2()


@pytest.fixture
def one_state():
    return make_one_state()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
