"""Shared fixtures: a fast configuration, tapes and synthetic scenes."""

import numpy as np
import pytest

from ssk.core.config import DESK_SPEC, tiny_config
from ssk.nn.autograd import Tape
from ssk.pcio.synth import synth_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tape():
    return Tape(training=True)


@pytest.fixture
def eval_tape():
    return Tape(training=False, grad=False)


@pytest.fixture
def config():
    return tiny_config(seed=0)


@pytest.fixture
def scene():
    return synth_scene(3, DESK_SPEC, 4)


@pytest.fixture(scope="session")
def toy_scenes():
    return [synth_scene(seed, DESK_SPEC, 3) for seed in range(4)]
