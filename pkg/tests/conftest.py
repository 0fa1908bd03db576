import numpy as np
import pytest

from hairsplat.codec import fit_basis
from hairsplat.render import RenderConfig
from hairsplat.scalp import HeadModel, look_at
from hairsplat.synth import gen_strand_corpus


@pytest.fixture(scope="session")
def corpus():
    return gen_strand_corpus(0, 2000)


@pytest.fixture(scope="session")
def basis(corpus):
    return fit_basis(corpus, 64)


@pytest.fixture(scope="session")
def head():
    return HeadModel()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cam():
    return look_at((0.0, -1.0, 0.0), (0.0, 0.0, 0.0), fx=60.0, width=32, height=32)


@pytest.fixture
def wide_config():
    # wider splats so a handful of strands covers many pixels in 32x32 tests
    return RenderConfig(epsilon=0.02, width_scale=0.5)

