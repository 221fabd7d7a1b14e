import pytest

from backend.conditioned_sampler import KernelCache
from backend.core_field import RngStream
from backend.tail_grid import build_tail_table

TABLE_DEPTH = 64


@pytest.fixture(scope='session')
def table():
    """S_0..S_64 at the production grid spacing; shared by the whole session."""
    return build_tail_table(TABLE_DEPTH, dx=0.01)


@pytest.fixture(scope='session')
def kernels(table):
    return KernelCache(table)


@pytest.fixture
def rng():
    return RngStream(1234, 0)
