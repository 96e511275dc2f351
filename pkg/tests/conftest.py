import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from se_mapper.device import DeviceConfig
from se_mapper.fixtures import distance_calc, fft_like
from se_mapper.ir_graph import IRGraph


@pytest.fixture
def chain2():
    return IRGraph.build("chain2", [(0, "a", []), (1, "b", [])], [(0, 1)])


@pytest.fixture
def chain3():
    return IRGraph.build("chain3", [(0, "a", []), (1, "b", []), (2, "c", [])], [(0, 1), (1, 2)])


@pytest.fixture
def diamond():
    return IRGraph.build(
        "diamond",
        [(0, "a", []), (1, "b", []), (2, "c", []), (3, "d", [])],
        [(0, 1), (0, 2), (1, 3), (2, 3)],
    )


@pytest.fixture
def distance_graph():
    return distance_calc()


@pytest.fixture
def fft_graph():
    return fft_like()


@pytest.fixture
def default_device():
    return DeviceConfig()


@pytest.fixture
def small_device():
    return DeviceConfig(num_tiles=4, num_slots=2, ii=2, exec_latency=3)
