import functools

import numpy as np
import pytest

from oransched.harness import instance_from, make_instance
from oransched.scenario import ChannelSet, RfConfig, Scenario, UeProfile


def custom_instance(h, serving_sets, demands=None, **config):
    """Instance from explicit channels ``h[m, k, c, r]`` (nr x nt) and serving sets.

    ``demands`` maps UE id to a QoS demand.
    """
    h = np.asarray(h, dtype=complex)
    m_cells, k_ues, n_cc, n_rbg, nr, nt = h.shape
    cfg = RfConfig(num_cells=m_cells, num_ccs=n_cc, num_rbgs=n_rbg, nt=nt, nr=nr, **config)
    demands = demands or {}
    ues = tuple(UeProfile(k, (0.0, 0.0, 1.5), tuple(serving_sets[k]), k in demands,
                          float(demands.get(k, 0.0))) for k in range(k_ues))
    scenario = Scenario(cfg, np.zeros((m_cells, 3)), ues, 0)
    gain = np.ones((m_cells, k_ues))
    return instance_from(scenario, ChannelSet(h, gain))


def random_channels(rng, m_cells, k_ues, n_cc, n_rbg, nr, nt, scale=1e-5):
    shape = (m_cells, k_ues, n_cc, n_rbg, nr, nt)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


@functools.lru_cache(maxsize=None)
def desk_instance(seed, nt=32, num_qos=8):
    return make_instance(RfConfig(nt=nt), 18, num_qos, (0.0, 60.0), seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# PASS/FAIL lines of the acceptance suite, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
