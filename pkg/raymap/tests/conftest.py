import logging
from pathlib import Path

import numpy as np
import pytest

from raymap.datahub import Blocker, Scenario, Transmitter, build_dataset
from raymap.encoders import EncoderConfig
from raymap.hgat import HgatConfig
from raymap.kriging_prior import build_prior_table

logger = logging.getLogger(__name__)

DATA = Path(__file__).parent / 'data'
REFERENCE_SCENARIO = DATA / 'reference_scenario.json'


def pytest_configure(config):
    config.addinivalue_line(
        'markers', 'slow: end-to-end training on the reference scenario')


@pytest.fixture(scope='session')
def scenario():
    return Scenario(bounding_box=(0.0, 0.0, 60.0, 40.0),
                    transmitters=(Transmitter(1, 10.0, 10.0),
                                  Transmitter(2, 50.0, 30.0),
                                  Transmitter(3, 30.0, 20.0)),
                    blockers=(Blocker(24.0, 2.0, 28.0, 14.0),),
                    seed=7, ues_per_bin=2.0)


@pytest.fixture(scope='session')
def dataset(scenario):
    return build_dataset(scenario, obs_fraction=0.1, train_fraction=0.15)


@pytest.fixture(scope='session')
def transmitters(scenario):
    return {tx.site: tx.position for tx in scenario.transmitters}


@pytest.fixture(scope='session')
def prior_table(dataset):
    return build_prior_table(dataset.queries, dataset.observations)


@pytest.fixture(scope='session')
def tiny_encoder():
    return EncoderConfig(n_anchors=8, slot_width=4, d_model=8,
                         branch_width=4, edge_hidden=6, edge_width=5,
                         r0=36.0)


@pytest.fixture(scope='session')
def tiny_hgat():
    return HgatConfig(d=8, k_ref=4, k_g=3, head_hidden=6)


@pytest.fixture(scope='function')
def rng():
    return np.random.default_rng(2024)
