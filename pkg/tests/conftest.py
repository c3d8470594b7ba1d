import random

import pytest

from chorchain import engine as eng
from chorchain.chain import ChainSim, SimConfig
from chorchain.crypto import Keypair
from chorchain.harness import builtin_model


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)


@pytest.fixture
def fee_policy():
    return eng.FeePolicy()


@pytest.fixture
def models():
    return {i: builtin_model(i) for i in (1, 2, 3, 4)}


@pytest.fixture
def funded_sim(rng):
    """Simulator with an owner key holding two large spendable outputs."""
    sim = ChainSim(SimConfig(seed=99, block_interval_mean=6.0))
    owner_key = Keypair.generate(rng)
    funds = sim.grant(owner_key, [5_000_000, 1_000_000])
    return sim, owner_key, funds


def make_instance(sim, owner_key, funds, fee_policy, rng, process_id=1, estimate=8):
    """Broadcast a start transaction and return (start_tx, token)."""
    start_tx, token = eng.build_start(
        funds, process_id, int(sim.now), fee_policy, estimate, owner_key, rng
    )
    result = sim.broadcast(start_tx)
    assert result.accepted, result.reason
    return start_tx, token
