"""Shared scenario factories for the test suite."""

from dataclasses import replace

import pytest

from datamarket.scenario import (
    AdversaryConfig,
    ConsensusConfig,
    DataConfig,
    OsmdConfig,
    RequestConfig,
    Scenario,
    TrainConfig,
)


def quick_scenario(**overrides) -> Scenario:
    """Small, fast scenario that converges in a few rounds."""
    base = Scenario(
        seed=11,
        sellers=20,
        nodes=20,
        t_max=10,
        consensus=ConsensusConfig(
            sample_fraction=0.25, byz_fraction_max=0.3, confidence_beta=0.01
        ),
        osmd=OsmdConfig(batch_size=6, learning_rate=1.0, step_size=0.5, floor_fraction=0.5),
        train=TrainConfig(epochs=3, lr=0.02, batch=64),
        data=DataConfig(
            rows=2000, classes=4, dims=16, separation=4.5, noise=1.0, partition_alpha=0.5
        ),
        request=RequestConfig(tags=("demo", "synthetic"), amount=150, threshold=0.95),
    )
    return replace(base, **overrides)


def robustness_scenario(seed: int, node_fraction: float, seller_fraction: float, **overrides) -> Scenario:
    """Fixed-round scenario used for the adversary robustness comparisons."""
    base = Scenario(
        seed=seed,
        sellers=50,
        nodes=50,
        t_max=12,
        consensus=ConsensusConfig(
            sample_fraction=0.1, byz_fraction_max=0.3, confidence_beta=1e-3
        ),
        osmd=OsmdConfig(batch_size=10, learning_rate=1.0, step_size=0.5, floor_fraction=0.5),
        train=TrainConfig(epochs=3, lr=0.02, batch=64),
        data=DataConfig(
            rows=5000, classes=4, dims=16, separation=4.5, noise=1.0, partition_alpha=0.5
        ),
        adversary=AdversaryConfig(
            node_fraction=node_fraction,
            seller_fraction=seller_fraction,
            node_strategy="colluding-common-digest",
            seller_strategy="scaled-gradient",
            scale_factor=-10.0,
            poison_strength=0.5,
        ),
        request=RequestConfig(tags=("synthetic",), amount=1000, threshold=1.0),
    )
    return replace(base, **overrides)


@pytest.fixture
def scenario():
    return quick_scenario()
