"""Configurable Byzantine behaviours for compute nodes and data sellers.

Every behaviour is a pure function of its inputs and a seed, so full runs
with adversaries replay bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyShard
from .rng import derive_seed, rng_from
from .training import LabeledDataset, ModelWeights, local_update

NODE_STRATEGIES = ("random-digest", "stale-digest", "colluding-common-digest")
SELLER_STRATEGIES = ("label-flip", "random-gradient", "scaled-gradient")


@dataclass(frozen=True)
class AdversarySpec:
    """Which fraction of each population misbehaves, and how."""

    byz_node_fraction: float = 0.0
    node_strategy: str = "colluding-common-digest"
    byz_seller_fraction: float = 0.0
    seller_strategy: str = "scaled-gradient"
    seed: bytes = b"\x00" * 32
    scale_factor: float = 1.0
    update_norm: float | None = None
    poison_strength: float = 3.0

    def __post_init__(self):
        if not 0.0 <= self.byz_node_fraction <= 1.0:
            raise ValueError("byz_node_fraction must lie in [0, 1]")
        if not 0.0 <= self.byz_seller_fraction <= 1.0:
            raise ValueError("byz_seller_fraction must lie in [0, 1]")
        if self.node_strategy not in NODE_STRATEGIES:
            raise ValueError(f"unknown node strategy {self.node_strategy!r}")
        if self.seller_strategy not in SELLER_STRATEGIES:
            raise ValueError(f"unknown seller strategy {self.seller_strategy!r}")


def _pick(population: Sequence, count: int, seed: bytes) -> frozenset:
    if count == 0:
        return frozenset()
    order = rng_from(seed).permutation(len(population))[:count]
    return frozenset(population[int(i)] for i in order)


def assign_roles(
    nodes: Sequence, sellers: Sequence, spec: AdversarySpec
) -> tuple[frozenset, frozenset]:
    """Mark floor(fraction * count) identities adversarial, seeded."""
    byz_nodes = _pick(
        nodes, int(spec.byz_node_fraction * len(nodes)), derive_seed(spec.seed, "nodes")
    )
    byz_sellers = _pick(
        sellers,
        int(spec.byz_seller_fraction * len(sellers)),
        derive_seed(spec.seed, "sellers"),
    )
    return byz_nodes, byz_sellers


@dataclass(frozen=True)
class RoundContext:
    """State a Byzantine node may reference when forging a digest."""

    prev_digest: bytes | None = None
    colluding_digest: bytes | None = None


def byzantine_node_digest(
    strategy: str,
    honest_digest: bytes,
    ctx: RoundContext,
    seed: bytes,
) -> bytes:
    """Digest a Byzantine node commits instead of the honest one.

    random-digest: fresh hash per (seed); stale-digest: previous round's
    accepted digest, falling back to random when there is none;
    colluding-common-digest: the shared wrong digest from the context.
    """
    if strategy == "random-digest":
        return derive_seed(seed, "random-digest")
    if strategy == "stale-digest":
        if ctx.prev_digest is not None:
            return ctx.prev_digest
        return derive_seed(seed, "stale-fallback")
    if strategy == "colluding-common-digest":
        if ctx.colluding_digest is not None:
            return ctx.colluding_digest
        return derive_seed(seed, "colluding")
    raise ValueError(f"unknown node strategy {strategy!r}")


def poisoned_state(
    w: ModelWeights,
    p: np.ndarray,
    counts: np.ndarray,
    seed: bytes,
    strength: float = 3.0,
) -> tuple[ModelWeights, np.ndarray, np.ndarray]:
    """Corrupted-but-revealable state colluding nodes stand behind.

    Weights are displaced by seeded noise whose norm scales with the
    current weight norm; the bookkeeping vectors are left intact so the
    forgery is not trivially detectable from them.
    """
    rng = rng_from(derive_seed(seed, "poison"))
    noise = rng.normal(size=w.values.shape)
    norm = float(np.linalg.norm(noise))
    target = strength * (1.0 + float(np.linalg.norm(w.values)))
    noise = noise * (target / norm) if norm > 0 else noise
    return w.with_values(w.values + noise), np.array(p, copy=True), np.array(counts, copy=True)


def malicious_seller_update(
    strategy: str,
    w: ModelWeights,
    shard: LabeledDataset,
    seed: bytes,
    epochs: int = 3,
    lr: float = 0.01,
    batch: int = 64,
    scale_factor: float = 1.0,
    target_norm: float | None = None,
) -> np.ndarray:
    """Parameter delta a malicious seller returns.

    label-flip trains honestly on a label-permuted shard; random-gradient
    returns seeded Gaussian noise at the target norm (the honest update's
    norm when none is given); scaled-gradient multiplies the honest
    update by a factor.
    """
    if len(shard) == 0:
        raise EmptyShard("cannot corrupt an empty shard")
    if strategy == "label-flip":
        flipped = LabeledDataset(
            shard.features, (shard.labels + 1) % shard.class_count, shard.class_count
        )
        return local_update(w, flipped, epochs=epochs, lr=lr, batch=batch, seed=seed)
    if strategy == "scaled-gradient":
        honest = local_update(w, shard, epochs=epochs, lr=lr, batch=batch, seed=seed)
        return scale_factor * honest
    if strategy == "random-gradient":
        if target_norm is None:
            honest = local_update(w, shard, epochs=epochs, lr=lr, batch=batch, seed=seed)
            target_norm = float(np.linalg.norm(honest))
        noise = rng_from(derive_seed(seed, "random-gradient")).normal(size=w.values.shape)
        norm = float(np.linalg.norm(noise))
        return noise * (target_norm / norm) if norm > 0 else noise
    raise ValueError(f"unknown seller strategy {strategy!r}")
