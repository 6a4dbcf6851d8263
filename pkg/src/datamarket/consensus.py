"""Committee sortition and multi-round likelihood agreement on result digests.

Off-chain executors are drawn in mini-rounds whose committee size grows
exponentially.  Each executor commits a digest of its computed state; a
digest is accepted once its cumulative likelihood score clears a threshold
calibrated so that the probability of a Byzantine digest winning stays
below a configured bound.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import DegenerateParams, SizeExceedsPopulation
from .rng import derive_seed, rng_from


@dataclass(frozen=True)
class ConsensusParams:
    """Protocol-wide consensus configuration.

    total_nodes: size of the executor population.
    sample_fraction: expected fraction of the population queried per round.
    byz_fraction_max: largest Byzantine fraction the threshold must defend
        against; must stay below one half.
    confidence_beta: target bound on the probability of accepting a
        Byzantine digest.
    base_size: committee size of the first mini-round.
    """

    total_nodes: int
    sample_fraction: float
    byz_fraction_max: float
    confidence_beta: float
    base_size: int

    def __post_init__(self):
        if self.total_nodes < 1:
            raise DegenerateParams("total_nodes must be >= 1")
        if not 0.0 < self.sample_fraction < 1.0:
            raise DegenerateParams("sample_fraction must lie in (0, 1)")
        if not 0.0 <= self.byz_fraction_max < 0.5:
            raise DegenerateParams("byz_fraction_max must lie in [0, 0.5)")
        # 0.5 is the zero-information edge (threshold 0), still evaluable.
        if not 0.0 < self.confidence_beta <= 0.5:
            raise DegenerateParams("confidence_beta must lie in (0, 0.5]")
        if self.base_size < 1:
            raise DegenerateParams("base_size must be >= 1")


@dataclass(frozen=True)
class ExecutionSet:
    """Committee selected for one mini-round."""

    round: int
    mini_round: int
    members: tuple[str, ...]
    seed: bytes

    def __post_init__(self):
        if len(set(self.members)) != len(self.members):
            raise ValueError("execution set members must be distinct")


@dataclass(frozen=True)
class CommitRecord:
    """One executor's digest commitment for one mini-round."""

    mini_round: int
    digest: bytes
    node: str


@dataclass
class LikelihoodTable:
    """Cumulative per-digest scores over the mini-rounds seen so far."""

    scores: dict[bytes, int] = field(default_factory=dict)
    sizes: list[int] = field(default_factory=list)


def execution_set_size(i: int, s0: int, cap: int | None = None) -> int:
    """Committee size for mini-round ``i`` (1-based): s0 + 2^(i-1) - 1.

    Capped at the population size when ``cap`` is given.
    """
    if i < 1:
        raise ValueError("mini-round index starts at 1")
    size = s0 + 2 ** (i - 1) - 1
    if cap is not None:
        size = min(size, cap)
    return size


def total_executions(r: int, s0: int) -> int:
    """Closed form for the total committee seats over mini-rounds 1..r."""
    if r < 1:
        raise ValueError("round count must be >= 1")
    return r * (s0 - 1) + 2**r - 1


def sortition(
    seed: bytes,
    nodes: Sequence[str],
    size: int,
    round: int = 0,
    mini_round: int = 1,
) -> ExecutionSet:
    """Draw a uniform without-replacement committee, deterministic in seed."""
    if size > len(nodes):
        raise SizeExceedsPopulation(f"size {size} > population {len(nodes)}")
    order = rng_from(seed).permutation(len(nodes))[:size]
    members = tuple(nodes[int(j)] for j in order)
    return ExecutionSet(round=round, mini_round=mini_round, members=members, seed=seed)


def tally_commits(records: Iterable[CommitRecord]) -> list[Counter]:
    """Group commit records into per-mini-round digest counts."""
    rounds: dict[int, Counter] = {}
    for rec in records:
        rounds.setdefault(rec.mini_round, Counter())[rec.digest] += 1
    if not rounds:
        return []
    last = max(rounds)
    return [rounds.get(i, Counter()) for i in range(1, last + 1)]


def likelihood_scores(
    counts_by_round: Sequence[Mapping[bytes, int]],
    sizes: Sequence[int],
) -> LikelihoodTable:
    """Exact integer likelihood scores per digest.

    For each digest k seen in any mini-round the score is
    sum over mini-rounds l of (2*c_{k,l} - C_l) * C_l, where c_{k,l} is the
    number of committers of k in mini-round l and C_l the committee size.
    """
    if len(counts_by_round) != len(sizes):
        raise ValueError("counts and sizes length mismatch")
    digests: set[bytes] = set()
    for l, counts in enumerate(counts_by_round):
        committed = sum(counts.values())
        if committed > sizes[l]:
            raise ValueError(f"mini-round {l + 1} has more commits than seats")
        digests.update(counts)
    table = LikelihoodTable(sizes=list(sizes))
    for k in digests:
        score = 0
        for counts, c_l in zip(counts_by_round, sizes):
            score += (2 * counts.get(k, 0) - c_l) * c_l
        table.scores[k] = score
    return table


def threshold(params: ConsensusParams) -> float:
    """Likelihood score a digest must exceed for acceptance.

    Grows with the demanded confidence and shrinks as the tolerated
    Byzantine fraction moves away from one half.
    """
    f = params.byz_fraction_max
    q = params.sample_fraction
    if f <= 0.0 or f >= 0.5:
        raise DegenerateParams("byz_fraction_max must lie strictly in (0, 0.5)")
    beta = params.confidence_beta
    scale = 2.0 * q * (1.0 - q) * params.total_nodes * (1.0 - f) * f
    return math.log((1.0 - beta) / beta) * scale / ((1.0 - f) - f)


def acceptance_bound(theta: float, params: ConsensusParams) -> float:
    """Upper bound on the probability that a Byzantine digest is accepted.

    Exact inverse of :func:`threshold`: feeding the threshold computed for
    a configured bound returns that bound.
    """
    f = params.byz_fraction_max
    q = params.sample_fraction
    if f <= 0.0 or f >= 0.5:
        raise DegenerateParams("byz_fraction_max must lie strictly in (0, 0.5)")
    scale = 2.0 * q * (1.0 - q) * params.total_nodes * (1.0 - f) * f
    return 1.0 / (1.0 + math.exp(theta * (1.0 - 2.0 * f) / scale))


def best_digest(table: LikelihoodTable) -> bytes | None:
    """Digest with the largest score; ties broken by smallest digest."""
    if not table.scores:
        return None
    return min(table.scores, key=lambda k: (-table.scores[k], k))


def decide(table: LikelihoodTable, theta: float) -> bytes | None:
    """Accept the digest whose score strictly exceeds theta, else None.

    When several digests clear the threshold the one with the largest
    score wins; equal scores fall back to the smallest digest.
    """
    crossing = {k: s for k, s in table.scores.items() if s > theta}
    if not crossing:
        return None
    return min(crossing, key=lambda k: (-crossing[k], k))


@dataclass(frozen=True)
class AgreementOutcome:
    """Result of one simulated agreement instance."""

    accepted: bytes
    mini_rounds: int
    wrong_accepted: bool


def simulate_agreement(
    params: ConsensusParams,
    nodes: Sequence[str],
    byz_nodes: frozenset[str] | set[str],
    seed: bytes,
) -> AgreementOutcome:
    """Run one agreement instance with colluding Byzantine committers.

    Honest members commit a common honest digest, Byzantine members a
    common wrong digest.  Mini-rounds grow until a digest clears the
    threshold; once the committee spans the whole population, the
    top-scoring digest is accepted after that final mini-round.
    """
    theta = threshold(params)
    honest = derive_seed(seed, "honest")
    wrong = derive_seed(seed, "wrong")
    counts: list[Counter] = []
    sizes: list[int] = []
    i = 0
    while True:
        i += 1
        size = execution_set_size(i, params.base_size, cap=params.total_nodes)
        es = sortition(derive_seed(seed, "es", i), nodes, size, mini_round=i)
        n_wrong = sum(1 for m in es.members if m in byz_nodes)
        counts.append(Counter({honest: size - n_wrong, wrong: n_wrong}))
        sizes.append(size)
        table = likelihood_scores(counts, sizes)
        accepted = decide(table, theta)
        if accepted is None and size >= params.total_nodes:
            accepted = best_digest(table)
        if accepted is not None:
            return AgreementOutcome(
                accepted=accepted,
                mini_rounds=i,
                wrong_accepted=accepted == wrong,
            )
