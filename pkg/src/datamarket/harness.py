"""Orchestrates the full marketplace loop over ledger, consensus, and training.

Per global round, every honest executor replays the same deterministic
sampling/aggregation computation (the shared seed depends on the auction
and round only), commits a digest of its result, and the likelihood rule
picks the digest to adopt.  The winning digest's preimage is verified
before adoption.
"""

from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import adversary as adv
from .consensus import (
    AgreementOutcome,
    ConsensusParams,
    best_digest,
    decide,
    execution_set_size,
    likelihood_scores,
    simulate_agreement,
    sortition,
    threshold,
)
from .economics import (
    PayoffParams,
    PayoffReport,
    RevenueReport,
    analyze_payoffs,
    distribute_revenue,
    geometric_catch_prob,
)
from .errors import NoConsensus
from .fedcore import run_federated_round
from .ledger import Ledger
from .metrics import MetricsSink, rounds_csv
from .rng import derive_seed
from .scenario import Scenario
from .training import (
    DatasetSplits,
    LabeledDataset,
    ModelWeights,
    dirichlet_partition,
    evaluate_metric,
    init_weights,
    load_idx,
    local_update,
    partition_shards,
    split_dataset,
    state_digest,
    synth_dataset,
    utility,
)

State = tuple[ModelWeights, np.ndarray, np.ndarray]


@dataclass
class RoundRecord:
    round: int
    mini_rounds: int
    accepted_digest: str
    accuracy: float
    probabilities: tuple[float, ...]
    wall_time_s: float


@dataclass
class RunResult:
    weights: ModelWeights
    probabilities: np.ndarray
    access_counts: np.ndarray
    participation: dict[str, int]
    records: list[RoundRecord]
    seller_ids: list[str]
    final_validation_accuracy: float
    final_test_accuracy: float
    termination: str
    wrong_adoptions: int
    wall_time_s: float


@dataclass
class PipelineResult:
    ledger: Ledger
    run: RunResult | None
    revenue: RevenueReport | None
    payoff: PayoffReport | None
    winner: str | None
    refunded: bool


def build_splits(scenario: Scenario) -> DatasetSplits:
    """Materialize the scenario's dataset: synthetic clusters or IDX files."""
    if scenario.data.kind == "synthetic":
        return synth_dataset(
            scenario.synth_spec(),
            scenario.data.rows,
            derive_seed(scenario.root_seed, "dataset"),
        )
    if scenario.data.kind == "idx":
        full = load_idx(scenario.data.images, scenario.data.labels)
        return split_dataset(full)
    raise ValueError(f"unknown dataset kind {scenario.data.kind!r}")


class _SellerPool:
    """Resolves per-seller updates, honest or adversarial, for one round."""

    def __init__(
        self,
        scenario: Scenario,
        shards: list[LabeledDataset],
        byz_sellers: frozenset[int],
        utility_set: LabeledDataset,
        spec,
    ):
        self.scenario = scenario
        self.shards = shards
        self.byz_sellers = byz_sellers
        self.utility_set = utility_set
        self.spec = spec
        self.round_seed = b"\x00" * 32

    def local_delta(self, seller: int, values: np.ndarray) -> np.ndarray:
        shard = self.shards[seller]
        if len(shard) == 0:
            return np.zeros_like(values)
        w = ModelWeights(values, self.spec)
        seed = derive_seed(self.round_seed, "seller", seller)
        train = self.scenario.train
        if seller in self.byz_sellers:
            return adv.malicious_seller_update(
                self.scenario.adversary.seller_strategy,
                w,
                shard,
                seed,
                epochs=train.epochs,
                lr=train.lr,
                batch=train.batch,
                scale_factor=self.scenario.adversary.scale_factor,
            )
        return local_update(
            w, shard, epochs=train.epochs, lr=train.lr, batch=train.batch, seed=seed
        )

    def utility(self, values: np.ndarray) -> float:
        return utility(ModelWeights(values, self.spec), self.utility_set)


def _aggregator_for(scenario: Scenario) -> str:
    return "mean" if scenario.ablation == "no-krum" else "corrected-krum"


def run_core(
    scenario: Scenario,
    *,
    ledger: Ledger | None = None,
    auction_label: str = "standalone",
    seller_ids: list[str] | None = None,
    splits: DatasetSplits | None = None,
    shards: list[LabeledDataset] | None = None,
    sink: MetricsSink | None = None,
) -> RunResult:
    """Run the training/consensus loop until the metric target or round cap.

    Returns the adopted weights plus the per-seller access counts and
    per-node participation counts that drive revenue distribution.
    """
    started = time.perf_counter()
    root = scenario.root_seed
    sink = sink if sink is not None else MetricsSink()

    if splits is None:
        splits = build_splits(scenario)
    if seller_ids is None:
        seller_ids = [f"s{i:03d}" for i in range(scenario.sellers)]
    n_sellers = len(seller_ids)
    if shards is None:
        plan = dirichlet_partition(
            splits.train,
            n_sellers,
            scenario.data.partition_alpha,
            derive_seed(root, "partition"),
        )
        shards = partition_shards(splits.train, plan)

    own_ledger = ledger is None
    if own_ledger:
        ledger = Ledger(
            seed=scenario.seed,
            auction_window=scenario.auction_window,
            commit_timeout=scenario.timeout_blocks,
        )
    node_ids = [f"n{i:03d}" for i in range(scenario.nodes)]
    if own_ledger:
        for nid in node_ids:
            ledger.register_node(nid)

    spec = scenario.model_spec(
        input_dim=splits.train.features.shape[1], class_count=splits.train.class_count
    )
    weights = init_weights(spec, derive_seed(root, "init"))
    p = np.full(n_sellers, 1.0 / n_sellers)
    access_counts = np.zeros(n_sellers, dtype=np.int64)
    participation: dict[str, int] = {nid: 0 for nid in node_ids}

    params = scenario.consensus_params()
    theta = threshold(params)
    byz_nodes, byz_sellers = adv.assign_roles(
        node_ids, list(range(n_sellers)), scenario.adversary_spec()
    )
    utility_set = (
        splits.validation.head(scenario.data.utility_eval_rows)
        if scenario.data.utility_eval_rows
        else splits.validation
    )
    pool = _SellerPool(scenario, shards, byz_sellers, utility_set, spec)
    tau = scenario.request.threshold
    metric = scenario.metric_spec()

    records: list[RoundRecord] = []
    prev_digest: bytes | None = None
    prev_state: State | None = None
    wrong_adoptions = 0
    termination = "round-cap"
    t = 0
    while t < scenario.t_max:
        val_acc = evaluate_metric(weights, splits.validation, metric)
        if val_acc >= tau:
            termination = "metric"
            break
        round_started = time.perf_counter()
        pool.round_seed = derive_seed(root, "fed", auction_label, t)
        fed = run_federated_round(
            weights.values,
            p,
            access_counts,
            scenario.osmd_params(),
            t,
            pool.round_seed,
            pool,
            aggregator=_aggregator_for(scenario),
        )
        honest_state: State = (
            weights.with_values(fed.values),
            fed.probabilities,
            fed.access_counts,
        )
        honest_digest = state_digest(*honest_state)

        if scenario.ablation == "no-consensus":
            accepted, mini_rounds = _single_executor_round(
                scenario, root, auction_label, t, node_ids, byz_nodes, participation,
                honest_state, honest_digest, prev_state, prev_digest,
            )
        else:
            accepted, mini_rounds = _consensus_round(
                scenario, root, auction_label, t, ledger, node_ids, byz_nodes,
                participation, params, theta, honest_state, honest_digest,
                prev_state, prev_digest, sink,
            )

        state, digest = accepted
        if state_digest(*state) != digest:
            raise NoConsensus("adopted state does not match the accepted digest")
        weights, p, access_counts = state
        if digest != honest_digest:
            wrong_adoptions += 1
        prev_digest, prev_state = digest, state

        acc_after = evaluate_metric(weights, splits.validation, metric)
        records.append(
            RoundRecord(
                round=t,
                mini_rounds=mini_rounds,
                accepted_digest=digest.hex(),
                accuracy=acc_after,
                probabilities=tuple(float(x) for x in p),
                wall_time_s=time.perf_counter() - round_started,
            )
        )
        sink.emit(
            "round",
            round=t,
            mini_rounds=mini_rounds,
            accepted_digest=digest.hex(),
            accuracy=acc_after,
            probabilities=[float(x) for x in p],
            access_counts=[int(x) for x in access_counts],
            sampled=list(fed.sampled),
            chosen_seller=fed.chosen_seller,
            honest_adopted=digest == honest_digest,
        )
        t += 1

    final_val = evaluate_metric(weights, splits.validation, metric)
    if final_val >= tau:
        termination = "metric"
    return RunResult(
        weights=weights,
        probabilities=p,
        access_counts=access_counts,
        participation=participation,
        records=records,
        seller_ids=list(seller_ids),
        final_validation_accuracy=final_val,
        final_test_accuracy=evaluate_metric(weights, splits.test, metric),
        termination=termination,
        wrong_adoptions=wrong_adoptions,
        wall_time_s=time.perf_counter() - started,
    )


def _adversarial_state(
    scenario: Scenario,
    root: bytes,
    auction_label: str,
    t: int,
    honest_state: State,
    prev_state: State | None,
) -> State:
    """State a Byzantine executor stands behind (no-consensus ablation)."""
    if scenario.adversary.node_strategy == "stale-digest" and prev_state is not None:
        return prev_state
    return adv.poisoned_state(
        *honest_state,
        seed=derive_seed(root, "byz", auction_label, t),
        strength=scenario.adversary.poison_strength,
    )


def _single_executor_round(
    scenario, root, auction_label, t, node_ids, byz_nodes, participation,
    honest_state, honest_digest, prev_state, prev_digest,
) -> tuple[tuple[State, bytes], int]:
    seed = derive_seed(root, "sortition", auction_label, t, 1)
    executor = sortition(seed, node_ids, 1, round=t).members[0]
    participation[executor] += 1
    if executor in byz_nodes:
        state = _adversarial_state(scenario, root, auction_label, t, honest_state, prev_state)
        return (state, state_digest(*state)), 1
    return (honest_state, honest_digest), 1


def _consensus_round(
    scenario, root, auction_label, t, ledger, node_ids, byz_nodes, participation,
    params: ConsensusParams, theta: float, honest_state, honest_digest,
    prev_state, prev_digest, sink: MetricsSink,
) -> tuple[tuple[State, bytes], int]:
    """Mini-round loop: sortition, commits, likelihood decision, reveal."""
    reveals: dict[bytes, State] = {honest_digest: honest_state}
    ctx = adv.RoundContext(prev_digest=prev_digest)
    strategy = scenario.adversary.node_strategy
    if byz_nodes and strategy == "colluding-common-digest":
        poison = adv.poisoned_state(
            *honest_state,
            seed=derive_seed(root, "byz", auction_label, t),
            strength=scenario.adversary.poison_strength,
        )
        colluding_digest = state_digest(*poison)
        reveals[colluding_digest] = poison
        ctx = adv.RoundContext(prev_digest=prev_digest, colluding_digest=colluding_digest)
    if prev_digest is not None and prev_state is not None:
        reveals[prev_digest] = prev_state

    counts_by_round: list[Counter] = []
    sizes: list[int] = []
    disqualified: set[bytes] = set()
    i = 0
    while True:
        i += 1
        size = execution_set_size(i, params.base_size, cap=params.total_nodes)
        es_seed = derive_seed(root, "sortition", auction_label, ledger.beacon(), t, i)
        es = sortition(es_seed, node_ids, size, round=t, mini_round=i)
        ledger.publish_execution_set(t, i, es.members)
        counter: Counter = Counter()
        for node in es.members:
            participation[node] += 1
            if node in byz_nodes:
                digest = adv.byzantine_node_digest(
                    strategy,
                    honest_digest,
                    ctx,
                    derive_seed(root, "byz-digest", auction_label, t, i, node),
                )
            else:
                digest = honest_digest
            ledger.commit_digest(node, t, i, digest)
            counter[digest] += 1
        counts_by_round.append(counter)
        sizes.append(size)
        table = likelihood_scores(counts_by_round, sizes)
        if disqualified:
            table.scores = {
                k: v for k, v in table.scores.items() if k not in disqualified
            }
        accepted = decide(table, theta)
        exhausted = size >= params.total_nodes
        if accepted is None and exhausted:
            accepted = best_digest(table)
        sink.emit(
            "consensus",
            round=t,
            mini_round=i,
            scores={k.hex(): v for k, v in sorted(table.scores.items())},
            accepted=accepted.hex() if accepted else None,
        )
        ledger.advance_block()
        if accepted is None:
            continue
        if accepted in reveals:
            return (reveals[accepted], accepted), i
        # winner has no revealable preimage (forged digest): disqualify it
        disqualified.add(accepted)
        if exhausted:
            raise NoConsensus("no revealable digest available at population cap")


def run_auction_to_completion(
    scenario: Scenario, sink: MetricsSink | None = None
) -> PipelineResult:
    """Full pipeline: registration, auction, training consensus, payout."""
    sink = sink if sink is not None else MetricsSink()
    ledger = Ledger(
        seed=scenario.seed,
        auction_window=scenario.auction_window,
        commit_timeout=scenario.timeout_blocks,
        tx_fee=scenario.tx_fee,
    )
    request = scenario.data_request()

    buyer = ledger.register_user("buyer000", is_buyer=True)
    ledger.mint(buyer, request.amount + scenario.tx_fee)
    rivals = []
    for k, amount in enumerate(scenario.competing_bids):
        rival = ledger.register_user(f"buyer{k + 1:03d}", is_buyer=True)
        ledger.mint(rival, amount + scenario.tx_fee)
        rivals.append((rival, amount))

    seller_ids = [ledger.register_user(f"s{i:03d}", is_buyer=False) for i in range(scenario.sellers)]
    node_ids = [ledger.register_node(f"n{i:03d}") for i in range(scenario.nodes)]

    splits = build_splits(scenario)
    plan = dirichlet_partition(
        splits.train,
        scenario.sellers,
        scenario.data.partition_alpha,
        derive_seed(scenario.root_seed, "partition"),
    )
    shards = partition_shards(splits.train, plan)
    registry_tags = frozenset(scenario.data.registry_tags) or request.tags
    for sid, shard in zip(seller_ids, shards):
        ledger.register_dataset(sid, registry_tags, len(shard))

    for rival, amount in rivals:
        ledger.start_auction(replace(request, amount=amount), rival)
    ledger.start_auction(request, buyer)
    while ledger.height < ledger.auction_window:
        ledger.advance_block()
    won_request, matched, settlement = ledger.close_auction(request.tags)

    if not matched:
        return PipelineResult(
            ledger=ledger, run=None, revenue=None, payoff=None, winner=None, refunded=True
        )

    winner = ledger.settlements[settlement].winner
    matched_ids = sorted(matched)
    index_of = {sid: k for k, sid in enumerate(seller_ids)}
    matched_shards = [shards[index_of[sid]] for sid in matched_ids]
    run = run_core(
        scenario,
        ledger=ledger,
        auction_label="+".join(sorted(request.tags)),
        seller_ids=matched_ids,
        splits=splits,
        shards=matched_shards,
        sink=sink,
    )

    contribs = {sid: int(run.access_counts[k]) for k, sid in enumerate(matched_ids)}
    node_counts = {nid: count for nid, count in run.participation.items()}
    if sum(contribs.values()) == 0 or sum(node_counts.values()) == 0:
        ledger.refund_settlement(settlement)
        return PipelineResult(
            ledger=ledger, run=run, revenue=None, payoff=None, winner=winner, refunded=True
        )

    revenue = distribute_revenue(won_request.amount, contribs, node_counts)
    ledger.payout_escrow(settlement, revenue.transfers)

    params = scenario.consensus_params()
    beta = scenario.consensus.confidence_beta
    rounds_for_analysis = max((rec.mini_rounds for rec in run.records), default=1)
    payoff = analyze_payoffs(
        PayoffParams(
            seller_pool=float(revenue.seller_share),
            node_pool=float(revenue.node_share),
            node_count=scenario.nodes,
            bribe=scenario.analysis.bribe,
            quality_honest=scenario.analysis.quality_honest,
            quality_claimed=scenario.analysis.quality_claimed,
            success_prob=beta,
            catch_prob=geometric_catch_prob(scenario.analysis.detect_rate),
        ),
        rounds=rounds_for_analysis,
    )
    sink.emit(
        "settlement",
        bid=won_request.amount,
        node_share=revenue.node_share,
        seller_share=revenue.seller_share,
    )
    return PipelineResult(
        ledger=ledger, run=run, revenue=revenue, payoff=payoff, winner=winner, refunded=False
    )


def byzantine_grid(
    base: Scenario,
    fractions: tuple[float, ...] = (0.2, 0.3, 0.4, 0.5),
    ablations: tuple[str, ...] = ("none", "no-krum", "no-consensus"),
) -> list[tuple[str, Scenario]]:
    """Scenario matrix over Byzantine node fractions and ablations.

    The fraction varies the compute-node adversaries; the seller
    adversary fraction stays at the base scenario's value so the
    aggregation ablation keeps its failure mode at every grid point.
    """
    items = []
    for fraction in fractions:
        for ablation in ablations:
            label = f"byz{int(round(fraction * 100))}_{ablation}"
            scenario = replace(
                base,
                ablation=ablation,
                adversary=replace(base.adversary, node_fraction=fraction),
            )
            items.append((label, scenario))
    return items


def run_experiment_grid(
    items: list[tuple[str, Scenario]], out_dir: str | Path
) -> dict[str, Path]:
    """Run each scenario and write one per-round CSV series per label.

    Failures are recorded in grid_errors.json and do not stop the grid.
    Real wall times go to a separate timings file so the metric CSVs stay
    reproducible byte for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    errors: dict[str, str] = {}
    timings: list[tuple[str, float, float]] = []
    for label, scenario in items:
        try:
            result = run_core(scenario)
        except Exception as exc:  # record and continue with the rest
            errors[label] = f"{type(exc).__name__}: {exc}"
            continue
        path = out / f"{label}.csv"
        path.write_text(
            rounds_csv(result.records, scenario.adversary.node_fraction, scenario.ablation)
        )
        written[label] = path
        timings.append((label, result.wall_time_s, result.final_test_accuracy))
    if errors:
        (out / "grid_errors.json").write_text(json.dumps(errors, indent=2, sort_keys=True))
    lines = ["label,wall_time_s,final_test_accuracy"]
    lines += [f"{label},{wall:.6f},{acc:.8f}" for label, wall, acc in timings]
    (out / "grid_timings.csv").write_text("\n".join(lines) + "\n")
    return written


def consensus_trials(
    params: ConsensusParams,
    byz_fraction: float,
    trials: int,
    seed: int = 0,
) -> list[AgreementOutcome]:
    """Independent agreement instances against colluding committers."""
    node_ids = [f"n{i:03d}" for i in range(params.total_nodes)]
    byz_count = int(byz_fraction * params.total_nodes)
    byz = frozenset(node_ids[:byz_count])  # identities are exchangeable
    root = derive_seed("consensus-trials", seed)
    return [
        simulate_agreement(params, node_ids, byz, derive_seed(root, "trial", k))
        for k in range(trials)
    ]
