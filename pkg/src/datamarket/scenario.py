"""Scenario configuration: typed sub-configs plus a flat key=value format.

A scenario pins every knob of a run -- population sizes, consensus and
sampling parameters, training hyperparameters, dataset recipe, adversary
mix, and the buyer request -- so that a (scenario, seed) pair fully
determines the output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .adversary import NODE_STRATEGIES, SELLER_STRATEGIES, AdversarySpec
from .consensus import ConsensusParams
from .fedcore import OsmdParams
from .ledger import DataRequest
from .rng import derive_seed
from .training import MetricSpec, ModelSpec, SynthSpec

ABLATIONS = ("none", "no-krum", "no-consensus")


@dataclass(frozen=True)
class ConsensusConfig:
    sample_fraction: float = 0.1
    byz_fraction_max: float = 0.3
    confidence_beta: float = 0.01
    base_size: int = 0  # 0 derives round(sample_fraction * nodes)


@dataclass(frozen=True)
class OsmdConfig:
    batch_size: int = 10
    learning_rate: float = 1.0
    step_size: float = 1.0
    floor_fraction: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    lr: float = 0.01
    batch: int = 64


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"  # synthetic | idx
    rows: int = 4000
    classes: int = 4
    dims: int = 16
    separation: float = 6.0
    noise: float = 1.0
    partition_alpha: float = 0.5
    images: str = ""
    labels: str = ""
    utility_eval_rows: int = 0  # 0 = score on the full validation set
    registry_tags: tuple[str, ...] = ()  # dataset tags sellers register; () = request tags


@dataclass(frozen=True)
class AdversaryConfig:
    node_fraction: float = 0.0
    node_strategy: str = "colluding-common-digest"
    seller_fraction: float = 0.0
    seller_strategy: str = "scaled-gradient"
    scale_factor: float = -10.0
    poison_strength: float = 3.0


@dataclass(frozen=True)
class RequestConfig:
    tags: tuple[str, ...] = ("synthetic",)
    amount: int = 1000
    metric: str = "accuracy"
    threshold: float = 0.95


@dataclass(frozen=True)
class AnalysisConfig:
    quality_honest: float = 0.75
    quality_claimed: float = 0.8
    bribe: float = 1.0
    detect_rate: float = 0.3


@dataclass(frozen=True)
class Scenario:
    seed: int = 42
    sellers: int = 50
    nodes: int = 50
    t_max: int = 50
    auction_window: int = 10
    timeout_blocks: int = 10
    tx_fee: int = 0
    hidden_units: int = 0
    ablation: str = "none"
    competing_bids: tuple[int, ...] = ()
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    osmd: OsmdConfig = field(default_factory=OsmdConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    request: RequestConfig = field(default_factory=RequestConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.sellers < 1 or self.nodes < 1:
            raise ValueError("need at least one seller and one node")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.adversary.node_strategy not in NODE_STRATEGIES:
            raise ValueError(f"unknown node strategy {self.adversary.node_strategy!r}")
        if self.adversary.seller_strategy not in SELLER_STRATEGIES:
            raise ValueError(f"unknown seller strategy {self.adversary.seller_strategy!r}")

    # -- derived protocol objects --------------------------------------

    @property
    def root_seed(self) -> bytes:
        return derive_seed("scenario", self.seed)

    def consensus_params(self) -> ConsensusParams:
        base = self.consensus.base_size or max(
            1, round(self.consensus.sample_fraction * self.nodes)
        )
        return ConsensusParams(
            total_nodes=self.nodes,
            sample_fraction=self.consensus.sample_fraction,
            byz_fraction_max=self.consensus.byz_fraction_max,
            confidence_beta=self.consensus.confidence_beta,
            base_size=base,
        )

    def osmd_params(self) -> OsmdParams:
        return OsmdParams(
            batch_size=self.osmd.batch_size,
            learning_rate=self.osmd.learning_rate,
            step_sizes=(self.osmd.step_size,),
            floor_fraction=self.osmd.floor_fraction,
        )

    def adversary_spec(self) -> AdversarySpec:
        return AdversarySpec(
            byz_node_fraction=self.adversary.node_fraction,
            node_strategy=self.adversary.node_strategy,
            byz_seller_fraction=self.adversary.seller_fraction,
            seller_strategy=self.adversary.seller_strategy,
            seed=derive_seed(self.root_seed, "adversary"),
            scale_factor=self.adversary.scale_factor,
            poison_strength=self.adversary.poison_strength,
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            class_count=self.data.classes,
            dims=self.data.dims,
            separation=self.data.separation,
            noise=self.data.noise,
        )

    def model_spec(self, input_dim: int, class_count: int) -> ModelSpec:
        return ModelSpec(
            input_dim=input_dim, class_count=class_count, hidden=self.hidden_units
        )

    def metric_spec(self) -> MetricSpec:
        return MetricSpec(metric_id=self.request.metric, threshold=self.request.threshold)

    def data_request(self) -> DataRequest:
        return DataRequest(
            tags=frozenset(self.request.tags),
            amount=self.request.amount,
            metric_id=self.request.metric,
            threshold=self.request.threshold,
        )


_SECTIONS = {
    "consensus": ConsensusConfig,
    "osmd": OsmdConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "adversary": AdversaryConfig,
    "request": RequestConfig,
    "analysis": AnalysisConfig,
}

_TOP_FIELDS = {
    f.name: f
    for f in dataclasses.fields(Scenario)
    if f.name not in _SECTIONS
}


def _coerce(raw: str, target_type, key: str):
    # postponed annotations make dataclass field types plain strings
    name = target_type if isinstance(target_type, str) else getattr(target_type, "__name__", "")
    if name == "int":
        return int(raw)
    if name == "float":
        return float(raw)
    if name == "str":
        return raw
    if name in ("tuple[str, ...]", "tuple[int, ...]"):
        items = [part.strip() for part in raw.split(",") if part.strip()]
        if name == "tuple[int, ...]":
            return tuple(int(p) for p in items)
        return tuple(items)
    raise ValueError(f"cannot parse config key {key!r}")


def parse_config(text: str) -> Scenario:
    """Parse the flat ``section.key = value`` scenario format.

    Lines starting with ``#`` are comments; unknown keys are rejected so
    typos fail loudly instead of silently using defaults.
    """
    top: dict = {}
    sections: dict[str, dict] = {name: {} for name in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if "." in key:
            section, _, name = key.partition(".")
            cls = _SECTIONS.get(section)
            if cls is None:
                raise ValueError(f"line {lineno}: unknown section {section!r}")
            fields = {f.name: f for f in dataclasses.fields(cls)}
            if name not in fields:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            sections[section][name] = _coerce(raw, fields[name].type, key)
        else:
            if key not in _TOP_FIELDS:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            top[key] = _coerce(raw, _TOP_FIELDS[key].type, key)
    kwargs = dict(top)
    for name, cls in _SECTIONS.items():
        kwargs[name] = cls(**sections[name])
    return Scenario(**kwargs)


def load_scenario(path: str | Path) -> Scenario:
    return parse_config(Path(path).read_text())


def format_config(scenario: Scenario) -> str:
    """Render a scenario back into the flat config format."""
    lines = []
    for name, f in _TOP_FIELDS.items():
        value = getattr(scenario, name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{name} = {value}")
    for section, cls in _SECTIONS.items():
        sub = getattr(scenario, section)
        for f in dataclasses.fields(cls):
            value = getattr(sub, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{section}.{f.name} = {value}")
    return "\n".join(lines) + "\n"
