"""Simulated single-writer blockchain: balances, auctions, escrow, commits.

All state changes go through the public methods below, which either apply
fully or raise without side effects, and are appended to a replayable
transaction log.  Token conservation is exact: minted supply always equals
balances plus escrow plus collected fees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from .consensus import CommitRecord
from .errors import (
    AuctionStillOpen,
    DoubleCommit,
    DuplicateId,
    InsufficientBalance,
    NoActiveAuction,
    NoSuchAuction,
    NotBuyer,
    NotInExecutionSet,
    UnknownSeller,
)
from .rng import derive_seed


class Role(str, Enum):
    BUYER = "buyer"
    SELLER = "seller"
    NODE = "node"


@dataclass
class Account:
    id: str
    balance: int
    role: Role


@dataclass(frozen=True)
class DataRequest:
    """A buyer's bid: what data to use, how much to pay, when to stop."""

    tags: frozenset[str]
    amount: int
    model_spec: object | None = None
    metric_id: str = "accuracy"
    threshold: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "tags", frozenset(self.tags))
        if not self.tags:
            raise ValueError("request tags must be non-empty")
        if self.amount <= 0:
            raise ValueError("bid amount must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("metric threshold must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "tags": sorted(self.tags),
            "amount": self.amount,
            "metric_id": self.metric_id,
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DataRequest":
        return cls(
            tags=frozenset(data["tags"]),
            amount=data["amount"],
            metric_id=data.get("metric_id", "accuracy"),
            threshold=data.get("threshold", 0.95),
        )


@dataclass
class AuctionState:
    tags: frozenset[str]
    auction_end: int
    highest_bid: int = 0
    highest_bidder: str | None = None
    escrowed: int = 0
    request: DataRequest | None = None


@dataclass(frozen=True)
class DatasetRecord:
    dataset_id: str
    seller: str
    tags: frozenset[str]
    size: int


@dataclass(frozen=True)
class Block:
    height: int
    randomness: bytes
    tx_count: int


@dataclass
class _ExecutionSlot:
    members: tuple[str, ...]
    deadline: int
    commits: dict[str, CommitRecord] = field(default_factory=dict)
    closed: bool = False


@dataclass
class _Settlement:
    amount: int
    winner: str
    tags: frozenset[str]


class Ledger:
    """Single-writer ledger hosting the auction contract state machine."""

    def __init__(
        self,
        seed: int = 0,
        auction_window: int = 10,
        commit_timeout: int = 10,
        tx_fee: int = 0,
    ):
        self.seed = seed
        self.auction_window = auction_window
        self.commit_timeout = commit_timeout
        self.tx_fee = tx_fee
        self.height = 0
        self.accounts: dict[str, Account] = {}
        self.datasets: list[DatasetRecord] = []
        self.active_auctions: dict[frozenset[str], AuctionState] = {}
        self.settlements: dict[int, _Settlement] = {}
        self.execution_slots: dict[tuple[int, int], _ExecutionSlot] = {}
        self.blocks: list[Block] = [Block(0, self._randomness(0), 0)]
        self.events: list[dict] = []
        self.tx_log: list[dict] = [
            {
                "op": "genesis",
                "seed": seed,
                "auction_window": auction_window,
                "commit_timeout": commit_timeout,
                "tx_fee": tx_fee,
            }
        ]
        self.total_supply = 0
        self.fees_collected = 0
        self._next_settlement = 0

    # -- internals ----------------------------------------------------

    def _randomness(self, height: int) -> bytes:
        return derive_seed(self.seed, "beacon", height)

    def _log(self, op: str, **params) -> None:
        self.tx_log.append({"op": op, "height": self.height, **params})

    def _emit(self, kind: str, **payload) -> None:
        self.events.append({"height": self.height, "kind": kind, **payload})

    def _account(self, account_id: str) -> Account:
        if account_id not in self.accounts:
            raise KeyError(f"unknown account {account_id!r}")
        return self.accounts[account_id]

    # -- registration and funding --------------------------------------

    def register_user(self, user_id: str, is_buyer: bool) -> str:
        if user_id in self.accounts:
            raise DuplicateId(f"account {user_id!r} already registered")
        role = Role.BUYER if is_buyer else Role.SELLER
        self.accounts[user_id] = Account(id=user_id, balance=0, role=role)
        self._log("register_user", user_id=user_id, is_buyer=is_buyer)
        return user_id

    def register_node(self, node_id: str) -> str:
        if node_id in self.accounts:
            raise DuplicateId(f"account {node_id!r} already registered")
        self.accounts[node_id] = Account(id=node_id, balance=0, role=Role.NODE)
        self._log("register_node", node_id=node_id)
        return node_id

    def mint(self, account_id: str, amount: int) -> None:
        """Issue new tokens to an account; grows the tracked supply."""
        if amount < 0:
            raise ValueError("cannot mint a negative amount")
        acct = self._account(account_id)
        acct.balance += amount
        self.total_supply += amount
        self._log("mint", account_id=account_id, amount=amount)

    def register_dataset(self, seller: str, tags: Iterable[str], size: int) -> str:
        tags = frozenset(tags)
        if not tags:
            raise ValueError("dataset tags must be non-empty")
        if size < 0:
            raise ValueError("dataset size must be >= 0")
        acct = self.accounts.get(seller)
        if acct is None or acct.role is not Role.SELLER:
            raise UnknownSeller(f"{seller!r} is not a registered seller")
        dataset_id = f"d{len(self.datasets) + 1}"
        self.datasets.append(DatasetRecord(dataset_id, seller, tags, size))
        self._log("register_dataset", seller=seller, tags=sorted(tags), size=size)
        return dataset_id

    def identify_matching_datasets(self, tags: Iterable[str]) -> frozenset[str]:
        """Sellers owning at least one dataset whose tags cover the query."""
        query = frozenset(tags)
        return frozenset(ds.seller for ds in self.datasets if query <= ds.tags)

    # -- auction ------------------------------------------------------

    def start_auction(self, request: DataRequest, caller: str) -> frozenset[str]:
        """Open an auction for the request's tags and place the first bid.

        When an auction with the same tags is already active the call
        routes to place_bid instead of opening a second one.
        """
        acct = self.accounts.get(caller)
        if acct is None or acct.role is not Role.BUYER:
            raise NotBuyer(f"{caller!r} is not a registered buyer")
        if request.tags in self.active_auctions:
            self.place_bid(request, caller, _record=False)
            self._log("start_auction", request=request.to_dict(), caller=caller)
            return request.tags
        self.active_auctions[request.tags] = AuctionState(
            tags=request.tags, auction_end=self.height + self.auction_window
        )
        try:
            self.place_bid(request, caller, _record=False)
        except Exception:
            del self.active_auctions[request.tags]
            raise
        self._log("start_auction", request=request.to_dict(), caller=caller)
        self._emit("auction-started", tags=sorted(request.tags), caller=caller)
        return request.tags

    def place_bid(self, request: DataRequest, caller: str, _record: bool = True) -> bool:
        """Escrow a strictly higher bid, refunding the displaced bidder.

        Equal bids are rejected; the transaction fee is charged whether or
        not the bid is accepted.
        """
        auction = self.active_auctions.get(request.tags)
        if auction is None or self.height >= auction.auction_end:
            raise NoActiveAuction(f"no active auction for tags {sorted(request.tags)}")
        acct = self._account(caller)
        if acct.balance < request.amount + self.tx_fee:
            raise InsufficientBalance(
                f"{caller!r} holds {acct.balance}, needs {request.amount + self.tx_fee}"
            )
        acct.balance -= self.tx_fee
        self.fees_collected += self.tx_fee
        accepted = request.amount > auction.highest_bid
        if accepted:
            acct.balance -= request.amount
            if auction.highest_bidder is not None:
                self._account(auction.highest_bidder).balance += auction.escrowed
            auction.highest_bid = request.amount
            auction.highest_bidder = caller
            auction.escrowed = request.amount
            auction.request = request
            self._emit(
                "bid-accepted", tags=sorted(request.tags), caller=caller, amount=request.amount
            )
        if _record:
            self._log(
                "place_bid", request=request.to_dict(), caller=caller, accepted=accepted
            )
        return accepted

    def close_auction(
        self, tags: Iterable[str], current_height: int | None = None
    ) -> tuple[DataRequest | None, frozenset[str], int | None]:
        """End an elapsed auction; return the winning request and matched sellers.

        The escrow moves into a settlement awaiting payout.  With no
        matching sellers (or no bids) the winner is refunded in full.
        """
        tags = frozenset(tags)
        auction = self.active_auctions.get(tags)
        if auction is None:
            raise NoSuchAuction(f"no auction for tags {sorted(tags)}")
        height = self.height if current_height is None else current_height
        if height < auction.auction_end:
            raise AuctionStillOpen(
                f"auction open until height {auction.auction_end}, now {height}"
            )
        del self.active_auctions[tags]
        if auction.highest_bidder is None:
            self._log("close_auction", tags=sorted(tags), outcome="no-bids")
            self._emit("auction-closed", tags=sorted(tags), winner=None)
            return None, frozenset(), None
        sellers = self.identify_matching_datasets(tags)
        if not sellers:
            self._account(auction.highest_bidder).balance += auction.escrowed
            self._log("close_auction", tags=sorted(tags), outcome="refunded")
            self._emit(
                "auction-refunded", tags=sorted(tags), winner=auction.highest_bidder
            )
            return auction.request, frozenset(), None
        settlement_id = self._next_settlement
        self._next_settlement += 1
        self.settlements[settlement_id] = _Settlement(
            amount=auction.escrowed, winner=auction.highest_bidder, tags=tags
        )
        self._log("close_auction", tags=sorted(tags), outcome="settled")
        self._emit(
            "auction-closed",
            tags=sorted(tags),
            winner=auction.highest_bidder,
            amount=auction.escrowed,
            sellers=sorted(sellers),
        )
        return auction.request, sellers, settlement_id

    def payout_escrow(self, settlement_id: int, transfers: Mapping[str, int]) -> None:
        """Disburse a settlement's escrow; transfers must sum to it exactly."""
        settlement = self.settlements.get(settlement_id)
        if settlement is None:
            raise KeyError(f"unknown settlement {settlement_id}")
        if sum(transfers.values()) != settlement.amount:
            raise ValueError("transfers do not sum to the escrowed amount")
        if any(v < 0 for v in transfers.values()):
            raise ValueError("transfers must be non-negative")
        for account_id in transfers:
            self._account(account_id)
        for account_id, value in transfers.items():
            self.accounts[account_id].balance += value
        del self.settlements[settlement_id]
        self._log(
            "payout_escrow",
            settlement_id=settlement_id,
            transfers={k: transfers[k] for k in sorted(transfers)},
        )
        self._emit("escrow-paid", settlement_id=settlement_id)

    def refund_settlement(self, settlement_id: int) -> None:
        """Return a settlement's escrow to the winning bidder untouched."""
        settlement = self.settlements.get(settlement_id)
        if settlement is None:
            raise KeyError(f"unknown settlement {settlement_id}")
        self._account(settlement.winner).balance += settlement.amount
        del self.settlements[settlement_id]
        self._log("refund_settlement", settlement_id=settlement_id)
        self._emit("escrow-refunded", settlement_id=settlement_id)

    # -- digest commitments --------------------------------------------

    def publish_execution_set(
        self, round: int, mini_round: int, members: Iterable[str]
    ) -> None:
        key = (round, mini_round)
        if key in self.execution_slots:
            raise ValueError(f"execution set for {key} already published")
        members = tuple(members)
        self.execution_slots[key] = _ExecutionSlot(
            members=members, deadline=self.height + self.commit_timeout
        )
        self._log("publish_execution_set", round=round, mini_round=mini_round, members=list(members))
        self._emit("execution-set", round=round, mini_round=mini_round, members=list(members))

    def commit_digest(self, node: str, round: int, mini_round: int, digest: bytes) -> bool:
        slot = self.execution_slots.get((round, mini_round))
        if slot is None or node not in slot.members:
            raise NotInExecutionSet(f"{node!r} not in execution set ({round}, {mini_round})")
        if node in slot.commits:
            raise DoubleCommit(f"{node!r} already committed for ({round}, {mini_round})")
        slot.commits[node] = CommitRecord(mini_round=mini_round, digest=digest, node=node)
        self._log(
            "commit_digest", node=node, round=round, mini_round=mini_round, digest=digest.hex()
        )
        if len(slot.commits) == len(slot.members) and not slot.closed:
            slot.closed = True
            self._emit(
                "commit-complete",
                round=round,
                mini_round=mini_round,
                commits=len(slot.commits),
            )
        return True

    def commits_for(self, round: int, mini_round: int) -> list[CommitRecord]:
        slot = self.execution_slots.get((round, mini_round))
        if slot is None:
            return []
        return [slot.commits[node] for node in slot.members if node in slot.commits]

    # -- block production -----------------------------------------------

    def advance_block(self) -> int:
        """Advance one block: refresh the beacon, fire due expirations."""
        self.height += 1
        self.blocks.append(Block(self.height, self._randomness(self.height), len(self.tx_log)))
        self._log("advance_block")
        for auction in self.active_auctions.values():
            if auction.auction_end == self.height:
                self._emit("auction-closeable", tags=sorted(auction.tags))
        for (round, mini_round), slot in self.execution_slots.items():
            if not slot.closed and self.height >= slot.deadline:
                slot.closed = True
                self._emit(
                    "commit-timeout",
                    round=round,
                    mini_round=mini_round,
                    commits=len(slot.commits),
                )
        return self.height

    def beacon(self, height: int | None = None) -> bytes:
        """Deterministic per-block randomness used to seed sortition."""
        return self._randomness(self.height if height is None else height)

    # -- audit surfaces ---------------------------------------------------

    @property
    def escrowed_total(self) -> int:
        active = sum(a.escrowed for a in self.active_auctions.values())
        settled = sum(s.amount for s in self.settlements.values())
        return active + settled

    def snapshot(self) -> dict:
        return {
            "height": self.height,
            "total_supply": self.total_supply,
            "fees_collected": self.fees_collected,
            "accounts": {
                a.id: {"balance": a.balance, "role": a.role.value}
                for a in sorted(self.accounts.values(), key=lambda a: a.id)
            },
            "datasets": [
                {
                    "id": ds.dataset_id,
                    "seller": ds.seller,
                    "tags": sorted(ds.tags),
                    "size": ds.size,
                }
                for ds in self.datasets
            ],
            "active_auctions": [
                {
                    "tags": sorted(a.tags),
                    "auction_end": a.auction_end,
                    "highest_bid": a.highest_bid,
                    "highest_bidder": a.highest_bidder,
                    "escrowed": a.escrowed,
                }
                for a in sorted(self.active_auctions.values(), key=lambda a: sorted(a.tags))
            ],
            "settlements": {
                str(sid): {"amount": s.amount, "winner": s.winner, "tags": sorted(s.tags)}
                for sid, s in sorted(self.settlements.items())
            },
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True, indent=2)

    def tx_log_ndjson(self) -> str:
        return "\n".join(json.dumps(entry, sort_keys=True) for entry in self.tx_log)

    @classmethod
    def replay(cls, ndjson: str) -> "Ledger":
        """Rebuild a ledger by re-applying an exported transaction log."""
        lines = [json.loads(line) for line in ndjson.splitlines() if line.strip()]
        if not lines or lines[0]["op"] != "genesis":
            raise ValueError("transaction log must start with a genesis record")
        genesis = lines[0]
        ledger = cls(
            seed=genesis["seed"],
            auction_window=genesis["auction_window"],
            commit_timeout=genesis["commit_timeout"],
            tx_fee=genesis["tx_fee"],
        )
        for entry in lines[1:]:
            op = entry["op"]
            if op == "register_user":
                ledger.register_user(entry["user_id"], entry["is_buyer"])
            elif op == "register_node":
                ledger.register_node(entry["node_id"])
            elif op == "mint":
                ledger.mint(entry["account_id"], entry["amount"])
            elif op == "register_dataset":
                ledger.register_dataset(entry["seller"], entry["tags"], entry["size"])
            elif op == "start_auction":
                ledger.start_auction(DataRequest.from_dict(entry["request"]), entry["caller"])
            elif op == "place_bid":
                ledger.place_bid(DataRequest.from_dict(entry["request"]), entry["caller"])
            elif op == "close_auction":
                ledger.close_auction(entry["tags"])
            elif op == "payout_escrow":
                ledger.payout_escrow(entry["settlement_id"], entry["transfers"])
            elif op == "refund_settlement":
                ledger.refund_settlement(entry["settlement_id"])
            elif op == "publish_execution_set":
                ledger.publish_execution_set(
                    entry["round"], entry["mini_round"], entry["members"]
                )
            elif op == "commit_digest":
                ledger.commit_digest(
                    entry["node"],
                    entry["round"],
                    entry["mini_round"],
                    bytes.fromhex(entry["digest"]),
                )
            elif op == "advance_block":
                ledger.advance_block()
            else:
                raise ValueError(f"unknown op {op!r} in transaction log")
        return ledger
