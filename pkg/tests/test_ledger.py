"""Auction contract state machine, escrow, commits, and audit surfaces."""

import json

import pytest

from datamarket.errors import (
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
from datamarket.ledger import DataRequest, Ledger, Role
from datamarket.rng import derive_seed, rng_from


def request(tags=("x",), amount=100, threshold=0.9) -> DataRequest:
    return DataRequest(tags=frozenset(tags), amount=amount, threshold=threshold)


def conserved(ledger: Ledger) -> bool:
    held = sum(a.balance for a in ledger.accounts.values())
    return held + ledger.escrowed_total + ledger.fees_collected == ledger.total_supply


def funded_ledger(**kwargs) -> Ledger:
    ledger = Ledger(seed=3, **kwargs)
    ledger.register_user("b1", is_buyer=True)
    ledger.register_user("b2", is_buyer=True)
    ledger.register_user("s1", is_buyer=False)
    ledger.register_user("s2", is_buyer=False)
    ledger.mint("b1", 1000)
    ledger.mint("b2", 1000)
    return ledger


class TestRegistration:
    def test_fresh_buyer(self):
        ledger = Ledger()
        ledger.register_user("b1", is_buyer=True)
        acct = ledger.accounts["b1"]
        assert acct.role is Role.BUYER and acct.balance == 0

    def test_duplicate_rejected(self):
        ledger = Ledger()
        ledger.register_user("s1", is_buyer=False)
        with pytest.raises(DuplicateId):
            ledger.register_user("s1", is_buyer=False)
        with pytest.raises(DuplicateId):
            ledger.register_node("s1")

    def test_two_hundred_sellers(self):
        ledger = Ledger()
        for i in range(200):
            ledger.register_user(f"s{i:03d}", is_buyer=False)
        sellers = [a for a in ledger.accounts.values() if a.role is Role.SELLER]
        assert len(sellers) == 200
        assert len({a.id for a in sellers}) == 200


class TestDatasetRegistry:
    def test_register_and_query(self):
        ledger = funded_ledger()
        ledger.register_dataset("s1", {"mnist", "digits"}, 600)
        assert ledger.identify_matching_datasets({"mnist"}) == {"s1"}

    def test_unknown_seller(self):
        ledger = funded_ledger()
        with pytest.raises(UnknownSeller):
            ledger.register_dataset("ghost", {"x"}, 5)
        with pytest.raises(UnknownSeller):
            ledger.register_dataset("b1", {"x"}, 5)  # buyers cannot own datasets

    def test_two_datasets_same_seller(self):
        ledger = funded_ledger()
        d1 = ledger.register_dataset("s1", {"a"}, 10)
        d2 = ledger.register_dataset("s1", {"b"}, 20)
        stored = {(ds.dataset_id, tuple(sorted(ds.tags)), ds.size) for ds in ledger.datasets}
        assert (d1, ("a",), 10) in stored and (d2, ("b",), 20) in stored

    def test_matching_is_superset(self):
        ledger = funded_ledger()
        ledger.register_dataset("s1", {"a", "b"}, 1)
        ledger.register_dataset("s2", {"b"}, 1)
        assert ledger.identify_matching_datasets({"a"}) == {"s1"}
        assert ledger.identify_matching_datasets({"a", "c"}) == frozenset()
        assert ledger.identify_matching_datasets(set()) == {"s1", "s2"}

    def test_agrees_with_brute_force_scan(self):
        rng = rng_from(derive_seed("registry"))
        ledger = Ledger()
        universe = [f"t{i}" for i in range(9)]
        sellers = [f"s{i:02d}" for i in range(30)]
        for s in sellers:
            ledger.register_user(s, is_buyer=False)
        records = []
        for _ in range(600):
            seller = sellers[int(rng.integers(len(sellers)))]
            tags = {universe[i] for i in rng.choice(9, size=int(rng.integers(1, 5)), replace=False)}
            ledger.register_dataset(seller, tags, int(rng.integers(1, 50)))
            records.append((seller, frozenset(tags)))
        for _ in range(60):
            query = {universe[i] for i in rng.choice(9, size=int(rng.integers(0, 4)), replace=False)}
            expected = {seller for seller, tags in records if frozenset(query) <= tags}
            assert ledger.identify_matching_datasets(query) == expected


class TestAuctionLifecycle:
    def test_start_auction_places_first_bid(self):
        ledger = funded_ledger()
        ledger.start_auction(request(amount=100), "b1")
        auction = ledger.active_auctions[frozenset({"x"})]
        assert auction.highest_bid == 100 and auction.highest_bidder == "b1"
        assert auction.escrowed == 100 and auction.auction_end == ledger.height + 10
        assert ledger.accounts["b1"].balance == 900
        assert conserved(ledger)

    def test_non_buyer_cannot_start(self):
        ledger = funded_ledger()
        with pytest.raises(NotBuyer):
            ledger.start_auction(request(), "s1")
        with pytest.raises(NotBuyer):
            ledger.start_auction(request(), "nobody")

    def test_second_start_routes_to_bid(self):
        ledger = funded_ledger()
        ledger.start_auction(request(amount=100), "b1")
        ledger.start_auction(request(amount=150), "b2")
        auction = ledger.active_auctions[frozenset({"x"})]
        assert auction.highest_bidder == "b2" and auction.highest_bid == 150
        assert len(ledger.active_auctions) == 1
        assert ledger.accounts["b1"].balance == 1000  # refunded on outbid
        assert conserved(ledger)

    def test_failed_first_bid_rolls_back_auction(self):
        ledger = funded_ledger()
        with pytest.raises(InsufficientBalance):
            ledger.start_auction(request(amount=5000), "b1")
        assert not ledger.active_auctions

    def test_higher_bid_refunds_previous(self):
        ledger = funded_ledger()
        ledger.start_auction(request(amount=100), "b1")
        assert ledger.place_bid(request(amount=150), "b2") is True
        assert ledger.accounts["b1"].balance == 1000
        assert ledger.accounts["b2"].balance == 850
        assert ledger.active_auctions[frozenset({"x"})].escrowed == 150
        assert conserved(ledger)

    def test_equal_bid_rejected(self):
        ledger = funded_ledger()
        ledger.start_auction(request(amount=100), "b1")
        assert ledger.place_bid(request(amount=100), "b2") is False
        assert ledger.active_auctions[frozenset({"x"})].highest_bidder == "b1"
        assert ledger.accounts["b2"].balance == 1000

    def test_bid_after_window_rejected(self):
        ledger = funded_ledger(auction_window=3)
        ledger.start_auction(request(amount=100), "b1")
        for _ in range(3):
            ledger.advance_block()
        with pytest.raises(NoActiveAuction):
            ledger.place_bid(request(amount=200), "b2")

    def test_bid_without_auction_rejected(self):
        ledger = funded_ledger()
        with pytest.raises(NoActiveAuction):
            ledger.place_bid(request(), "b1")

    def test_insufficient_balance(self):
        ledger = funded_ledger()
        ledger.start_auction(request(amount=100), "b1")
        with pytest.raises(InsufficientBalance):
            ledger.place_bid(request(amount=1500), "b2")


class TestCloseAuction:
    def test_winner_after_window(self):
        ledger = funded_ledger(auction_window=10)
        ledger.register_dataset("s1", {"x"}, 10)
        ledger.start_auction(request(amount=100), "b1")
        ledger.place_bid(request(amount=150), "b2")
        for _ in range(10):
            ledger.advance_block()
        won, sellers, settlement = ledger.close_auction({"x"})
        assert won.amount == 150 and sellers == {"s1"}
        assert ledger.settlements[settlement].winner == "b2"
        assert frozenset({"x"}) not in ledger.active_auctions
        assert conserved(ledger)

    def test_close_before_end_rejected(self):
        ledger = funded_ledger()
        ledger.start_auction(request(), "b1")
        with pytest.raises(AuctionStillOpen):
            ledger.close_auction({"x"})

    def test_close_unknown_auction(self):
        ledger = funded_ledger()
        with pytest.raises(NoSuchAuction):
            ledger.close_auction({"zzz"})

    def test_no_matching_sellers_refunds_winner(self):
        ledger = funded_ledger(auction_window=2)
        ledger.start_auction(request(amount=100), "b1")
        for _ in range(2):
            ledger.advance_block()
        won, sellers, settlement = ledger.close_auction({"x"})
        assert sellers == frozenset() and settlement is None
        assert ledger.accounts["b1"].balance == 1000
        assert ledger.escrowed_total == 0
        assert conserved(ledger)

    def test_explicit_height_parameter(self):
        ledger = funded_ledger(auction_window=5)
        ledger.start_auction(request(amount=100), "b1")
        with pytest.raises(AuctionStillOpen):
            ledger.close_auction({"x"}, current_height=4)
        won, _, _ = ledger.close_auction({"x"}, current_height=5)
        assert won.amount == 100

    def test_payout_must_balance(self):
        ledger = funded_ledger(auction_window=1)
        ledger.register_dataset("s1", {"x"}, 3)
        ledger.start_auction(request(amount=100), "b1")
        ledger.advance_block()
        _, _, settlement = ledger.close_auction({"x"})
        with pytest.raises(ValueError):
            ledger.payout_escrow(settlement, {"s1": 50})
        ledger.payout_escrow(settlement, {"s1": 70, "b1": 30})
        assert ledger.accounts["s1"].balance == 70
        assert conserved(ledger)


class TestCommitments:
    def fresh(self):
        ledger = Ledger(seed=1, commit_timeout=10)
        for i in range(6):
            ledger.register_node(f"n{i}")
        return ledger

    def test_completion_event_on_last_commit(self):
        ledger = self.fresh()
        members = ["n0", "n1", "n2", "n3"]
        ledger.publish_execution_set(0, 1, members)
        for node in members:
            ledger.commit_digest(node, 0, 1, derive_seed("d"))
        done = [e for e in ledger.events if e["kind"] == "commit-complete"]
        assert len(done) == 1 and done[0]["commits"] == 4

    def test_timeout_fires_with_partial_commits(self):
        ledger = self.fresh()
        ledger.publish_execution_set(0, 1, ["n0", "n1", "n2", "n3"])
        for node in ["n0", "n1", "n2"]:
            ledger.commit_digest(node, 0, 1, derive_seed("d"))
        for _ in range(10):
            ledger.advance_block()
        timeouts = [e for e in ledger.events if e["kind"] == "commit-timeout"]
        assert len(timeouts) == 1 and timeouts[0]["commits"] == 3
        assert len(ledger.commits_for(0, 1)) == 3

    def test_non_member_rejected(self):
        ledger = self.fresh()
        ledger.publish_execution_set(0, 1, ["n0", "n1"])
        with pytest.raises(NotInExecutionSet):
            ledger.commit_digest("n5", 0, 1, derive_seed("d"))
        with pytest.raises(NotInExecutionSet):
            ledger.commit_digest("n0", 0, 2, derive_seed("d"))

    def test_double_commit_rejected(self):
        ledger = self.fresh()
        ledger.publish_execution_set(0, 1, ["n0", "n1"])
        ledger.commit_digest("n0", 0, 1, derive_seed("d"))
        with pytest.raises(DoubleCommit):
            ledger.commit_digest("n0", 0, 1, derive_seed("other"))


class TestBlocks:
    def test_height_increments(self):
        ledger = Ledger()
        assert ledger.advance_block() == 1
        assert ledger.advance_block() == 2

    def test_close_eligibility_event(self):
        ledger = funded_ledger(auction_window=2)
        ledger.start_auction(request(), "b1")
        ledger.advance_block()
        ledger.advance_block()
        assert any(e["kind"] == "auction-closeable" for e in ledger.events)

    def test_beacon_reproducible_across_instances(self):
        a, b = Ledger(seed=99), Ledger(seed=99)
        for _ in range(5):
            a.advance_block()
            b.advance_block()
        assert a.beacon() == b.beacon()
        assert a.beacon(3) == b.beacon(3)
        assert Ledger(seed=100).beacon(3) != a.beacon(3)


class TestConservationFuzz:
    def test_random_workload_conserves_supply(self):
        rng = rng_from(derive_seed("workload"))
        ledger = Ledger(seed=5, auction_window=4, tx_fee=1)
        buyers = [f"b{i}" for i in range(4)]
        for b in buyers:
            ledger.register_user(b, is_buyer=True)
            ledger.mint(b, 5000)
        ledger.register_user("s1", is_buyer=False)
        ledger.register_dataset("s1", {"t"}, 10)
        for step in range(200):
            action = rng.integers(0, 3)
            buyer = buyers[int(rng.integers(4))]
            try:
                if action == 0:
                    ledger.start_auction(request(tags=("t",), amount=int(rng.integers(1, 300))), buyer)
                elif action == 1:
                    ledger.place_bid(request(tags=("t",), amount=int(rng.integers(1, 300))), buyer)
                else:
                    ledger.advance_block()
                    try:
                        won, sellers, settlement = ledger.close_auction({"t"})
                        if settlement is not None:
                            ledger.payout_escrow(
                                settlement, {"s1": won.amount - 1, buyer: 1}
                            )
                    except (NoSuchAuction, AuctionStillOpen):
                        pass
            except (NoActiveAuction, InsufficientBalance):
                pass
            assert conserved(ledger)


class TestDeterminismAndAudit:
    def drive(self) -> Ledger:
        ledger = funded_ledger(auction_window=3, tx_fee=2)
        ledger.register_node("n0")
        ledger.register_dataset("s1", {"x", "y"}, 42)
        ledger.start_auction(request(tags=("x",), amount=120), "b1")
        ledger.place_bid(request(tags=("x",), amount=180), "b2")
        for _ in range(3):
            ledger.advance_block()
        _, _, settlement = ledger.close_auction({"x"})
        ledger.payout_escrow(settlement, {"s1": 126, "n0": 54})
        ledger.publish_execution_set(0, 1, ["n0"])
        ledger.commit_digest("n0", 0, 1, derive_seed("c"))
        ledger.advance_block()
        return ledger

    def test_identical_sequences_identical_state(self):
        assert self.drive().snapshot_json() == self.drive().snapshot_json()

    def test_replay_from_tx_log(self):
        original = self.drive()
        replayed = Ledger.replay(original.tx_log_ndjson())
        assert replayed.snapshot_json() == original.snapshot_json()
        assert replayed.tx_log_ndjson() == original.tx_log_ndjson()

    def test_snapshot_is_valid_json(self):
        snapshot = json.loads(self.drive().snapshot_json())
        assert snapshot["total_supply"] == 2000
        assert snapshot["accounts"]["s1"]["role"] == "seller"

    def test_tx_log_is_ndjson(self):
        for line in self.drive().tx_log_ndjson().splitlines():
            json.loads(line)
