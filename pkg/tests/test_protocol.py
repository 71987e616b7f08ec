"""Entity-level tests: seed planning, deposits, mailbox shards, handset
polling, key recovery, and the canonical wire encodings."""

import pytest

from stmcast import crypto, protocol, tokens, topology
from stmcast.protocol import (
    AddressingFailure,
    BaseStation,
    DepositRejected,
    DepositRequest,
    PollRequest,
    PollResponse,
    RendezvousPoint,
    SeedTable,
    StoredMessage,
    TrustedPlanner,
    UserEquipment,
)
from stmcast.topology import CellMap, Rect, Site

MIN = 60.0

H3 = tokens.TokenHierarchy.from_rows(
    [(10 * MIN, 0, 30 * MIN), (20 * MIN, 30 * MIN, 60 * MIN), (30 * MIN, 60 * MIN, 90 * MIN)]
)
H4 = tokens.TokenHierarchy.from_rows(
    [(3 * MIN, 0, 15 * MIN), (6 * MIN, 15 * MIN, 30 * MIN), (9 * MIN, 30 * MIN, 60 * MIN), (12 * MIN, 60 * MIN, 120 * MIN)]
)


def make_map(n=3, spacing=1000.0):
    return CellMap.from_sites([Site(i, i * spacing, 0.0) for i in range(n)], margin_m=400.0)


def singleton_clusterings(cell_map, num_levels):
    return {
        level: topology.random_clusters(cell_map, 1, rng_seed=level, level=level) for level in range(num_levels)
    }


def paired_clusterings(cell_map, num_levels):
    """Levels above 0 group cells into clusters of two."""
    out = {0: topology.random_clusters(cell_map, 1, rng_seed=0, level=0)}
    for level in range(1, num_levels):
        out[level] = topology.random_clusters(cell_map, 2, rng_seed=7, level=level)
    return out


@pytest.fixture
def small_world():
    cell_map = make_map(3)
    clusterings = singleton_clusterings(cell_map, H4.num_levels)
    table = SeedTable.generate(cell_map, H4, clusterings, master_seed=42)
    return cell_map, table


# -- seed planning --------------------------------------------------------------


def test_plan_seeds_singletons_are_distinct():
    cell_map = make_map(3)
    h1 = tokens.TokenHierarchy.from_rows([(180, 0, 7200)])
    table = SeedTable.generate(cell_map, h1, singleton_clusterings(cell_map, 1), master_seed=1)
    seeds = {table.lookup(c, 0).bytes for c in range(3)}
    assert len(seeds) == 3


def test_plan_seeds_shared_cluster_shares_seed():
    cell_map = make_map(4)
    clusterings = paired_clusterings(cell_map, 2)
    h2 = tokens.TokenHierarchy.from_rows([(180, 0, 900), (180, 900, 7200)])
    table = SeedTable.generate(cell_map, h2, clusterings, master_seed=1)
    assignment = clusterings[1].assignment
    for a in range(4):
        for b in range(4):
            same_cluster = assignment[a] == assignment[b]
            assert (table.lookup(a, 1) == table.lookup(b, 1)) == same_cluster


def test_plan_seeds_deterministic():
    cell_map = make_map(3)
    cl = singleton_clusterings(cell_map, H4.num_levels)
    t1 = SeedTable.generate(cell_map, H4, cl, master_seed=5)
    t2 = SeedTable.generate(cell_map, H4, cl, master_seed=5)
    assert t1.seeds == t2.seeds
    t3 = SeedTable.generate(cell_map, H4, cl, master_seed=6)
    assert t1.seeds != t3.seeds


def test_plan_seeds_rejects_incomplete_clustering():
    cell_map = make_map(3)
    clusterings = singleton_clusterings(cell_map, H4.num_levels)
    partial = dict(clusterings[1].assignment)
    del partial[2]
    clusterings[1] = topology.Clustering(level=1, assignment=partial)
    with pytest.raises(protocol.ConfigurationError):
        SeedTable.generate(cell_map, H4, clusterings, master_seed=1)


def test_plan_seeds_rejects_non_singleton_level0():
    cell_map = make_map(4)
    clusterings = singleton_clusterings(cell_map, H4.num_levels)
    clusterings[0] = topology.random_clusters(cell_map, 2, rng_seed=1, level=0)
    with pytest.raises(protocol.ConfigurationError):
        SeedTable.generate(cell_map, H4, clusterings, master_seed=1)


# -- key recovery ------------------------------------------------------------


def test_planner_recovers_every_token_key(small_world):
    """Keys inside station-issued tokens equal the table-derived keys, for
    every cell, base slot, and level."""
    cell_map, table = small_world
    for cell in cell_map.cell_ids:
        station = BaseStation(cell, H4, table.lookup)
        for k in range(40):
            token = station.tick(k * H4.base_slot_s)
            for lvl in H4.levels:
                level_slot = tokens.slot_index(token.announce_time_s, lvl.slot_size_s)
                recovered = protocol.derive_for(table, cell, lvl.level, level_slot)
                assert token.entries[lvl.level].key == recovered


def test_tick_requires_slot_alignment(small_world):
    _, table = small_world
    station = BaseStation(0, H4, table.lookup)
    with pytest.raises(ValueError):
        station.tick(10.0)


def test_entry_token_matches_tick_token(small_world):
    _, table = small_world
    station = BaseStation(1, H4, table.lookup)
    assert station.on_entry(250.0) == station.tick(180.0)


def test_same_tick_same_token(small_world):
    _, table = small_world
    a = BaseStation(2, H4, table.lookup).tick(540.0)
    b = BaseStation(2, H4, table.lookup).tick(540.0)
    assert a == b


# -- deposits ------------------------------------------------------------------


def test_deposit_single_cell_single_slot(small_world):
    cell_map, table = small_world
    planner = TrustedPlanner(cell_map, H4, table, num_rps=8)
    request = DepositRequest(Rect(-100, -100, 100, 100), 0.0, 180.0, b"payload")
    outcome = planner.deposit(request, now_s=300.0)
    assert len(outcome.stored) == 1
    assert len(outcome.candidates) == 1
    assert outcome.candidates[0].cell_id == 0
    assert outcome.candidates[0].level == 0


def test_deposit_40min_old_token_uses_level1_key():
    cell_map = make_map(1)
    clusterings = singleton_clusterings(cell_map, H3.num_levels)
    table = SeedTable.generate(cell_map, H3, clusterings, master_seed=3)
    planner = TrustedPlanner(cell_map, H3, table, num_rps=4)
    # Window inside the base slot announced 40 minutes before the deposit.
    request = DepositRequest(Rect(-50, -50, 50, 50), 0.0, 10 * MIN, b"m")
    outcome = planner.deposit(request, now_s=40 * MIN)
    assert [c.level for c in outcome.candidates] == [1]
    expected = protocol.derive_for(table, 0, 1, 0)
    assert outcome.stored[0][1].region == crypto.region_id(expected)


def test_deposit_dedups_cluster_aggregated_keys():
    # Two overlapped cells share a level-2 cluster; one stored copy results.
    sites = [Site(0, 0.0, 0.0), Site(1, 1000.0, 0.0)]
    cell_map = CellMap.from_sites(sites, margin_m=400.0)
    clusterings = {
        0: topology.random_clusters(cell_map, 1, rng_seed=0, level=0),
        1: topology.random_clusters(cell_map, 1, rng_seed=1, level=1),
        2: topology.random_clusters(cell_map, 2, rng_seed=2, level=2),
        3: topology.random_clusters(cell_map, 1, rng_seed=3, level=3),
    }
    assert len(clusterings[2].cluster_ids()) == 1
    table = SeedTable.generate(cell_map, H4, clusterings, master_seed=9)
    planner = TrustedPlanner(cell_map, H4, table, num_rps=8)
    request = DepositRequest(Rect(-200, -100, 1200, 100), 0.0, 180.0, b"m")
    now = 35 * MIN  # base slot 0 aged into level 2
    outcome = planner.deposit(request, now_s=now)
    assert {c.cell_id for c in outcome.candidates} == {0, 1}
    assert all(c.level == 2 for c in outcome.candidates)
    assert len(outcome.stored) == 1


def test_deposit_empty_overlap_is_addressing_failure(small_world):
    cell_map, table = small_world
    planner = TrustedPlanner(cell_map, H4, table, num_rps=8)
    request = DepositRequest(Rect(90_000, 90_000, 91_000, 91_000), 0.0, 180.0, b"m")
    with pytest.raises(AddressingFailure):
        planner.deposit(request, now_s=600.0)


def test_deposit_fully_stale_window_is_addressing_failure(small_world):
    cell_map, table = small_world
    planner = TrustedPlanner(cell_map, H4, table, num_rps=8)
    request = DepositRequest(Rect(-100, -100, 100, 100), 0.0, 180.0, b"m")
    with pytest.raises(AddressingFailure):
        planner.deposit(request, now_s=125 * MIN)


def test_deposit_future_window_rejected(small_world):
    cell_map, table = small_world
    planner = TrustedPlanner(cell_map, H4, table, num_rps=8)
    request = DepositRequest(Rect(-100, -100, 100, 100), 0.0, 600.0, b"m")
    with pytest.raises(ValueError):
        planner.deposit(request, now_s=599.0)


def test_deposit_authorization_hook(small_world):
    cell_map, table = small_world
    planner = TrustedPlanner(cell_map, H4, table, num_rps=8, authorize=lambda req: req.sender_id == b"ok")
    good = DepositRequest(Rect(-100, -100, 100, 100), 0.0, 180.0, b"m", sender_id=b"ok")
    bad = DepositRequest(Rect(-100, -100, 100, 100), 0.0, 180.0, b"m", sender_id=b"nope")
    assert planner.deposit(good, now_s=300.0).stored
    with pytest.raises(DepositRejected):
        planner.deposit(bad, now_s=300.0)


def test_deposit_expiry_follows_newest_matching_slot(small_world):
    cell_map, table = small_world
    planner = TrustedPlanner(cell_map, H4, table, num_rps=8)
    # Window spans base slots 0 and 1, deposit while both are in level 2:
    # their level-2 keys coincide, so one copy, expiring with the newer slot.
    request = DepositRequest(Rect(-100, -100, 100, 100), 0.0, 360.0, b"m")
    outcome = planner.deposit(request, now_s=35 * MIN)
    assert len(outcome.stored) == 1
    assert outcome.stored[0][1].expires_at_s == 180.0 + H4.horizon_s


def test_deposit_window_end_on_slot_boundary_excludes_next_slot(small_world):
    cell_map, table = small_world
    planner = TrustedPlanner(cell_map, H4, table, num_rps=8)
    request = DepositRequest(Rect(-100, -100, 100, 100), 0.0, 360.0, b"m")
    outcome = planner.deposit(request, now_s=400.0)
    assert {c.slot_start_s for c in outcome.candidates} == {0.0, 180.0}


# -- rendezvous points ------------------------------------------------------------


def _stored(key: crypto.Key, payload: bytes, deposited: float, expires: float) -> StoredMessage:
    region = crypto.region_id(key)
    ct = crypto.encrypt(key, payload, region.digest.bytes, nonce=b"\x00" * 12)
    return StoredMessage(region, ct, deposited, expires)


def test_poll_before_any_deposit_is_empty():
    rp = RendezvousPoint()
    region = crypto.region_id(crypto.derive_key(crypto.Seed(b"\x02" * 32), 0, 0))
    assert rp.poll(PollRequest(region), 10.0).messages == ()


def test_poll_bundles_multiple_messages_for_one_region():
    key = crypto.derive_key(crypto.Seed(b"\x03" * 32), 0, 0)
    rp = RendezvousPoint()
    rp.store(_stored(key, b"one", 0.0, 100.0))
    rp.store(_stored(key, b"two", 1.0, 100.0))
    response = rp.poll(PollRequest(crypto.region_id(key)), 50.0)
    assert len(response.messages) == 2


def test_poll_after_expiry_is_empty_and_collected():
    key = crypto.derive_key(crypto.Seed(b"\x04" * 32), 0, 0)
    rp = RendezvousPoint()
    rp.store(_stored(key, b"gone", 0.0, 100.0))
    assert rp.poll(PollRequest(crypto.region_id(key)), 100.0).messages == ()
    assert len(rp) == 0


def test_rp_state_is_geography_free():
    rp = RendezvousPoint()
    key = crypto.derive_key(crypto.Seed(b"\x05" * 32), 0, 0)
    rp.store(_stored(key, b"m", 0.0, 10.0))
    assert all(isinstance(region, crypto.RegionId) for region in rp._store)


# -- handset round trip -------------------------------------------------------------


def _world_with_ue(now_tokens):
    cell_map = make_map(3)
    clusterings = singleton_clusterings(cell_map, H4.num_levels)
    table = SeedTable.generate(cell_map, H4, clusterings, master_seed=11)
    planner = TrustedPlanner(cell_map, H4, table, num_rps=4)
    shards = [RendezvousPoint() for _ in range(4)]
    ue = UserEquipment(0)
    station = BaseStation(0, H4, table.lookup)
    for t in now_tokens:
        ue.receive_token(station.tick(t))
    return cell_map, table, planner, shards, ue


def test_ue_with_empty_trail_sends_nothing():
    ue = UserEquipment(9)
    assert ue.poll_round(100.0, H4, 4) == []


def test_ue_end_to_end_receives_and_decrypts():
    cell_map, table, planner, shards, ue = _world_with_ue([0.0, 180.0, 360.0])
    request = DepositRequest(Rect(-100, -100, 100, 100), 0.0, 360.0, b"hello there")
    outcome = planner.deposit(request, now_s=1000.0)
    for idx, msg in outcome.stored:
        shards[idx].store(msg)
    received = []
    for idx, preq in ue.poll_round(1100.0, H4, 4):
        assert crypto.rp_index(preq.region, 4) == idx
        received.extend(ue.on_response(preq.region, shards[idx].poll(preq, 1100.0)))
    assert received == [b"hello there"]
    assert ue.decrypt_failures == 0


def test_ue_does_not_refetch_already_seen_message():
    cell_map, table, planner, shards, ue = _world_with_ue([0.0])
    request = DepositRequest(Rect(-100, -100, 100, 100), 0.0, 180.0, b"once")
    for idx, msg in planner.deposit(request, now_s=500.0).stored:
        shards[idx].store(msg)

    def poll(now):
        out = []
        for idx, preq in ue.poll_round(now, H4, 4):
            out.extend(ue.on_response(preq.region, shards[idx].poll(preq, now)))
        return out

    assert poll(600.0) == [b"once"]
    assert poll(700.0) == []


def test_ue_never_in_region_receives_nothing():
    cell_map, table, planner, shards, _ = _world_with_ue([])
    elsewhere = UserEquipment(1)
    station2 = BaseStation(2, H4, table.lookup)  # cell 2, far from the target area
    for t in (0.0, 180.0, 360.0):
        elsewhere.receive_token(station2.tick(t))
    request = DepositRequest(Rect(-100, -100, 100, 100), 0.0, 360.0, b"secret")
    for idx, msg in planner.deposit(request, now_s=900.0).stored:
        shards[idx].store(msg)
    received = []
    for idx, preq in elsewhere.poll_round(1000.0, H4, 4):
        received.extend(elsewhere.on_response(preq.region, shards[idx].poll(preq, 1000.0)))
    assert received == []


def test_deposit_and_poll_agree_on_shard_and_region():
    """If the planner (at deposit time) and the handset (at poll time) evaluate
    the same level, the poll target equals the stored copy's routing exactly."""
    cell_map, table, planner, shards, ue = _world_with_ue([0.0])
    request = DepositRequest(Rect(-100, -100, 100, 100), 0.0, 180.0, b"m")
    deposit_now = 20 * MIN
    poll_now = 22 * MIN  # both instants sit in the level-1 window
    outcome = planner.deposit(request, deposit_now)
    (shard, msg), = outcome.stored
    targets = ue.poll_round(poll_now, H4, 4)
    assert (shard, PollRequest(msg.region)) in targets


def test_confidentiality_no_foreign_token_no_plaintext():
    """Handsets whose trails never contained the deposit key cannot decrypt."""
    cell_map = make_map(3)
    clusterings = singleton_clusterings(cell_map, H4.num_levels)
    table = SeedTable.generate(cell_map, H4, clusterings, master_seed=17)
    planner = TrustedPlanner(cell_map, H4, table, num_rps=4)
    shards = [RendezvousPoint() for _ in range(4)]
    request = DepositRequest(Rect(-100, -100, 100, 100), 0.0, 180.0, b"for cell 0 only")
    for idx, msg in planner.deposit(request, now_s=600.0).stored:
        shards[idx].store(msg)
    for cell in (1, 2):
        ue = UserEquipment(cell)
        station = BaseStation(cell, H4, table.lookup)
        ue.receive_token(station.tick(0.0))
        got = []
        for idx, preq in ue.poll_round(700.0, H4, 4):
            got.extend(ue.on_response(preq.region, shards[idx].poll(preq, 700.0)))
        assert got == []


# -- wire encodings -----------------------------------------------------------------


def test_deposit_request_roundtrip():
    request = DepositRequest(Rect(-1.5, 2.5, 10.0, 20.25), 30.0, 90.0, b"payload", b"sender")
    assert DepositRequest.from_bytes(request.to_bytes()) == request


def test_stored_message_roundtrip():
    key = crypto.derive_key(crypto.Seed(b"\x06" * 32), 0, 0)
    msg = _stored(key, b"wire", 5.0, 50.0)
    assert StoredMessage.from_bytes(msg.to_bytes()) == msg


def test_poll_request_and_response_roundtrip():
    key = crypto.derive_key(crypto.Seed(b"\x07" * 32), 1, 1)
    preq = PollRequest(crypto.region_id(key))
    assert PollRequest.from_bytes(preq.to_bytes()) == preq
    resp = PollResponse((_stored(key, b"a", 0.0, 9.0).ct, _stored(key, b"b", 0.0, 9.0).ct))
    assert PollResponse.from_bytes(resp.to_bytes()) == resp


def test_token_roundtrip():
    cell_map = make_map(2)
    table = SeedTable.generate(cell_map, H4, singleton_clusterings(cell_map, 4), master_seed=23)
    token = tokens.make_token(1, 990.0, H4, table.lookup)
    assert protocol.token_from_bytes(protocol.token_to_bytes(token)) == token


def test_wire_rejects_truncation_and_trailing_garbage():
    request = DepositRequest(Rect(0, 0, 1, 1), 0.0, 1.0, b"p")
    blob = request.to_bytes()
    with pytest.raises(protocol.WireError):
        DepositRequest.from_bytes(blob[:-1])
    with pytest.raises(protocol.WireError):
        DepositRequest.from_bytes(blob + b"\x00")
    with pytest.raises(protocol.WireError):
        PollRequest.from_bytes(blob)
