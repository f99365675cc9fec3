import numpy as np
import pytest

from vanetchain.digest import ZERO_DIGEST
from vanetchain.ledger import append_message_block, new_ledger, verify_chain
from vanetchain.model import DESK_ARCH, FeatureScaler, ModelWeights, init_weights
from vanetchain.pofl import (Consensus, ConsensusKind, IncidentMessage, candidate_scores, delivery_ratio,
                             disseminate, random_reputation, relay_timer)
from vanetchain.seeding import derive_rng
from vanetchain.sim import DatasetRow, SimConfig, VehicleState, pairwise_in_range, spawn_vehicles


def vehicle(i, x, y, vx=0.0, vy=0.0):
    return VehicleState(i, f"{i:064x}", np.array([x, y], dtype=float), np.array([vx, vy], dtype=float))


def msg_from(v, t=0.0):
    return IncidentMessage(t, (float(v.position[0]), float(v.position[1])), v.pseudonym)


CFG = SimConfig(area_width_m=2500.0, area_height_m=2500.0, num_vehicles=3, h_max=6)


# ---------------------------------------------------------------- timer

def test_relay_timer_examples():
    assert relay_timer(1.0) == 0.010
    assert relay_timer(0.5) == pytest.approx(2 * 0.010)
    assert relay_timer(0.8) < relay_timer(0.4)
    assert relay_timer(0.25, timer_unit=1.0) == 4.0


def test_score_below_floor_rejected():
    for bad in (0.0, 1e-4, float("nan")):
        with pytest.raises(ValueError):
            relay_timer(bad)


# ---------------------------------------------------------------- delivery ratio

def test_delivery_ratio_examples():
    vs = [vehicle(i, 0, 0) for i in range(300)]
    assert delivery_ratio(vs, range(300)) == 1.0
    assert delivery_ratio(vs, [0]) == 1 / 300
    assert delivery_ratio(vs, range(150)) == 0.5
    assert delivery_ratio([], [1]) == 0.0


# ---------------------------------------------------------------- dissemination

def test_two_candidates_higher_score_relays():
    vs = [vehicle(0, 1000, 1000), vehicle(1, 1100, 1000), vehicle(2, 900, 1000)]
    consensus = Consensus.pos({0: 50.0, 1: 40.0, 2: 80.0}, lookup_cost_s=0.0)
    metrics, blocks = disseminate(CFG, vs, msg_from(vs[0]), consensus)
    assert metrics.relays[0] == vs[2].pseudonym
    assert metrics.per_hop_delay[0] == pytest.approx(CFG.prop_delay_s + relay_timer(0.8), abs=1e-9)
    assert blocks[0].relay_pseudonym == vs[2].pseudonym and blocks[0].h == 1
    assert blocks[0].prev_hash == ZERO_DIGEST


def test_isolated_originator():
    vs = [vehicle(0, 100, 100), vehicle(1, 2000, 2000), vehicle(2, 2400, 100)]
    metrics, blocks = disseminate(CFG, vs, msg_from(vs[0]), Consensus.pos({0: 1.0, 1: 1.0, 2: 1.0}))
    assert metrics.truncated and metrics.hops == 0 and blocks == []
    assert metrics.delivery_ratio == pytest.approx(1 / 3)
    assert metrics.received == frozenset({0})


def test_equal_scores_break_ties_by_pseudonym():
    vs = [vehicle(0, 1000, 1000), vehicle(7, 1100, 1000), vehicle(3, 900, 1000)]
    vs[1].pseudonym, vs[2].pseudonym = "b" * 64, "a" * 64
    metrics, _ = disseminate(CFG, vs, msg_from(vs[0]), Consensus.pos({0: 10.0, 7: 60.0, 3: 60.0}))
    assert metrics.relays[0] == "a" * 64


def test_pos_lookup_cost_scales_with_registered_vehicles():
    vs = [vehicle(0, 1000, 1000), vehicle(1, 1100, 1000)]
    rep = {0: 50.0, 1: 50.0}
    fast, _ = disseminate(CFG, vs, msg_from(vs[0]), Consensus.pos(rep, lookup_cost_s=0.0))
    slow, _ = disseminate(CFG, vs, msg_from(vs[0]), Consensus.pos(rep, lookup_cost_s=1e-3))
    assert slow.per_hop_delay[0] - fast.per_hop_delay[0] == pytest.approx(2 * 1e-3, abs=1e-9)


def test_reputation_must_lie_in_range():
    with pytest.raises(ValueError):
        Consensus.pos({0: 101.0})
    with pytest.raises(ValueError):
        Consensus.pos({0: -0.5})
    rep = random_reputation([vehicle(i, 0, 0) for i in range(500)], np.random.default_rng(0))
    assert all(0.0 <= r <= 100.0 for r in rep.values())


def test_pofl_requires_a_model():
    vs = [vehicle(0, 1000, 1000), vehicle(1, 1100, 1000)]
    with pytest.raises(ValueError):
        disseminate(CFG, vs, msg_from(vs[0]), Consensus(ConsensusKind.pofl))


def test_unknown_originator_rejected():
    vs = [vehicle(0, 1000, 1000)]
    with pytest.raises(ValueError):
        disseminate(CFG, vs, IncidentMessage(0.0, (0.0, 0.0), "f" * 64), Consensus.pos({0: 1.0}))


def random_pofl(seed):
    rng = np.random.default_rng(seed)
    rows = [DatasetRow(float(rng.uniform(0, 250)), int(rng.choice([-1, 1])), float(rng.uniform(5, 25)),
                       int(rng.integers(1, 7)), float(rng.uniform(0, 1e-4)), int(rng.integers(0, 10)))
            for _ in range(200)]
    return Consensus.pofl(init_weights(DESK_ARCH, rng), FeatureScaler.fit(rows, 10))


@pytest.mark.parametrize("seed", range(8))
def test_every_relay_is_the_argmax_fresh_receiver(seed):
    cfg = SimConfig(area_width_m=1500.0, area_height_m=1500.0, num_vehicles=80, rng_seed=seed, prop_delay_s=0.0)
    vs = spawn_vehicles(cfg, derive_rng(seed, "spawn"))
    consensus = random_pofl(seed)
    org = vs[int(np.random.default_rng(seed).integers(len(vs)))]
    trace = []
    metrics, blocks = disseminate(cfg, vs, msg_from(org), consensus, trace=trace)
    dist, adj = pairwise_in_range(vs, cfg.tx_range_m)
    degree = adj.sum(axis=1)
    area = np.pi * cfg.tx_range_m ** 2
    index = {v.pseudonym: i for i, v in enumerate(vs)}
    sender = index[org.pseudonym]
    received, relayed = {sender}, set()
    for hop, (relay, entry) in enumerate(zip(metrics.relays, trace), start=1):
        fresh = [i for i in np.nonzero(adj[sender])[0] if i not in received]
        received.update(fresh)
        cand = [i for i in fresh if i not in relayed]
        scores = candidate_scores(consensus, vs, cand, sender, hop, dist, degree, area)
        best = max(range(len(cand)), key=lambda j: (scores[j], [-ord(c) for c in vs[cand[j]].pseudonym]))
        assert relay == vs[cand[best]].pseudonym
        assert entry[3] == pytest.approx(float(scores.max()), rel=1e-15) and entry[4] == len(cand)
        sender = index[relay]
        relayed.add(sender)
    assert metrics.received == frozenset(vs[i].id for i in received)
    # Chain invariants: one relay per vehicle, at most h_max blocks, hops counting up.
    assert len(set(metrics.relays)) == len(metrics.relays) <= cfg.h_max
    assert [b.h for b in blocks] == list(range(1, len(blocks) + 1))
    assert all(d > 0 for d in metrics.per_hop_delay) and 0 < metrics.delivery_ratio <= 1


def test_message_blocks_chain_onto_the_ledger():
    cfg = SimConfig(area_width_m=1200.0, area_height_m=1200.0, num_vehicles=60, rng_seed=1)
    vs = spawn_vehicles(cfg, derive_rng(1, "spawn"))
    ledger = new_ledger()
    for k in range(3):
        prev = ledger.message_chain[-1].block_hash if ledger.message_chain else ZERO_DIGEST
        _, blocks = disseminate(cfg, vs, msg_from(vs[k], float(k)), random_pofl(1), prev_hash=prev)
        for b in blocks:
            ledger = append_message_block(ledger, b)
    assert len(ledger.message_chain) > 3
    assert verify_chain(ledger).ok


def test_dissemination_is_deterministic():
    cfg = SimConfig(area_width_m=1200.0, area_height_m=1200.0, num_vehicles=60, rng_seed=2, msg_loss_prob=0.2)
    vs = spawn_vehicles(cfg, derive_rng(2, "spawn"))
    runs = [disseminate(cfg, vs, msg_from(vs[5]), random_pofl(2), np.random.default_rng(9)) for _ in range(2)]
    assert runs[0] == runs[1]


def test_lossy_dissemination_needs_rng():
    cfg = SimConfig(msg_loss_prob=0.1)
    vs = [vehicle(0, 1000, 1000), vehicle(1, 1100, 1000)]
    with pytest.raises(ValueError):
        disseminate(cfg, vs, msg_from(vs[0]), Consensus.pos({0: 1.0, 1: 1.0}))


def test_zero_weight_model_scores_half_everywhere():
    vs = [vehicle(0, 1000, 1000), vehicle(1, 1100, 1000), vehicle(2, 900, 1050)]
    consensus = Consensus.pofl(ModelWeights(DESK_ARCH, np.zeros(DESK_ARCH.num_params)),
                               random_pofl(0).scaler)
    metrics, _ = disseminate(CFG, vs, msg_from(vs[0]), consensus)
    assert metrics.per_hop_delay[0] == pytest.approx(CFG.prop_delay_s + relay_timer(0.5), abs=1e-9)
