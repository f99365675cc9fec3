"""Timer-based relay election for incident messages (PoFL and a PoS baseline).

Each hop, every vehicle that hears the message for the first time starts a
timer inversely proportional to its score.  The first timer to fire wins the
hop: it appends a message block and rebroadcasts, and everyone else cancels.
Under PoFL the score is the global model's prediction from the candidate's
own features; under PoS it is reputation/100, and every election is charged
a reputation-lookup cost that grows with the number of registered vehicles.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .digest import ZERO_DIGEST
from .ledger import MessageBlock
from .model import SCORE_FLOOR, FeatureScaler, ModelWeights, predict_scores
from .sim import Event, EventKind, EventQueue, SimConfig, VehicleState, direction_flag, \
    pairwise_in_range, to_ns

DEFAULT_TIMER_UNIT_S = 0.010
DEFAULT_LOOKUP_COST_S = 1e-4


def relay_timer(score: float, timer_unit: float = DEFAULT_TIMER_UNIT_S) -> float:
    if not score >= SCORE_FLOOR:
        raise ValueError(f"score {score!r} is below the floor {SCORE_FLOOR}")
    return timer_unit / score


class ConsensusKind(str, enum.Enum):
    pofl = "pofl"
    pos = "pos"


@dataclass(frozen=True)
class Consensus:
    kind: ConsensusKind
    model: ModelWeights | None = None
    scaler: FeatureScaler | None = None
    reputation: Mapping[int, float] | None = None
    lookup_cost_s: float = DEFAULT_LOOKUP_COST_S

    @classmethod
    def pofl(cls, model: ModelWeights, scaler: FeatureScaler) -> "Consensus":
        return cls(ConsensusKind.pofl, model=model, scaler=scaler)

    @classmethod
    def pos(cls, reputation: Mapping[int, float], lookup_cost_s: float = DEFAULT_LOOKUP_COST_S) -> "Consensus":
        for vid, rep in reputation.items():
            if not 0.0 <= rep <= 100.0:
                raise ValueError(f"reputation of vehicle {vid} outside [0, 100]")
        return cls(ConsensusKind.pos, reputation=dict(reputation), lookup_cost_s=lookup_cost_s)


def random_reputation(vehicles: Sequence[VehicleState], rng: np.random.Generator) -> dict[int, float]:
    values = rng.uniform(0.0, 100.0, len(vehicles))
    return {v.id: float(r) for v, r in zip(vehicles, values)}


@dataclass(frozen=True)
class IncidentMessage:
    origin_time: float
    origin_position: tuple
    org_pseudonym: str
    h: int = 0


@dataclass
class DisseminationMetrics:
    delivery_ratio: float
    per_hop_delay: list = field(default_factory=list)
    relays: list = field(default_factory=list)
    truncated: bool = False
    received: frozenset = frozenset()

    @property
    def hops(self) -> int:
        return len(self.relays)

    @property
    def mean_hop_delay(self) -> float:
        return math.fsum(self.per_hop_delay) / len(self.per_hop_delay) if self.per_hop_delay else float("nan")


def delivery_ratio(vehicles: Sequence[VehicleState], received) -> float:
    if not vehicles:
        return 0.0
    ids = {v.id for v in vehicles}
    return len(ids & set(received)) / len(ids)


def candidate_features(vehicles, cand: Sequence[int], sender: int, hop: int, dist, degree,
                       area: float) -> np.ndarray:
    rows = []
    sender_pos = vehicles[sender].position
    for i in cand:
        v = vehicles[i]
        rows.append((float(dist[i, sender]), float(direction_flag(v, sender_pos)), v.speed, float(hop),
                     float(degree[i]) / area))
    return np.array(rows, dtype=float).reshape(-1, 5)


def candidate_scores(consensus: Consensus, vehicles, cand, sender, hop, dist, degree, area) -> np.ndarray:
    if consensus.kind is ConsensusKind.pofl:
        if consensus.model is None or consensus.scaler is None:
            raise ValueError("PoFL needs a global model and its feature scaler")
        feats = candidate_features(vehicles, cand, sender, hop, dist, degree, area)
        return predict_scores(consensus.model, consensus.scaler.transform_raw(feats))
    rep = consensus.reputation or {}
    return np.array([max(rep.get(vehicles[i].id, 0.0) / 100.0, SCORE_FLOOR) for i in cand])


def disseminate(config: SimConfig, vehicles: Sequence[VehicleState], msg: IncidentMessage,
                consensus: Consensus, rng: np.random.Generator | None = None, *,
                timer_unit: float = DEFAULT_TIMER_UNIT_S, prev_hash: bytes = ZERO_DIGEST,
                trace: list | None = None) -> tuple[DisseminationMetrics, list[MessageBlock]]:
    """Spread ``msg`` from its originator for up to ``h_max`` hops.

    Returns the metrics and the message blocks appended by the relays, in
    hop order, chained onto ``prev_hash``.  Positions are frozen for the
    duration of the message (well under a second).
    """
    by_pseudonym = {v.pseudonym: i for i, v in enumerate(vehicles)}
    if msg.org_pseudonym not in by_pseudonym:
        raise ValueError("originator is not among the vehicles")
    org = by_pseudonym[msg.org_pseudonym]
    dist, adj = pairwise_in_range(vehicles, config.tx_range_m)
    degree = adj.sum(axis=1)
    area = math.pi * config.tx_range_m ** 2
    prop_ns = to_ns(config.prop_delay_s)
    lookup_ns = to_ns(consensus.lookup_cost_s * len(vehicles)) if consensus.kind is ConsensusKind.pos else 0
    loss = config.msg_loss_prob
    if loss > 0 and rng is None:
        raise ValueError("a random generator is required when msg_loss_prob > 0")

    received = {org}
    relayed = set()
    metrics = DisseminationMetrics(0.0)
    blocks: list[MessageBlock] = []
    sender = org
    now = to_ns(msg.origin_time)
    hop = msg.h
    while hop < config.h_max:
        hop += 1
        fresh = [i for i in np.nonzero(adj[sender])[0].tolist() if i not in received]
        if loss > 0 and fresh:
            keep = rng.random(len(fresh)) >= loss
            fresh = [i for i, k in zip(fresh, keep) if k]
        received.update(fresh)
        cand = [i for i in fresh if i not in relayed]
        if not cand:
            metrics.truncated = True
            break
        scores = candidate_scores(consensus, vehicles, cand, sender, hop, dist, degree, area)
        queue = EventQueue()
        arrive = now + prop_ns
        for i, s in zip(cand, scores):
            queue.push(Event(arrive + lookup_ns + to_ns(relay_timer(float(s), timer_unit)), EventKind.TimerExpire,
                             vehicles[i].id, {"me": i, "score": float(s)}), order=vehicles[i].pseudonym)
        winner_ev = queue.pop()
        if trace is not None:
            trace.append((winner_ev.time_ns, hop, vehicles[winner_ev.payload["me"]].pseudonym,
                          winner_ev.payload["score"], len(cand)))
        winner = winner_ev.payload["me"]
        relayed.add(winner)
        metrics.per_hop_delay.append((winner_ev.time_ns - now) / 1e9)
        metrics.relays.append(vehicles[winner].pseudonym)
        prev = blocks[-1].block_hash if blocks else prev_hash
        blocks.append(MessageBlock.create(prev, msg.origin_time, msg.origin_position,
                                          vehicles[winner].pseudonym, hop))
        now = winner_ev.time_ns
        sender = winner
    metrics.received = frozenset(vehicles[i].id for i in received)
    metrics.delivery_ratio = delivery_ratio(vehicles, metrics.received)
    return metrics, blocks
