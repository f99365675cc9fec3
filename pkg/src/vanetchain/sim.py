"""Discrete-event vehicular network: geometry, mobility, radio, Hello protocol.

The radio is a unit disk (inclusive boundary) with independent Bernoulli loss
and a constant per-hop propagation delay.  Vehicles move in straight lines
and reflect off the area boundary.  Event times are integer nanoseconds so
traces are bit-reproducible and ties are well defined.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import heapq
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .digest import pseudonym, sha256

KMH = 1.0 / 3.6


@dataclass(frozen=True)
class SimConfig:
    area_width_m: float = 2500.0
    area_height_m: float = 2500.0
    num_vehicles: int = 100
    tx_range_m: float = 250.0
    mean_speed_mps: float = 50.0 * KMH
    sim_duration_s: float = 300.0
    h_max: int = 6
    wait_max_s: float = 0.1
    msg_loss_prob: float = 0.0
    rng_seed: int = 0
    num_designated: int = 5
    prop_delay_s: float = 1e-3
    hello_interval_s: float = 1.0
    speed_spread: float = 0.5

    def validate(self, prefix: str = "") -> list[str]:
        findings = []
        for name in ("area_width_m", "area_height_m", "tx_range_m", "sim_duration_s",
                     "wait_max_s", "hello_interval_s"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                findings.append(f"{prefix}{name}: must be strictly positive (got {value!r})")
        if not (self.prop_delay_s >= 0 and math.isfinite(self.prop_delay_s)):
            findings.append(f"{prefix}prop_delay_s: must be non-negative")
        if not (self.mean_speed_mps >= 0 and math.isfinite(self.mean_speed_mps)):
            findings.append(f"{prefix}mean_speed_mps: must be non-negative")
        if not (0.0 <= self.speed_spread <= 1.0):
            findings.append(f"{prefix}speed_spread: must lie in [0, 1]")
        if int(self.h_max) != self.h_max or self.h_max < 1:
            findings.append(f"{prefix}h_max: must be an integer >= 1 (got {self.h_max!r})")
        if not (0.0 <= self.msg_loss_prob <= 1.0):
            findings.append(f"{prefix}msg_loss_prob: must lie in [0, 1] (got {self.msg_loss_prob!r})")
        if int(self.num_vehicles) != self.num_vehicles or self.num_vehicles < 1:
            findings.append(f"{prefix}num_vehicles: must be an integer >= 1")
        if self.num_designated < 1 or self.num_designated > self.num_vehicles:
            findings.append(f"{prefix}num_designated: must lie in [1, num_vehicles]")
        if not (0 <= int(self.rng_seed) < 2**64):
            findings.append(f"{prefix}rng_seed: must be a 64-bit unsigned integer")
        return findings

    @classmethod
    def from_mapping(cls, values: dict) -> "SimConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise KeyError(f"unknown SimConfig keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            default = known[key].default
            kwargs[key] = type(default)(raw) if not isinstance(default, bool) else bool(raw)
        return cls(**kwargs)


def parse_key_value(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def load_sim_config(path) -> SimConfig:
    """Read a SimConfig from ``key=value`` text, JSON or YAML (by suffix)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        values = json.loads(text)
    elif path.suffix in (".yaml", ".yml"):
        import yaml
        values = yaml.safe_load(text) or {}
    else:
        values = parse_key_value(text)
    return SimConfig.from_mapping(values)


@dataclass(frozen=True)
class DatasetRow:
    d_is: float
    dir_is: int
    v_i: float
    h: int
    gamma_i: float
    n_a: int

    def features(self) -> tuple[float, float, float, float, float]:
        return (self.d_is, float(self.dir_is), self.v_i, float(self.h), self.gamma_i)


ROW_FIELDS = ("d_is", "dir_is", "v_i", "h", "gamma_i", "n_a")
FEATURE_NAMES = ROW_FIELDS[:5]


def write_dataset_csv(rows: Iterable[DatasetRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROW_FIELDS)
        for r in rows:
            writer.writerow([repr(float(r.d_is)), int(r.dir_is), repr(float(r.v_i)), int(r.h),
                             repr(float(r.gamma_i)), int(r.n_a)])


def read_dataset_csv(path) -> list[DatasetRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [DatasetRow(float(r["d_is"]), int(r["dir_is"]), float(r["v_i"]), int(r["h"]),
                           float(r["gamma_i"]), int(r["n_a"])) for r in reader]


@dataclass(eq=False)
class VehicleState:
    id: int
    pseudonym: str
    position: np.ndarray
    velocity: np.ndarray
    is_designated: bool = False
    is_fl_participant: bool = True
    is_malicious: bool = False
    is_selfish: bool = False
    dataset: list = field(default_factory=list)
    # Oracle copy of each row with every first-time receiver counted.
    # Used only to score models, never for training.
    truth: list = field(default_factory=list)
    # Dataset shown to the security check when it differs from the one
    # trained on (a malicious vehicle shares its clean copy).
    shared_dataset: list | None = None
    ledger: object = None

    @property
    def speed(self) -> float:
        return float(math.hypot(self.velocity[0], self.velocity[1]))


def _fold(x: float, length: float) -> tuple[float, int]:
    k = math.floor(x / length)
    r = x - k * length
    if k % 2 == 0:
        return r, 1
    return length - r, -1


def step_mobility(state: VehicleState, dt: float, area: tuple[float, float]) -> VehicleState:
    """Straight-line motion for ``dt`` seconds with reflection at the area walls."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    width, height = area
    new_pos = np.empty(2)
    new_vel = np.array(state.velocity, dtype=float)
    for axis, length in ((0, width), (1, height)):
        x = float(state.position[axis]) + float(state.velocity[axis]) * dt
        new_pos[axis], sign = _fold(x, length)
        new_vel[axis] *= sign
    return dataclasses.replace(state, position=new_pos, velocity=new_vel)


def move_all(vehicles: list[VehicleState], dt: float, config: SimConfig) -> list[VehicleState]:
    area = (config.area_width_m, config.area_height_m)
    for i, v in enumerate(vehicles):
        moved = step_mobility(v, dt, area)
        v.position, v.velocity = moved.position, moved.velocity
    return vehicles


def _position_of(center) -> np.ndarray:
    return np.asarray(center.position if isinstance(center, VehicleState) else center, dtype=float)


def neighbors(center, vehicles: Sequence[VehicleState], r: float) -> list[VehicleState]:
    """Vehicles within Euclidean distance ``r`` (inclusive) of ``center``.

    ``center`` may be a point or a VehicleState; a vehicle is never its own
    neighbor.
    """
    if not r > 0:
        raise ValueError("range must be positive")
    if not vehicles:
        return []
    c = _position_of(center)
    own = center.id if isinstance(center, VehicleState) else None
    pos = np.array([v.position for v in vehicles], dtype=float)
    dist = np.hypot(pos[:, 0] - c[0], pos[:, 1] - c[1])
    return [v for v, d in zip(vehicles, dist) if d <= r and v.id != own]


def estimate_density(center: VehicleState, vehicles: Sequence[VehicleState], r: float) -> float:
    return len(neighbors(center, vehicles, r)) / (math.pi * r * r)


def spawn_vehicles(config: SimConfig, rng: np.random.Generator) -> list[VehicleState]:
    n = int(config.num_vehicles)
    xs = rng.uniform(0.0, config.area_width_m, n)
    ys = rng.uniform(0.0, config.area_height_m, n)
    heading = rng.uniform(0.0, 2 * math.pi, n)
    lo = config.mean_speed_mps * (1.0 - config.speed_spread)
    hi = config.mean_speed_mps * (1.0 + config.speed_spread)
    speed = rng.uniform(lo, hi, n)
    designated = set(rng.permutation(n)[: config.num_designated].tolist())
    salt = sha256(b"pseudonym-salt" + int(config.rng_seed).to_bytes(8, "big"))
    vehicles = []
    for i in range(n):
        vehicles.append(VehicleState(
            id=i,
            pseudonym=pseudonym(i, salt),
            position=np.array([xs[i], ys[i]]),
            velocity=np.array([speed[i] * math.cos(heading[i]), speed[i] * math.sin(heading[i])]),
            is_designated=i in designated,
            is_fl_participant=i not in designated,
        ))
    return vehicles


# --------------------------------------------------------------------------
# event engine


class EventKind(enum.IntEnum):
    HelloOriginate = 0
    HelloForward = 1
    AckDeliver = 2
    TimerExpire = 3
    BlockAnnounce = 4
    RsuSync = 5
    IncidentOriginate = 6


def to_ns(seconds: float) -> int:
    return int(round(seconds * 1e9))


@dataclass(frozen=True)
class Event:
    time_ns: int
    kind: EventKind
    vehicle: int
    payload: dict = field(default_factory=dict, compare=False)

    @property
    def time(self) -> float:
        return self.time_ns / 1e9


class EventQueue:
    """Min-heap ordered by (time, kind rank, tie key, insertion order).

    The tie key defaults to the zero-padded vehicle id; callers that need a
    different tie rule (lowest pseudonym wins) pass ``order``.
    """

    def __init__(self):
        self._heap = []
        self._seq = itertools.count()

    def push(self, event: Event, order: str | None = None) -> None:
        key = order if order is not None else f"{event.vehicle:020d}"
        heapq.heappush(self._heap, (event.time_ns, int(event.kind), key, next(self._seq), event))

    def pop(self) -> Event:
        return heapq.heappop(self._heap)[-1]

    def __len__(self) -> int:
        return len(self._heap)


def pairwise_in_range(vehicles: Sequence[VehicleState], r: float) -> tuple[np.ndarray, np.ndarray]:
    pos = np.array([v.position for v in vehicles], dtype=float)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    adj = dist <= r
    np.fill_diagonal(adj, False)
    return dist, adj


def direction_flag(vehicle: VehicleState, sender_pos) -> int:
    to_sender = np.asarray(sender_pos, dtype=float) - vehicle.position
    return 1 if float(np.dot(vehicle.velocity, to_sender)) >= 0.0 else -1


def run_hello_round(config: SimConfig, vehicles: list[VehicleState], rng: np.random.Generator, *,
                    start_time: float = 0.0, target_rows: int | None = None,
                    trace: list | None = None) -> list[VehicleState]:
    """One Hello packet from every designated vehicle, forwarded up to ``h_max`` hops.

    Receivers that still collect data start a Uniform[0, wait_max] timer; the
    first to expire forwards, and the hop's other timers are cancelled.  The
    forwarder's row is labelled with the acknowledgments it gets back from
    first-time receivers; selfish receivers never acknowledge.
    """
    if not any(v.is_designated for v in vehicles):
        raise ValueError("at least one designated vehicle is required")
    n = len(vehicles)
    index = {v.id: i for i, v in enumerate(vehicles)}
    dist, adj = pairwise_in_range(vehicles, config.tx_range_m)
    degree = adj.sum(axis=1)
    area = math.pi * config.tx_range_m ** 2
    prop_ns = to_ns(config.prop_delay_s)
    loss = config.msg_loss_prob
    by_id = sorted(range(n), key=lambda i: vehicles[i].id)

    def collecting(i: int) -> bool:
        v = vehicles[i]
        if v.is_designated or not v.is_fl_participant:
            return False
        return target_rows is None or len(v.dataset) < target_rows

    def receive(sender: int) -> list[int]:
        cand = [i for i in by_id if adj[sender, i]]
        if loss > 0 and cand:
            keep = rng.random(len(cand)) >= loss
            cand = [i for i, k in zip(cand, keep) if k]
        return cand

    t0 = to_ns(start_time)
    origins = [i for i in by_id if vehicles[i].is_designated]
    for packet, origin in enumerate(origins):
        queue = EventQueue()
        heard = {origin}
        forwarded = set()
        won_hops = set()
        pending = {}
        queue.push(Event(t0, EventKind.HelloOriginate, vehicles[origin].id,
                         {"packet": packet, "hop": 0, "sender": origin}))
        while queue:
            ev = queue.pop()
            if trace is not None:
                trace.append((ev.time_ns, ev.kind.name, ev.vehicle, packet, ev.payload.get("hop")))
            if ev.kind in (EventKind.HelloOriginate, EventKind.HelloForward):
                sender = ev.payload["sender"]
                hop = ev.payload["hop"]
                fresh = [i for i in receive(sender) if i not in heard]
                heard.update(fresh)
                if ev.kind == EventKind.HelloForward:
                    row = pending[sender]
                    row["truth"] = len(fresh)
                    ackers = [i for i in fresh if not vehicles[i].is_selfish]
                    if loss > 0 and ackers:
                        keep = rng.random(len(ackers)) >= loss
                        ackers = [i for i, k in zip(ackers, keep) if k]
                    for i in ackers:
                        queue.push(Event(ev.time_ns + prop_ns, EventKind.AckDeliver, vehicles[sender].id,
                                         {"from": vehicles[i].id, "to": sender, "hop": hop}))
                if hop >= config.h_max:
                    continue
                for i in fresh:
                    if collecting(i) and i not in forwarded:
                        wait = to_ns(rng.uniform(0.0, config.wait_max_s))
                        queue.push(Event(ev.time_ns + prop_ns + wait, EventKind.TimerExpire, vehicles[i].id,
                                         {"hop": hop + 1, "sender": sender, "me": i}))
            elif ev.kind == EventKind.TimerExpire:
                hop = ev.payload["hop"]
                me = ev.payload["me"]
                if hop in won_hops or me in forwarded:
                    continue
                won_hops.add(hop)
                forwarded.add(me)
                sender = ev.payload["sender"]
                v = vehicles[me]
                pending[me] = {
                    "d_is": float(dist[me, sender]),
                    "dir_is": direction_flag(v, vehicles[sender].position),
                    "v_i": v.speed,
                    "h": hop,
                    "gamma_i": float(degree[me]) / area,
                    "n_a": 0,
                    "order": len(pending),
                }
                queue.push(Event(ev.time_ns, EventKind.HelloForward, v.id, {"hop": hop, "sender": me}))
            elif ev.kind == EventKind.AckDeliver:
                pending[ev.payload["to"]]["n_a"] += 1
        for i, row in sorted(pending.items(), key=lambda kv: kv[1]["order"]):
            values = {k: row[k] for k in ("d_is", "dir_is", "v_i", "h", "gamma_i")}
            vehicles[i].dataset.append(DatasetRow(n_a=row["n_a"], **values))
            vehicles[i].truth.append(DatasetRow(n_a=row["truth"], **values))
    return vehicles


def collect_datasets(config: SimConfig, vehicles: list[VehicleState], rng: np.random.Generator,
                     target_rows: int, *, start_time: float = 0.0,
                     trace: list | None = None) -> float:
    """Run Hello rounds until every FL participant holds ``target_rows`` rows.

    Stops early at ``sim_duration_s``.  Returns the simulation time reached.
    """
    t = start_time
    end = start_time + config.sim_duration_s

    def unfinished():
        return any(v.is_fl_participant and not v.is_designated and len(v.dataset) < target_rows
                   for v in vehicles)

    while t < end and unfinished():
        run_hello_round(config, vehicles, rng, start_time=t, target_rows=target_rows, trace=trace)
        move_all(vehicles, config.hello_interval_s, config)
        t += config.hello_interval_s
    return t
