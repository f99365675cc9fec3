"""Learning half of the FL loop: train, check, commit, seal, redistribute.

Every iteration each participant trains from the current global model, the
security check scores its submission, passing models become microblocks in
the producer's ledger copy, copies are exchanged with radio neighbours and
uploaded to the RSU, and the RSU seals a keyblock over everything it holds
for the iteration, averaging the sealed models into the next global model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .digest import digest_fields, pseudonym, sha256
from .guard import Detectors, GuardMode, check_models, dataset_summary, fit_isolation_forest, weight_features
from .ledger import LedgerCopy, Microblock, append_microblock, merge_ledgers, new_ledger, seal_keyblock
from .model import DESK_ARCH, FeatureScaler, ModelArch, ModelWeights, TrainConfig, fedavg, global_loss, \
    init_weights, mse, train_many
from .seeding import derive_rng, derive_seed
from .sim import SimConfig, VehicleState, move_all, pairwise_in_range


@dataclass
class RSU:
    position: np.ndarray
    pseudonym: str
    ledger: LedgerCopy = field(default_factory=new_ledger)


def make_rsu(config: SimConfig) -> RSU:
    center = np.array([config.area_width_m / 2.0, config.area_height_m / 2.0])
    return RSU(center, pseudonym(-1, sha256(b"rsu")))


@dataclass(frozen=True)
class FLSettings:
    k_max: int = 20
    samples_per_vehicle: int = 16
    arch: ModelArch = DESK_ARCH
    train: TrainConfig = TrainConfig()
    guard_mode: GuardMode = GuardMode.none
    num_trees: int = 100
    subsample_size: int = 64
    quantile: float = 0.95
    reference_models: int = 256
    gossip_rounds: int = 1
    iteration_interval_s: float = 1.0
    refit_with_passed: bool = False

    def validate(self, prefix: str = "") -> list[str]:
        findings = []
        if self.k_max < 1:
            findings.append(f"{prefix}k_max: must be >= 1")
        if self.samples_per_vehicle < 1:
            findings.append(f"{prefix}samples_per_vehicle: must be >= 1")
        if self.num_trees < 1:
            findings.append(f"{prefix}num_trees: must be >= 1")
        if self.subsample_size < 2:
            findings.append(f"{prefix}subsample_size: must be >= 2")
        if not 0.0 < self.quantile < 1.0:
            findings.append(f"{prefix}quantile: must lie in (0, 1)")
        if self.reference_models < 2:
            findings.append(f"{prefix}reference_models: must be >= 2")
        if self.gossip_rounds < 0:
            findings.append(f"{prefix}gossip_rounds: must be >= 0")
        findings += self.train.validate(prefix + "train.")
        return findings


class CentralAuthority:
    """Holds the trusted sample and calibrates the security-check detectors.

    The trusted sample is a list of clean per-vehicle chunks of
    ``samples_per_vehicle`` rows each.  The dataset detector is fitted once on
    their summaries.  The weight detector is refitted every iteration on
    reference models the authority trains itself from the current global
    model on randomly chosen trusted chunks, so it tracks how honest local
    models look at that point of training.
    """

    def __init__(self, trusted_chunks: Sequence[Sequence], scaler: FeatureScaler, settings: FLSettings,
                 seed: int):
        if len(trusted_chunks) < 2:
            raise ValueError("the trusted sample needs at least two chunks")
        self.chunks = [list(c) for c in trusted_chunks]
        self.scaler = scaler
        self.settings = settings
        self.seed = seed
        self._dataset_samples = [dataset_summary(c, scaler) for c in self.chunks]
        self._dataset_detector = None
        self._extra_weight_samples: list = []

    def dataset_detector(self):
        if self._dataset_detector is None:
            self._dataset_detector = fit_isolation_forest(
                self._dataset_samples, self.settings.num_trees, self.settings.subsample_size,
                derive_rng(self.seed, "dataset-forest"), self.settings.quantile)
        return self._dataset_detector

    def add_passed(self, summaries, weight_feats) -> None:
        if summaries:
            self._dataset_samples.extend(summaries)
            self._dataset_detector = None
        self._extra_weight_samples.extend(weight_feats)

    def weight_detector(self, global_model: ModelWeights, k: int):
        s = self.settings
        rng = derive_rng(self.seed, "reference-chunks", k)
        picks = rng.choice(len(self.chunks), size=s.reference_models, replace=len(self.chunks) < s.reference_models)
        data = [(self.scaler.features(self.chunks[j]), self.scaler.labels(self.chunks[j])) for j in picks]
        seeds = [derive_seed(self.seed, "reference-train", k, r) for r in range(s.reference_models)]
        models, _ = train_many([global_model] * s.reference_models, data, s.train, seeds)
        samples = [weight_features(m) for m in models] + list(self._extra_weight_samples)
        return fit_isolation_forest(samples, s.num_trees, s.subsample_size,
                                    derive_rng(self.seed, "weight-forest", k), s.quantile)


@dataclass(frozen=True)
class GuardRecord:
    k: int
    vehicle_pseudonym: str
    mode: str
    dataset_score: float
    weight_score: float
    verdict: str


@dataclass
class FLResult:
    history: list = field(default_factory=list)          # (k, global loss)
    guard_log: list = field(default_factory=list)
    accepted: list = field(default_factory=list)         # passing submissions per k
    sealed: list = field(default_factory=list)           # microblocks sealed per k
    global_model: ModelWeights | None = None
    rsu: RSU | None = None
    end_time: float = 0.0


def participants_of(vehicles: Sequence[VehicleState]) -> list[VehicleState]:
    return [v for v in vehicles if v.is_fl_participant and not v.is_designated]


def evaluation_loss(model: ModelWeights, parts: Sequence[VehicleState], scaler: FeatureScaler, s: int) -> float:
    """Mean over participants of the model's MSE on their true-label rows."""
    losses = [mse(model, scaler.features(v.truth[:s]), scaler.labels(v.truth[:s])) for v in parts]
    return global_loss(losses)


def _gossip(vehicles: Sequence[VehicleState], config: SimConfig, rounds: int) -> None:
    for _ in range(rounds):
        _, adj = pairwise_in_range(vehicles, config.tx_range_m)
        before = [v.ledger for v in vehicles]
        for i, v in enumerate(vehicles):
            merged = before[i]
            for j in np.nonzero(adj[i])[0]:
                merged = merge_ledgers(merged, before[j])
            v.ledger = merged


def _upload_delay(v: VehicleState, rsu: RSU, config: SimConfig) -> float:
    # One propagation delay per transmission-range hop to the RSU.
    hops = 1 + int(np.hypot(*(v.position - rsu.position)) // config.tx_range_m)
    return hops * config.prop_delay_s


def run_fl_iterations(vehicles: list[VehicleState], rsu: RSU, k_max: int, *, config: SimConfig,
                      settings: FLSettings, ca: CentralAuthority | None, seed: int,
                      initial: ModelWeights | None = None, start_time: float = 0.0) -> FLResult:
    mode = GuardMode.parse(settings.guard_mode)
    s = settings.samples_per_vehicle
    parts = participants_of(vehicles)
    if not parts:
        raise ValueError("no FL participants")
    for v in parts:
        if len(v.dataset) < s:
            raise ValueError(f"vehicle {v.id} holds {len(v.dataset)} rows, {s} required")
    if ca is None and mode is not GuardMode.none:
        raise ValueError(f"guard mode {mode.value} needs a central authority")
    scaler = ca.scaler if ca is not None else FeatureScaler.fit([r for v in parts for r in v.dataset[:s]])
    for v in vehicles:
        if v.ledger is None:
            v.ledger = rsu.ledger
    global_model = initial if initial is not None else init_weights(settings.arch, derive_rng(seed, "init"))
    train_data = [(scaler.features(v.dataset[:s]), scaler.labels(v.dataset[:s])) for v in parts]
    shared = [v.shared_dataset if v.shared_dataset is not None else v.dataset for v in parts]
    summaries = [dataset_summary(rows[:s], scaler) for rows in shared]
    result = FLResult(rsu=rsu)
    t = start_time
    for k in range(1, k_max + 1):
        seeds = [derive_seed(seed, "train", k, v.id) for v in parts]
        models, _ = train_many([global_model] * len(parts), train_data, settings.train, seeds)
        detectors = Detectors()
        if mode in (GuardMode.dataset, GuardMode.both):
            detectors = Detectors(dataset=ca.dataset_detector())
        if mode in (GuardMode.weights, GuardMode.both):
            detectors = Detectors(detectors.dataset, ca.weight_detector(global_model, k))
        payloads = {}
        passed_summaries, passed_feats = [], []
        verdicts = check_models(summaries, models, mode, detectors)
        for v, m, summary, verdict in zip(parts, models, summaries, verdicts):
            result.guard_log.append(GuardRecord(k, v.pseudonym, mode.value, verdict.dataset_score,
                                                verdict.weight_score, "pass" if verdict.passed else "fail"))
            if not verdict.passed:
                continue
            payload = digest_fields(m.digest(), summary.astype("<f8").tobytes())
            mb = Microblock.create(v.ledger.latest.block_hash, payload, v.pseudonym, k,
                                   t + _upload_delay(v, rsu, config))
            v.ledger = append_microblock(v.ledger, mb, True)
            payloads[mb.block_hash] = m
            if settings.refit_with_passed:
                passed_summaries.append(summary)
                passed_feats.append(weight_features(m))
        result.accepted.append(len(payloads))
        _gossip(vehicles, config, settings.gossip_rounds)
        for v in parts:
            rsu.ledger = merge_ledgers(rsu.ledger, v.ledger)
        anchored = [mb for mb in rsu.ledger.anchored_to(rsu.ledger.latest.block_hash) if mb.k == k]
        if anchored:
            chosen = sorted(anchored, key=lambda mb: (mb.timestamp, mb.producer_pseudonym, mb.block_hash))
            global_model = fedavg([payloads[mb.block_hash] for mb in chosen])
            rsu.ledger, _ = seal_keyblock(rsu.ledger, global_model, len(chosen))
        result.sealed.append(len(anchored))
        for v in vehicles:
            v.ledger = merge_ledgers(v.ledger, rsu.ledger)
        if settings.refit_with_passed and ca is not None:
            ca.add_passed(passed_summaries, passed_feats)
        result.history.append((k, evaluation_loss(global_model, parts, scaler, s)))
        move_all(vehicles, settings.iteration_interval_s, config)
        t += settings.iteration_interval_s
    result.global_model = global_model
    result.end_time = t
    return result
