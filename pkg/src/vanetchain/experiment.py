"""Seeded end-to-end experiments and their CSV reports.

A repetition builds a world (trusted reference collection, real collection
with adversaries, poisoning), runs the FL loop under a guard mode, then
spreads incident messages with the resulting global model (or the PoS
baseline).  Reports are plain CSV, each preceded by one ``#`` comment line
with the spec digest and the seeds, so any file can be traced back to the
spec that produced it.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import json
import logging
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .capacity import PER_KM2, REFERENCE_ROWS, CapacityParams, closed_form, monte_carlo_capacity
from .econ import GameParams, sweep
from .federation import CentralAuthority, FLResult, FLSettings, make_rsu, run_fl_iterations
from .guard import AdversaryConfig, GuardMode, LabelAttack, assign_adversaries, poison_dataset
from .ledger import append_message_block, save_ledger, verify_chain
from .model import FeatureScaler, ModelArch, TrainConfig
from .pofl import DEFAULT_LOOKUP_COST_S, DEFAULT_TIMER_UNIT_S, Consensus, ConsensusKind, \
    DisseminationMetrics, IncidentMessage, disseminate, random_reputation
from .seeding import derive_rng, derive_seed
from .sim import SimConfig, VehicleState, collect_datasets, move_all, spawn_vehicles

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# world construction


@dataclass
class World:
    config: SimConfig
    vehicles: list
    scaler: FeatureScaler
    trusted_chunks: list
    seed: int
    collect_end: float
    label_scale: float


def clone_vehicles(vehicles: Sequence[VehicleState]) -> list[VehicleState]:
    return [dataclasses.replace(v, position=v.position.copy(), velocity=v.velocity.copy(),
                                dataset=list(v.dataset), truth=list(v.truth),
                                shared_dataset=None if v.shared_dataset is None else list(v.shared_dataset))
            for v in vehicles]


def trusted_sample(config: SimConfig, samples_per_vehicle: int, seed: int, multiplier: int = 8):
    """Clean reference collection run by the central authority.

    An adversary-free copy of the network (own layout) collects
    ``multiplier`` times the per-vehicle sample size; each vehicle's rows
    are cut into chunks of ``samples_per_vehicle`` rows.
    """
    vehicles = spawn_vehicles(config, derive_rng(seed, "trusted", "spawn"))
    collect_datasets(config, vehicles, derive_rng(seed, "trusted", "hello"),
                     samples_per_vehicle * multiplier)
    chunks = []
    for v in vehicles:
        rows = v.dataset
        for start in range(0, len(rows) - samples_per_vehicle + 1, samples_per_vehicle):
            chunks.append(rows[start:start + samples_per_vehicle])
    return chunks


def build_world(config: SimConfig, adversary: AdversaryConfig, samples_per_vehicle: int, seed: int, *,
                trusted_multiplier: int = 8, trusted_chunks=None) -> World:
    config = dataclasses.replace(config, rng_seed=int(seed))
    s = samples_per_vehicle
    if trusted_chunks is None:
        trusted_chunks = trusted_sample(config, s, seed, trusted_multiplier)
    if len(trusted_chunks) < 2:
        raise RuntimeError("trusted collection produced fewer than two reference chunks")
    vehicles = spawn_vehicles(config, derive_rng(seed, "spawn"))
    assign_adversaries(vehicles, adversary, derive_rng(seed, "adversary"))
    end = collect_datasets(config, vehicles, derive_rng(seed, "hello"), s)
    for v in vehicles:
        # Vehicles that never gathered a full sample sit the FL rounds out.
        if v.is_fl_participant and len(v.dataset) < s:
            v.is_fl_participant = False
        del v.dataset[s:]
        del v.truth[s:]
    observed = [r.n_a for v in vehicles for r in v.dataset]
    observed += [r.n_a for c in trusted_chunks for r in c]
    label_scale = float(max(max(observed, default=1), 1))
    scaler = FeatureScaler.fit([r for c in trusted_chunks for r in c], label_scale)
    for v in vehicles:
        if v.is_malicious and v.is_fl_participant:
            v.shared_dataset = list(v.dataset)
            v.dataset = poison_dataset(v.dataset, adversary.poison_strength, derive_rng(seed, "poison", v.id),
                                       adversary.label_attack, int(label_scale))
    return World(config, vehicles, scaler, trusted_chunks, int(seed), end, label_scale)


def run_federation(world: World, settings: FLSettings, guard_mode, seed: int | None = None):
    seed = world.seed if seed is None else seed
    vehicles = clone_vehicles(world.vehicles)
    settings = dataclasses.replace(settings, guard_mode=GuardMode.parse(guard_mode))
    ca = CentralAuthority(world.trusted_chunks, world.scaler, settings, derive_seed(seed, "authority"))
    rsu = make_rsu(world.config)
    result = run_fl_iterations(vehicles, rsu, settings.k_max, config=world.config, settings=settings,
                               ca=ca, seed=derive_seed(seed, "fl"), start_time=world.collect_end)
    return result, vehicles


def run_incidents(config: SimConfig, vehicles: list[VehicleState], consensus: Consensus, seed: int,
                  count: int, *, timer_unit: float = DEFAULT_TIMER_UNIT_S, interval_s: float = 1.0,
                  start_time: float = 0.0, rsu=None) -> list[DisseminationMetrics]:
    """``count`` incidents from random originators, vehicles moving between them."""
    rng = derive_rng(seed, "incidents")
    loss_rng = derive_rng(seed, "incident-loss")
    out = []
    t = start_time
    for _ in range(count):
        org = vehicles[int(rng.integers(len(vehicles)))]
        msg = IncidentMessage(t, (float(org.position[0]), float(org.position[1])), org.pseudonym)
        prev = rsu.ledger.message_chain[-1].block_hash if rsu is not None and rsu.ledger.message_chain \
            else bytes(32)
        metrics, blocks = disseminate(config, vehicles, msg, consensus, loss_rng, timer_unit=timer_unit,
                                      prev_hash=prev)
        if rsu is not None:
            for b in blocks:
                rsu.ledger = append_message_block(rsu.ledger, b)
        out.append(metrics)
        move_all(vehicles, interval_s, config)
        t += interval_s
    return out


# --------------------------------------------------------------------------
# spec


@dataclass(frozen=True)
class DisseminationSettings:
    incidents: int = 10
    timer_unit_s: float = DEFAULT_TIMER_UNIT_S
    lookup_cost_s: float = DEFAULT_LOOKUP_COST_S
    interval_s: float = 1.0


@dataclass(frozen=True)
class CapacitySettings:
    ts: float = 10.0
    runs: int = 10_000
    density_scale: float = PER_KM2


@dataclass(frozen=True)
class EconSettings:
    n: int = 200
    n_rly: int = 1
    alpha: float = 1.0
    size: float = 8000.0
    betas: tuple = (0.9e7, 1.8e7)
    incentives: tuple = tuple(float(x) for x in range(1, 31))


GRID_KEYS = ("num_vehicles", "malicious_fraction", "selfish_fraction", "guard_mode", "consensus")


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: str = "default"
    sim: SimConfig = SimConfig()
    train: TrainConfig = TrainConfig()
    fl: FLSettings = FLSettings(k_max=100, samples_per_vehicle=8000)
    adversary: AdversaryConfig = AdversaryConfig()
    guard_mode: GuardMode = GuardMode.both
    consensus: ConsensusKind = ConsensusKind.pofl
    k_max: int = 100
    repetitions: int = 1
    seeds: tuple = ()
    output_dir: str = "results"
    base_seed: int = 0
    grid: dict = field(default_factory=dict)
    dissemination: DisseminationSettings = DisseminationSettings()
    capacity: CapacitySettings = CapacitySettings()
    econ: EconSettings = EconSettings()
    trusted_multiplier: int = 8

    def resolved_seeds(self) -> list[int]:
        if self.seeds:
            return [int(s) for s in self.seeds]
        return [derive_seed(self.base_seed, "repetition", r) for r in range(self.repetitions)]

    def fl_settings(self) -> FLSettings:
        return dataclasses.replace(self.fl, k_max=self.k_max, train=self.train, guard_mode=self.guard_mode)

    def cells(self) -> list[dict]:
        axes = []
        for key in GRID_KEYS:
            values = self.grid.get(key)
            if values is None:
                values = [self._default(key)]
            axes.append([(key, v) for v in values])
        return [dict(c) for c in itertools.product(*axes)]

    def _default(self, key):
        return {"num_vehicles": self.sim.num_vehicles,
                "malicious_fraction": self.adversary.malicious_fraction,
                "selfish_fraction": self.adversary.selfish_fraction,
                "guard_mode": self.guard_mode,
                "consensus": self.consensus}[key]

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(spec_to_dict(self)).encode("utf-8")).hexdigest()


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (GuardMode, ConsensusKind, LabelAttack)):
        return value.value
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def spec_to_dict(spec: ExperimentSpec) -> dict:
    return _plain(spec)


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def _build(cls, values: dict | None, path: str, **overrides):
    values = dict(values or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"{path}: unknown keys {unknown}")
    values.update(overrides)
    return cls(**values)


def spec_from_dict(data: dict) -> ExperimentSpec:
    data = dict(data)
    known = {f.name for f in dataclasses.fields(ExperimentSpec)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown top-level keys {unknown}")
    kwargs = {}
    for key in ("scenario", "k_max", "repetitions", "output_dir", "base_seed", "trusted_multiplier"):
        if key in data:
            kwargs[key] = data[key]
    if "seeds" in data:
        kwargs["seeds"] = tuple(int(s) for s in data["seeds"] or ())
    if "sim" in data:
        kwargs["sim"] = SimConfig.from_mapping(data["sim"] or {})
    if "train" in data:
        kwargs["train"] = _build(TrainConfig, data["train"], "train")
    if "fl" in data:
        fl = dict(data["fl"] or {})
        arch = {k: fl.pop(k) for k in ("hidden_layers", "hidden_width") if k in fl}
        overrides = {"arch": ModelArch(hidden_layers=arch.get("hidden_layers", 2),
                                       hidden_width=arch.get("hidden_width", 16))}
        kwargs["fl"] = _build(FLSettings, fl, "fl", **overrides)
    if "adversary" in data:
        kwargs["adversary"] = _build(AdversaryConfig, data["adversary"], "adversary")
    if "guard_mode" in data:
        kwargs["guard_mode"] = GuardMode.parse(data["guard_mode"])
    if "consensus" in data:
        kwargs["consensus"] = ConsensusKind(str(data["consensus"]).lower())
    if "grid" in data:
        grid = {}
        for key, values in (data["grid"] or {}).items():
            if key not in GRID_KEYS:
                raise ValueError(f"grid: unknown axis {key!r}")
            if key == "guard_mode":
                values = [GuardMode.parse(v) for v in values]
            elif key == "consensus":
                values = [ConsensusKind(str(v).lower()) for v in values]
            grid[key] = list(values)
        kwargs["grid"] = grid
    if "dissemination" in data:
        kwargs["dissemination"] = _build(DisseminationSettings, data["dissemination"], "dissemination")
    if "capacity" in data:
        kwargs["capacity"] = _build(CapacitySettings, data["capacity"], "capacity")
    if "econ" in data:
        econ = dict(data["econ"] or {})
        for key in ("betas", "incentives"):
            if key in econ:
                econ[key] = tuple(float(x) for x in econ[key])
        kwargs["econ"] = _build(EconSettings, econ, "econ")
    return ExperimentSpec(**kwargs)


def load_spec(path) -> ExperimentSpec:
    import yaml
    text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return spec_from_dict(data or {})


def validate_spec(spec: ExperimentSpec) -> list[str]:
    findings = []
    findings += spec.sim.validate("sim.")
    findings += spec.train.validate("train.")
    findings += spec.adversary.validate("adversary.")
    findings += dataclasses.replace(spec.fl, k_max=max(spec.k_max, 1)).validate("fl.")
    if spec.k_max < 1:
        findings.append("k_max: must be >= 1")
    if spec.repetitions < 1:
        findings.append("repetitions: must be >= 1")
    if spec.seeds and len(spec.seeds) != spec.repetitions:
        findings.append(f"seeds: {len(spec.seeds)} given for {spec.repetitions} repetitions")
    if not spec.scenario:
        findings.append("scenario: must be a nonempty name")
    for key, values in spec.grid.items():
        if not values:
            findings.append(f"grid.{key}: must list at least one value")
    for value in spec.grid.get("malicious_fraction", []):
        if not 0.0 <= value <= 1.0:
            findings.append(f"grid.malicious_fraction: {value!r} outside [0, 1]")
    for value in spec.grid.get("selfish_fraction", []):
        if not 0.0 <= value <= 1.0:
            findings.append(f"grid.selfish_fraction: {value!r} outside [0, 1]")
    for value in spec.grid.get("num_vehicles", []):
        if int(value) != value or value < spec.sim.num_designated + 1:
            findings.append(f"grid.num_vehicles: {value!r} must be an integer above num_designated")
    d = spec.dissemination
    if d.incidents < 1:
        findings.append("dissemination.incidents: must be >= 1")
    if not d.timer_unit_s > 0:
        findings.append("dissemination.timer_unit_s: must be positive")
    if not d.lookup_cost_s >= 0:
        findings.append("dissemination.lookup_cost_s: must be non-negative")
    if not d.interval_s > 0:
        findings.append("dissemination.interval_s: must be positive")
    c = spec.capacity
    if not c.ts > 0:
        findings.append("capacity.ts: must be positive")
    if c.runs < 1:
        findings.append("capacity.runs: must be >= 1")
    if not c.density_scale > 0:
        findings.append("capacity.density_scale: must be positive")
    e = spec.econ
    if e.n < 1 or e.n_rly < 1:
        findings.append("econ.n and econ.n_rly: must be >= 1")
    if not e.alpha > 0:
        findings.append("econ.alpha: must be positive")
    if any(not b > 0 for b in e.betas) or not e.betas:
        findings.append("econ.betas: must be a nonempty list of positive values")
    if any(not i >= 0 for i in e.incentives) or not e.incentives:
        findings.append("econ.incentives: must be a nonempty list of non-negative values")
    if spec.trusted_multiplier < 2:
        findings.append("trusted_multiplier: must be >= 2")
    return findings


# --------------------------------------------------------------------------
# running


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating,)):
        return repr(float(value))
    return str(value)


class CsvReport:
    def __init__(self, header: Sequence[str]):
        self.header = list(header)
        self.rows: list[list[str]] = []

    def add(self, *values) -> None:
        if len(values) != len(self.header):
            raise ValueError(f"row has {len(values)} values, header has {len(self.header)}")
        self.rows.append([_fmt(v) for v in values])

    def render(self, provenance: str) -> str:
        buf = io.StringIO()
        buf.write(provenance + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        writer.writerows(self.rows)
        return buf.getvalue()


def read_report(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


REPORT_FILES = ("loss_trajectory.csv", "final_loss.csv", "capacity.csv", "econ.csv", "dissemination.csv")


@dataclass
class ExperimentOutcome:
    files: dict
    failures: list
    spec_digest: str

    @property
    def ok(self) -> bool:
        return not self.failures


def _pct(x: float) -> str:
    return repr(round(100.0 * float(x), 6))


def run_cell(spec: ExperimentSpec, cell: dict, seed: int, world_cache: dict, trusted_cache: dict):
    n = int(cell["num_vehicles"])
    sim = dataclasses.replace(spec.sim, num_vehicles=n, rng_seed=int(seed))
    adv = dataclasses.replace(spec.adversary, malicious_fraction=float(cell["malicious_fraction"]),
                              selfish_fraction=float(cell["selfish_fraction"]))
    s = spec.fl.samples_per_vehicle
    tkey = (n, seed)
    if tkey not in trusted_cache:
        trusted_cache[tkey] = trusted_sample(sim, s, seed, spec.trusted_multiplier)
    wkey = (n, adv.malicious_fraction, adv.selfish_fraction, seed)
    if wkey not in world_cache:
        world_cache.clear()
        world_cache[wkey] = build_world(sim, adv, s, seed, trusted_chunks=trusted_cache[tkey])
    world = world_cache[wkey]
    settings = spec.fl_settings()
    result, vehicles = run_federation(world, settings, cell["guard_mode"], seed)
    kind = ConsensusKind(cell["consensus"])
    d = spec.dissemination
    if kind is ConsensusKind.pofl:
        consensus = Consensus.pofl(result.global_model, world.scaler)
    else:
        consensus = Consensus.pos(random_reputation(vehicles, derive_rng(seed, "reputation")), d.lookup_cost_s)
    metrics = run_incidents(world.config, vehicles, consensus, derive_seed(seed, "dissemination"), d.incidents,
                            timer_unit=d.timer_unit_s, interval_s=d.interval_s, start_time=result.end_time,
                            rsu=result.rsu)
    return result, metrics


def run_experiment(spec: ExperimentSpec, output_dir=None) -> ExperimentOutcome:
    findings = validate_spec(spec)
    if findings:
        raise ValueError("invalid experiment spec:\n  " + "\n  ".join(findings))
    out = Path(output_dir if output_dir is not None else spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = spec.resolved_seeds()
    digest = spec.digest()
    provenance = f"# spec_sha256={digest} seeds={','.join(str(s) for s in seeds)} scenario={spec.scenario}"

    loss_csv = CsvReport(["rep", "seed", "num_vehicles", "malicious_pct", "selfish_pct", "guard_mode", "k",
                          "global_loss"])
    final_csv = CsvReport(["rep", "seed", "num_vehicles", "malicious_pct", "selfish_pct", "guard_mode",
                           "final_loss", "accepted_fraction"])
    guard_csv = CsvReport(["rep", "k", "vehicle_pseudonym", "mode", "dataset_score", "weight_score", "verdict"])
    diss_rows: dict = {}
    failures = []
    cells = spec.cells()
    for rep, seed in enumerate(seeds):
        world_cache, trusted_cache = {}, {}
        try:
            for cell in cells:
                mode = GuardMode.parse(cell["guard_mode"])
                result, metrics = run_cell(spec, cell, seed, world_cache, trusted_cache)
                mal, sel = _pct(cell["malicious_fraction"]), _pct(cell["selfish_fraction"])
                n = int(cell["num_vehicles"])
                for k, loss in result.history:
                    loss_csv.add(rep, seed, n, mal, sel, mode.value, k, loss)
                parts = max(len({g.vehicle_pseudonym for g in result.guard_log}), 1)
                acc = math.fsum(result.accepted) / (parts * len(result.accepted))
                final_csv.add(rep, seed, n, mal, sel, mode.value, result.history[-1][1], acc)
                for g in result.guard_log:
                    guard_csv.add(rep, g.k, g.vehicle_pseudonym, g.mode, g.dataset_score, g.weight_score, g.verdict)
                key = (ConsensusKind(cell["consensus"]).value, n, mal, mode.value)
                diss_rows.setdefault(key, []).append(
                    (float(np.mean([m.delivery_ratio for m in metrics])),
                     _mean_hop_delay(metrics)))
                report = verify_chain(result.rsu.ledger)
                if not report.ok:
                    raise RuntimeError(f"RSU ledger failed verification: {report.findings[0]}")
                if cell is cells[-1]:
                    save_ledger(result.rsu.ledger, out / f"ledger_rep{rep}.txt")
        except Exception as exc:  # record and continue with the next repetition
            log.error("repetition %d (seed %d) failed: %s", rep, seed, exc)
            failures.append({"rep": rep, "seed": seed, "error": f"{type(exc).__name__}: {exc}",
                             "trace": traceback.format_exc()})

    diss_csv = CsvReport(["consensus", "num_vehicles", "malicious_pct", "guard_mode", "delivery_ratio",
                          "mean_hop_delay_s"])
    for key in sorted(diss_rows, key=lambda k: (k[0], k[1], float(k[2]), k[3])):
        vals = diss_rows[key]
        delays = [d for _, d in vals if not math.isnan(d)]
        diss_csv.add(*key, float(np.mean([r for r, _ in vals])),
                     float(np.mean(delays)) if delays else float("nan"))

    cap_csv = capacity_table(spec.capacity, seeds[0] if seeds else 0)
    econ_csv = econ_table(spec.econ)
    files = {}
    for name, report in (("loss_trajectory.csv", loss_csv), ("final_loss.csv", final_csv),
                         ("capacity.csv", cap_csv), ("econ.csv", econ_csv), ("dissemination.csv", diss_csv),
                         ("guard_log.csv", guard_csv)):
        path = out / name
        path.write_text(report.render(provenance), encoding="utf-8", newline="\n")
        files[name] = path
    if failures:
        fail_csv = CsvReport(["rep", "seed", "error"])
        for f in failures:
            fail_csv.add(f["rep"], f["seed"], f["error"])
        path = out / "failures.csv"
        path.write_text(fail_csv.render(provenance), encoding="utf-8", newline="\n")
        files["failures.csv"] = path
    return ExperimentOutcome(files, failures, digest)


def _mean_hop_delay(metrics: Sequence[DisseminationMetrics]) -> float:
    delays = [d for m in metrics for d in m.per_hop_delay]
    return math.fsum(delays) / len(delays) if delays else float("nan")


def capacity_table(settings: CapacitySettings, seed: int) -> CsvReport:
    report = CsvReport(["lambda_v", "lambda_mb", "mu_d", "ts", "e_nb", "e_nv", "e_nmv", "e_nwb",
                        "sim_nb_mean", "sim_nb_std", "sim_nwb_mean", "sim_nwb_std"])
    for lam_v, lam_mb, mu_d in REFERENCE_ROWS:
        p = CapacityParams(lam_mb, settings.ts, lam_v * settings.density_scale, 250.0, mu_d)
        cf = closed_form(p)
        mc = monte_carlo_capacity(p, settings.runs, derive_rng(seed, "capacity", lam_v))
        report.add(lam_v, lam_mb, mu_d, settings.ts, cf.e_nb, cf.e_nv, cf.e_nmv, cf.e_nwb,
                   mc["nb"], mc["nb_std"], mc["nwb"], mc["nwb_std"])
    return report


def econ_table(settings: EconSettings) -> CsvReport:
    gp = GameParams.uniform(settings.n, settings.n_rly, settings.alpha, settings.betas[0], settings.size)
    n = settings.n
    header = ["beta", "I"] + [f"s_star_{i + 1}" for i in range(n)] + [f"U_i_{i + 1}" for i in range(n)] \
        + ["U_rly", "flag"]
    report = CsvReport(header)
    for row in sweep(gp, settings.betas, settings.incentives):
        report.add(row.beta, row.i_incentive, *row.s_star, *row.u_i, row.u_rly, row.flag or "-")
    if settings.size > 0:
        # Pinned data sizes: the relay-utility curves for a given size profile.
        for row in sweep(gp, settings.betas, settings.incentives, fixed_sizes=gp.sizes):
            flag = ";".join(x for x in ("fixed_size", row.flag) if x)
            report.add(row.beta, row.i_incentive, *row.s_star, *row.u_i, row.u_rly, flag)
    return report
