"""Expected number of local models uploaded within one time slot.

With blockchain, uploads are microblocks arriving as a Poisson process of
rate lambda_mb over a slot of TS seconds.  Without it, a model reaches the
RSU only from vehicles already inside the RSU's range (Poisson with mean
lambda_v * pi * R^2) or from vehicles that drive into range during the slot
(Poisson with mean TS * mu_v / (mu_d - R)).  Each expectation is the Poisson
mean truncated at floor(m):

    E(m) = sum_{l=1}^{floor(m)} l * exp(-m) * m^l / l!
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Reference rows for the shipped capacity report: (lambda_v, lambda_mb, mu_d).
REFERENCE_ROWS = ((16.0, 2.01, 344.0), (32.0, 1.99, 298.0), (48.0, 0.98, 276.0))
# lambda_v in the reference rows is read as vehicles per km^2.
PER_KM2 = 1e-6


@dataclass(frozen=True)
class CapacityParams:
    lambda_mb: float
    ts: float = 10.0
    lambda_v: float = 16.0 * PER_KM2
    r: float = 250.0
    mu_d: float = 344.0
    mu_v: float = 50.0 / 3.6

    def validate(self) -> list[str]:
        findings = []
        for name in ("lambda_mb", "ts", "lambda_v", "r", "mu_d", "mu_v"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                findings.append(f"{name}: must be strictly positive (got {value!r})")
        if self.mu_d <= self.r:
            findings.append(f"mu_d: must exceed r ({self.mu_d!r} <= {self.r!r})")
        return findings

    @property
    def m_nb(self) -> float:
        return self.lambda_mb * self.ts

    @property
    def m_nv(self) -> float:
        return self.lambda_v * math.pi * self.r ** 2

    @property
    def m_nmv(self) -> float:
        if self.mu_d <= self.r:
            raise ValueError("mu_d must exceed the transmission range")
        return self.ts * self.mu_v / (self.mu_d - self.r)


@dataclass(frozen=True)
class CapacityReport:
    e_nb: float
    e_nv: float
    e_nmv: float
    e_nwb: float
    simulated_nb: tuple | None = None     # (mean, std)
    simulated_nwb: tuple | None = None


def truncated_poisson_mean(rate_product: float) -> float:
    """Poisson mean restricted to counts 1..floor(m); terms built in log space."""
    m = float(rate_product)
    if m < 0 or math.isnan(m):
        raise ValueError("rate_product must be non-negative")
    top = math.floor(m)
    if top < 1:
        return 0.0
    log_m = math.log(m)
    terms = (math.exp(math.log(l) - m + l * log_m - math.lgamma(l + 1)) for l in range(1, top + 1))
    return math.fsum(terms)


def expected_with_blockchain(p: CapacityParams) -> float:
    return truncated_poisson_mean(p.m_nb)


def expected_without_blockchain(p: CapacityParams) -> tuple[float, float, float]:
    if p.mu_d <= p.r:
        raise ValueError(f"mu_d ({p.mu_d}) must exceed r ({p.r})")
    e_nv = truncated_poisson_mean(p.m_nv)
    e_nmv = truncated_poisson_mean(p.m_nmv)
    return e_nv, e_nmv, e_nv + e_nmv


def closed_form(p: CapacityParams) -> CapacityReport:
    e_nv, e_nmv, e_nwb = expected_without_blockchain(p)
    return CapacityReport(expected_with_blockchain(p), e_nv, e_nmv, e_nwb)


def _truncate(counts: np.ndarray, m: float) -> np.ndarray:
    # A realisation counts toward the truncated mean only up to floor(m).
    return np.where(counts <= math.floor(m), counts, 0)


def sample_counts(p: CapacityParams, runs: int, rng: np.random.Generator):
    """Simulate the three arrival processes directly; returns truncated counts per run.

    Microblocks: exponential inter-arrival gaps of rate lambda_mb counted
    inside [0, TS).  In-range vehicles: a Poisson number of vehicles over a
    square window around the RSU, uniformly placed, counted if within R.
    Travellers: arrivals at rate mu_v/(mu_d - R) counted inside [0, TS).
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    nb = _count_arrivals(p.lambda_mb, p.ts, runs, rng)
    half = p.r
    window = (2 * half) ** 2
    placed = rng.poisson(p.lambda_v * window, runs)
    total = int(placed.sum())
    xy = rng.uniform(-half, half, (total, 2))
    inside = (xy ** 2).sum(axis=1) <= p.r ** 2
    owner = np.repeat(np.arange(runs), placed)
    nv = np.bincount(owner[inside], minlength=runs)
    nmv = _count_arrivals(p.mu_v / (p.mu_d - p.r), p.ts, runs, rng)
    return (_truncate(nb, p.m_nb), _truncate(nv, p.m_nv), _truncate(nmv, p.m_nmv))


def _count_arrivals(rate: float, horizon: float, runs: int, rng: np.random.Generator) -> np.ndarray:
    if rate <= 0:
        return np.zeros(runs, dtype=int)
    counts = np.zeros(runs, dtype=int)
    clock = np.zeros(runs)
    alive = np.ones(runs, dtype=bool)
    while alive.any():
        idx = np.nonzero(alive)[0]
        clock[idx] += rng.exponential(1.0 / rate, idx.size)
        hit = clock[idx] < horizon
        counts[idx[hit]] += 1
        alive[idx[~hit]] = False
    return counts


def monte_carlo_capacity(p: CapacityParams, runs: int, rng: np.random.Generator) -> dict:
    """Means and standard errors of the simulated truncated counts."""
    nb, nv, nmv = sample_counts(p, runs, rng)
    nwb = nv + nmv
    out = {}
    for name, arr in (("nb", nb), ("nv", nv), ("nmv", nmv), ("nwb", nwb)):
        arr = arr.astype(float)
        std = float(arr.std(ddof=1)) if runs > 1 else 0.0
        out[name] = float(arr.mean())
        out[name + "_std"] = std
        out[name + "_se"] = std / math.sqrt(runs)
    return out


def capacity_report(p: CapacityParams, runs: int = 0, rng: np.random.Generator | None = None) -> CapacityReport:
    base = closed_form(p)
    if runs <= 0:
        return base
    mc = monte_carlo_capacity(p, runs, rng if rng is not None else np.random.default_rng(0))
    return CapacityReport(base.e_nb, base.e_nv, base.e_nmv, base.e_nwb,
                          (mc["nb"], mc["nb_std"]), (mc["nwb"], mc["nwb_std"]))


def reference_params(ts: float = 10.0, density_scale: float = PER_KM2, r: float = 250.0,
                     mu_v: float = 50.0 / 3.6) -> list[tuple[float, CapacityParams]]:
    return [(lam_v, CapacityParams(lam_mb, ts, lam_v * density_scale, r, mu_d, mu_v))
            for lam_v, lam_mb, mu_d in REFERENCE_ROWS]
