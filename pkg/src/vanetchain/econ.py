"""Two-stage Stackelberg incentive game between relays and FL vehicles.

The originator pays each relay beta*ln(1+I); each of the N_RLY relays pays
every FL vehicle I per unit of training data, and a vehicle training on s_i
units bears a quadratic cost alpha_i*s_i^2:

    U_i   = N_RLY * I * s_i - alpha_i * s_i^2
    U_RLY = beta * ln(1 + I) - I * sum_i s_i

A vehicle's best response is s_i*(I) = N_RLY*I/(2*alpha_i).  Substituting it
into the relay's first-order condition beta/(1+I) = sum_i s_i gives the
scalar fixed point I*(1+I) = beta/A with A = N_RLY * sum_i 1/(2*alpha_i).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class GameParams:
    n: int
    n_rly: int
    alphas: tuple
    beta: float
    i_incentive: float = 0.0
    sizes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        sizes = tuple(float(s) for s in self.sizes) if self.sizes else tuple(0.0 for _ in self.alphas)
        object.__setattr__(self, "sizes", sizes)
        problems = self.validate()
        if problems:
            raise ValueError("; ".join(problems))

    def validate(self) -> list[str]:
        findings = []
        if self.n < 1:
            findings.append("n: must be >= 1")
        if self.n_rly < 1:
            findings.append("n_rly: must be >= 1")
        if len(self.alphas) != self.n:
            findings.append(f"alphas: expected {self.n} entries, got {len(self.alphas)}")
        if len(self.sizes) != self.n:
            findings.append(f"sizes: expected {self.n} entries, got {len(self.sizes)}")
        if any(not (a > 0 and math.isfinite(a)) for a in self.alphas):
            findings.append("alphas: every entry must be positive")
        if any(s < 0 for s in self.sizes):
            findings.append("sizes: entries must be non-negative")
        if not self.beta > 0:
            findings.append("beta: must be positive")
        if not self.i_incentive >= 0:
            findings.append("i_incentive: must be non-negative")
        return findings

    @classmethod
    def uniform(cls, n: int, n_rly: int, alpha: float, beta: float, size: float = 0.0,
                i_incentive: float = 0.0) -> "GameParams":
        return cls(n, n_rly, (alpha,) * n, beta, i_incentive, (size,) * n)


@dataclass(frozen=True)
class AsymmetricParams:
    size_support: tuple
    probs: tuple

    def __post_init__(self):
        object.__setattr__(self, "size_support", tuple(float(s) for s in self.size_support))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if len(self.size_support) != len(self.probs) or not self.probs:
            raise ValueError("size_support and probs must be nonempty and of equal length")
        if any(p < 0 for p in self.probs) or abs(math.fsum(self.probs) - 1.0) > 1e-12:
            raise ValueError("probs must be non-negative and sum to 1")


def vehicle_utility(s_i, i_incentive, alpha_i, n_rly):
    if not np.all(np.asarray(alpha_i) > 0):
        raise ValueError("alpha_i must be positive")
    return n_rly * i_incentive * s_i - alpha_i * s_i * s_i


def relay_utility(sizes, i_incentive, beta):
    if not beta > 0:
        raise ValueError("beta must be positive")
    if np.any(np.asarray(i_incentive) < 0):
        raise ValueError("incentive must be non-negative")
    total = math.fsum(float(s) for s in np.atleast_1d(sizes))
    return beta * np.log1p(i_incentive) - i_incentive * total


def relay_utility_asymmetric(ap: AsymmetricParams, n: int, i_incentive, beta):
    if not beta > 0:
        raise ValueError("beta must be positive")
    expected = math.fsum(p * n * s for p, s in zip(ap.probs, ap.size_support))
    return beta * np.log1p(i_incentive) - i_incentive * expected


def best_response_size(i_incentive: float, alpha_i, n_rly: int):
    return n_rly * i_incentive / (2.0 * np.asarray(alpha_i, dtype=float))


def best_response_incentive(total_size: float, beta: float) -> float:
    if total_size <= 0:
        return math.inf
    return max(0.0, beta / total_size - 1.0)


@dataclass(frozen=True)
class Equilibrium:
    s_star: tuple
    i_star: float
    u_vehicles: tuple
    u_relay: float
    flagged: bool
    second_order_ok: bool
    iterations: int
    closed_form_i: float = field(default=float("nan"))


def equilibrium(gp: GameParams, tol: float = 1e-10, eps: float = 1e-12) -> Equilibrium:
    """Joint equilibrium by bisection on g(I) = I - max(0, beta/sum_i s_i*(I) - 1).

    g is increasing on (0, inf): the right-hand side falls as 1/I.  The bracket
    is [eps, beta/eps]; bisection runs until the bracket is narrower than
    ``tol``.  ``flagged`` marks a relay utility that is not positive at the
    solution; such equilibria are returned, not rejected.
    """
    alphas = np.array(gp.alphas)
    inv = float(np.sum(1.0 / (2.0 * alphas)))

    def g(i):
        return i - best_response_incentive(gp.n_rly * i * inv, gp.beta)

    lo, hi = eps, max(gp.beta / eps, 1.0)
    if g(lo) >= 0:
        hi = lo
    its = 0
    while hi - lo > tol * max(1.0, lo) and its < 10_000:
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
        its += 1
    i_star = 0.5 * (lo + hi)
    s_star = best_response_size(i_star, alphas, gp.n_rly)
    u_i = vehicle_utility(s_star, i_star, alphas, gp.n_rly)
    u_rly = float(relay_utility(s_star, i_star, gp.beta))
    a = gp.n_rly * inv
    closed = (-1.0 + math.sqrt(1.0 + 4.0 * gp.beta / a)) / 2.0
    return Equilibrium(tuple(s_star.tolist()), float(i_star), tuple(np.asarray(u_i).tolist()), u_rly,
                       u_rly <= 0.0, _second_order_ok(gp, s_star, i_star), its, closed)


def _second_order_ok(gp: GameParams, s_star, i_star: float, rel: float = 1e-3) -> bool:
    ok = True
    for s, a in zip(s_star, gp.alphas):
        h = max(abs(s) * rel, 1e-6)
        f = lambda x: vehicle_utility(x, i_star, a, gp.n_rly)
        ok &= f(s + h) - 2 * f(s) + f(s - h) < 0
    h = max(i_star * rel, 1e-6)
    lo = max(i_star - h, 0.0)
    hi = lo + 2 * h
    mid = lo + h
    r = lambda x: relay_utility(s_star, x, gp.beta)
    ok &= r(hi) - 2 * r(mid) + r(lo) < 0
    return bool(ok)


def first_order_residuals(gp: GameParams, eq: Equilibrium) -> tuple[float, float]:
    """Largest vehicle FOC residual and the relay FOC residual at ``eq``."""
    s = np.array(eq.s_star)
    veh = np.max(np.abs(gp.n_rly * eq.i_star - 2.0 * np.array(gp.alphas) * s))
    rly = abs(gp.beta / (1.0 + eq.i_star) - float(np.sum(s)))
    return float(veh), float(rly)


@dataclass(frozen=True)
class SweepRow:
    beta: float
    i_incentive: float
    s_star: tuple
    u_i: tuple
    u_rly: float
    flag: str


def sweep(gp: GameParams, betas: Sequence[float], incentives: Sequence[float],
          fixed_sizes: Sequence[float] | None = None) -> list[SweepRow]:
    """Tabulate utilities over a (beta, I) grid.

    Vehicles play their best response s_i*(I) unless ``fixed_sizes`` pins
    the data sizes.  ``flag`` is ``equilibrium`` on the grid point closest to
    each beta's equilibrium incentive, ``nonpositive`` where the relay
    utility is <= 0, and empty otherwise.
    """
    alphas = np.array(gp.alphas)
    rows = []
    for beta in betas:
        eq_i = equilibrium(GameParams(gp.n, gp.n_rly, gp.alphas, beta, 0.0, gp.sizes)).i_star
        nearest = int(np.argmin([abs(i - eq_i) for i in incentives])) if len(incentives) else -1
        for j, inc in enumerate(incentives):
            if fixed_sizes is not None:
                s = np.asarray(fixed_sizes, dtype=float)
            else:
                s = best_response_size(inc, alphas, gp.n_rly)
            u_i = vehicle_utility(s, inc, alphas, gp.n_rly)
            u_r = float(relay_utility(s, inc, beta))
            flag = "equilibrium" if j == nearest and fixed_sizes is None else ""
            if u_r <= 0 and not (inc == 0 and u_r == 0):
                flag = (flag + ";nonpositive").lstrip(";")
            rows.append(SweepRow(float(beta), float(inc), tuple(np.atleast_1d(s).tolist()),
                                 tuple(np.atleast_1d(u_i).tolist()), u_r, flag))
    return rows
