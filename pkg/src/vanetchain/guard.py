"""Adversaries and the pre-commit security check.

Malicious vehicles poison their training data; selfish vehicles never
acknowledge Hello packets (handled inside the Hello protocol).  The check run
before a microblock is stored is an Isolation Forest over a fixed-size
summary of the submitted dataset, of the submitted weights, or of both.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import digamma

from .model import ModelWeights
from .sim import DatasetRow

EULER_GAMMA = 0.5772156649015329


class LabelAttack(str, enum.Enum):
    perturb = "perturb"   # multiplicative factor, like the features
    redraw = "redraw"     # uniform integer in [0, label_max]
    invert = "invert"     # label_max - n_a, clipped at zero


@dataclass(frozen=True)
class AdversaryConfig:
    malicious_fraction: float = 0.0
    selfish_fraction: float = 0.0
    poison_strength: float = 0.5
    label_attack: LabelAttack = LabelAttack.invert

    def validate(self, prefix: str = "") -> list[str]:
        findings = []
        for name in ("malicious_fraction", "selfish_fraction"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                findings.append(f"{prefix}{name}: must lie in [0, 1] (got {value!r})")
        if self.malicious_fraction + self.selfish_fraction > 1.0 + 1e-12:
            findings.append(f"{prefix}malicious_fraction + selfish_fraction: must not exceed 1")
        if not (self.poison_strength > 0 and math.isfinite(self.poison_strength)):
            findings.append(f"{prefix}poison_strength: must be positive")
        try:
            LabelAttack(self.label_attack)
        except ValueError:
            findings.append(f"{prefix}label_attack: unknown mode {self.label_attack!r}")
        return findings


def assign_adversaries(vehicles, adv: AdversaryConfig, rng: np.random.Generator) -> None:
    """Flag malicious and selfish vehicles among the non-designated ones.

    Counts are rounded from the fractions of the whole population, so 25%
    of 30 vehicles gives 8 (round half to even).
    """
    pool = [v for v in vehicles if not v.is_designated]
    n = len(vehicles)
    n_mal = min(int(round(adv.malicious_fraction * n)), len(pool))
    n_sel = min(int(round(adv.selfish_fraction * n)), len(pool) - n_mal)
    order = rng.permutation(len(pool))
    for rank, j in enumerate(order):
        v = pool[j]
        v.is_malicious = rank < n_mal
        v.is_selfish = n_mal <= rank < n_mal + n_sel


def _round_within(value: int, factor: float, strength: float) -> int:
    lo = math.ceil(value * (1.0 - strength) - 1e-12)
    hi = math.floor(value * (1.0 + strength) + 1e-12)
    if lo > hi:
        return int(value)
    return int(min(max(round(value * factor), lo), hi))


def poison_dataset(data: Sequence[DatasetRow], strength: float, rng: np.random.Generator,
                   label_attack: LabelAttack | str = LabelAttack.perturb,
                   label_max: int | None = None) -> list[DatasetRow]:
    """Scale every feature by an independent factor from [1-strength, 1+strength].

    The label is scaled the same way (``perturb``), redrawn uniformly from
    0..label_max (``redraw``) or mirrored to label_max - n_a (``invert``).
    Distances, speeds and densities are kept non-negative, the direction
    flag keeps its +/-1 domain (flipped when its factor is negative) and
    integer columns are rounded without leaving the perturbation band.
    """
    if not strength > 0:
        raise ValueError("strength must be positive")
    attack = LabelAttack(label_attack)
    if attack is not LabelAttack.perturb and label_max is None:
        label_max = max((r.n_a for r in data), default=0)
    out = []
    for r in data:
        f = rng.uniform(1.0 - strength, 1.0 + strength, 6)
        d = max(r.d_is * f[0], 0.0)
        direction = r.dir_is if f[1] >= 0 else -r.dir_is
        v = max(r.v_i * f[2], 0.0)
        h = max(1, _round_within(r.h, f[3], strength))
        gamma = max(r.gamma_i * f[4], 0.0)
        if attack is LabelAttack.perturb:
            n_a = max(0, _round_within(r.n_a, f[5], strength))
        elif attack is LabelAttack.redraw:
            n_a = int(rng.integers(0, label_max + 1))
        else:
            n_a = max(0, int(label_max) - r.n_a)
        out.append(DatasetRow(d, direction, v, h, gamma, n_a))
    return out


# --------------------------------------------------------------------------
# Isolation Forest


def harmonic(n: int) -> float:
    if n < 1:
        return 0.0
    if n <= 100_000:
        return math.fsum(1.0 / k for k in range(1, n + 1))
    return math.log(n) + EULER_GAMMA + 1.0 / (2 * n) - 1.0 / (12 * n * n) + 1.0 / (120 * n ** 4)


def average_path_length(n: int) -> float:
    """Expected unsuccessful-search depth of a BST built on n points."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


def average_path_lengths(sizes) -> np.ndarray:
    """Vectorised :func:`average_path_length` (harmonic numbers via digamma)."""
    n = np.asarray(sizes, dtype=float)
    safe = np.maximum(n, 2.0)
    c = 2.0 * (digamma(safe) + EULER_GAMMA) - 2.0 * (safe - 1.0) / safe
    return np.where(n <= 1, 0.0, np.where(n == 2, 1.0, c))


@dataclass(frozen=True)
class IsolationTree:
    feature: np.ndarray     # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray        # training points that reached each leaf

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=int)
        for node in range(len(self.feature)):
            if self.feature[node] >= 0:
                depth[self.left[node]] = depth[node] + 1
                depth[self.right[node]] = depth[node] + 1
        return int(depth.max())

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=int)
        depth = np.zeros(len(X))
        active = self.feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] < self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            depth[idx] += 1
            active[idx] = self.feature[node[idx]] >= 0
        return depth + self.leaf_adjust[node]

    @property
    def leaf_adjust(self) -> np.ndarray:
        # cached per tree: c(size) for every node
        cached = self.__dict__.get("_leaf_adjust")
        if cached is None:
            cached = average_path_lengths(self.size)
            object.__setattr__(self, "_leaf_adjust", cached)
        return cached


def _build_tree(X: np.ndarray, max_depth: int, rng: np.random.Generator) -> IsolationTree:
    feature, threshold, left, right, size = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(X)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        size[node] = len(idx)
        if depth >= max_depth or len(idx) <= 1:
            continue
        sub = X[idx]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        splittable = np.nonzero(hi > lo)[0]
        if splittable.size == 0:
            continue
        q = int(splittable[rng.integers(splittable.size)])
        split = rng.uniform(lo[q], hi[q])
        if split <= lo[q]:
            split = np.nextafter(lo[q], hi[q])
        mask = sub[:, q] < split
        feature[node] = q
        threshold[node] = split
        l_node, r_node = new_node(), new_node()
        left[node], right[node] = l_node, r_node
        stack.append((r_node, idx[~mask], depth + 1))
        stack.append((l_node, idx[mask], depth + 1))
    return IsolationTree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                         np.array(size))


@dataclass(frozen=True)
class IsolationForestModel:
    trees: tuple
    subsample_size: int
    num_trees: int
    threshold: float
    dim: int

    def mean_path_length(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim}-dimensional vectors, got {X.shape[1]}")
        return np.mean([t.path_lengths(X) for t in self.trees], axis=0)

    def score(self, X) -> np.ndarray:
        return anomaly_score(self.mean_path_length(X), self.subsample_size)

    def with_threshold(self, threshold: float) -> "IsolationForestModel":
        if not 0.0 < threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        return replace(self, threshold=float(threshold))


def anomaly_score(mean_path, subsample_size: int) -> np.ndarray:
    c = average_path_length(subsample_size)
    return np.power(2.0, -np.asarray(mean_path, dtype=float) / c)


def fit_isolation_forest(samples, num_trees: int = 100, subsample_size: int = 64,
                         rng: np.random.Generator | None = None,
                         quantile: float = 0.95) -> IsolationForestModel:
    """Fit trees on random subsamples and set the threshold at ``quantile`` of the training scores.

    Training scores are out-of-bag (only trees that did not see the point)
    where possible.  If fewer samples than ``subsample_size`` are given,
    every tree sees all of them and the plain in-sample scores are used.
    """
    rows = [np.asarray(s, dtype=float).ravel() for s in samples]
    if not rows:
        raise ValueError("need at least one sample")
    dims = {r.size for r in rows}
    if len(dims) != 1:
        raise ValueError(f"samples have mismatched dimensions {sorted(dims)}")
    X = np.stack(rows)
    if rng is None:
        rng = np.random.default_rng(0)
    psi = min(int(subsample_size), len(X))
    if psi < 2:
        raise ValueError("need at least two samples")
    max_depth = int(math.ceil(math.log2(psi)))
    trees = []
    inbag = np.zeros((num_trees, len(X)), dtype=bool)
    for t in range(num_trees):
        idx = rng.choice(len(X), size=psi, replace=False)
        inbag[t, idx] = True
        trees.append(_build_tree(X[idx], max_depth, rng))
    model = IsolationForestModel(tuple(trees), psi, int(num_trees), 0.5, X.shape[1])
    # Calibrate on out-of-bag path lengths: a tree grown on a point isolates
    # it sooner than it would a fresh point from the same distribution.
    paths = np.stack([t.path_lengths(X) for t in trees])
    oob = ~inbag
    has_oob = oob.any(axis=0)
    mean_path = np.where(has_oob, (paths * oob).sum(axis=0) / np.maximum(oob.sum(axis=0), 1), paths.mean(axis=0))
    scores = anomaly_score(mean_path, psi)
    threshold = float(np.quantile(scores, quantile))
    threshold = min(max(threshold, 1e-9), 1.0 - 1e-9)
    return model.with_threshold(threshold)


# --------------------------------------------------------------------------
# summaries and the check


class GuardMode(str, enum.Enum):
    none = "none"
    dataset = "dataset"
    weights = "weights"
    both = "both"

    @classmethod
    def parse(cls, value) -> "GuardMode":
        if isinstance(value, GuardMode):
            return value
        aliases = {"none": "none", "datasetonly": "dataset", "dataset": "dataset",
                   "weightsonly": "weights", "weights": "weights", "both": "both"}
        key = str(value).replace("_", "").replace("-", "").lower()
        if key not in aliases:
            raise ValueError(f"unknown guard mode {value!r}")
        return cls(aliases[key])


def dataset_summary(rows: Sequence[DatasetRow], scaler=None) -> np.ndarray:
    """Per-feature mean and std followed by the label mean (11 values)."""
    if not rows:
        raise ValueError("empty dataset")
    if scaler is not None:
        feats = scaler.features(rows)
        labels = scaler.labels(rows)
    else:
        feats = np.array([r.features() for r in rows], dtype=float)
        labels = np.array([r.n_a for r in rows], dtype=float)
    return np.concatenate([feats.mean(axis=0), feats.std(axis=0), [labels.mean()]])


def weight_features(weights: ModelWeights) -> np.ndarray:
    """Mean, std and L2 norm of each layer's parameters (weights and bias together)."""
    out = []
    for W, b in weights.layers():
        p = np.concatenate([W.ravel(), b.ravel()])
        out.extend([p.mean(), p.std(), float(np.sqrt(np.dot(p, p)))])
    return np.array(out)


@dataclass(frozen=True)
class Detectors:
    dataset: IsolationForestModel | None = None
    weights: IsolationForestModel | None = None


@dataclass(frozen=True)
class Verdict:
    passed: bool
    dataset_score: float
    weight_score: float
    mode: GuardMode


def check_models(summaries, models, mode: GuardMode | str, detectors: Detectors) -> list[Verdict]:
    """Vectorised :func:`check_model` over many submissions."""
    mode = GuardMode.parse(mode)
    n = len(models)
    ds = np.full(n, np.nan)
    ws = np.full(n, np.nan)
    ok = np.ones(n, dtype=bool)
    if n == 0:
        return []
    if mode in (GuardMode.dataset, GuardMode.both):
        if detectors.dataset is None:
            raise ValueError("dataset detector is not fitted")
        ds = detectors.dataset.score(np.stack(summaries))
        ok &= ds <= detectors.dataset.threshold
    if mode in (GuardMode.weights, GuardMode.both):
        if detectors.weights is None:
            raise ValueError("weight detector is not fitted")
        feats = np.stack([weight_features(m) if isinstance(m, ModelWeights) else m for m in models])
        ws = detectors.weights.score(feats)
        ok &= ws <= detectors.weights.threshold
    return [Verdict(bool(o), float(d), float(w), mode) for o, d, w in zip(ok, ds, ws)]


def check_model(summary: np.ndarray | None, weights: ModelWeights | np.ndarray | None,
                mode: GuardMode | str, detectors: Detectors) -> Verdict:
    """Score a submission; it passes when every active detector scores it at or below threshold."""
    mode = GuardMode.parse(mode)
    ds = ws = float("nan")
    ok = True
    if mode in (GuardMode.dataset, GuardMode.both):
        if detectors.dataset is None:
            raise ValueError("dataset detector is not fitted")
        ds = float(detectors.dataset.score(summary)[0])
        ok = ok and ds <= detectors.dataset.threshold
    if mode in (GuardMode.weights, GuardMode.both):
        if detectors.weights is None:
            raise ValueError("weight detector is not fitted")
        feats = weight_features(weights) if isinstance(weights, ModelWeights) else weights
        ws = float(detectors.weights.score(feats)[0])
        ok = ok and ws <= detectors.weights.threshold
    return Verdict(bool(ok), ds, ws, mode)
