import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from vanetchain.federation import FLSettings
from vanetchain.guard import (AdversaryConfig, Detectors, GuardMode, LabelAttack, anomaly_score,
                              assign_adversaries, average_path_length, average_path_lengths, check_model,
                              check_models, dataset_summary, fit_isolation_forest, harmonic, poison_dataset,
                              weight_features)
from vanetchain.experiment import build_world, run_federation
from vanetchain.model import DESK_ARCH, init_weights
from vanetchain.seeding import derive_rng
from vanetchain.sim import DatasetRow, SimConfig, collect_datasets, spawn_vehicles


def clean_rows(n, seed=0):
    rng = np.random.default_rng(seed)
    return [DatasetRow(float(rng.uniform(1, 250)), int(rng.choice([-1, 1])), float(rng.uniform(5, 25)),
                       int(rng.integers(1, 7)), float(rng.uniform(1e-5, 1e-4)), int(rng.integers(0, 20)))
            for _ in range(n)]


# ---------------------------------------------------------------- poisoning

def test_tiny_strength_leaves_data_unchanged():
    rows = clean_rows(50)
    out = poison_dataset(rows, 1e-12, np.random.default_rng(1))
    assert len(out) == len(rows)
    for a, b in zip(rows, out):
        assert (a.dir_is, a.h, a.n_a) == (b.dir_is, b.h, b.n_a)
        for x, y in ((a.d_is, b.d_is), (a.v_i, b.v_i), (a.gamma_i, b.gamma_i)):
            assert y == pytest.approx(x, rel=1e-11)


def test_strength_half_stays_within_band():
    rows = clean_rows(500)
    out = poison_dataset(rows, 0.5, np.random.default_rng(2))
    for a, b in zip(rows, out):
        for x, y in ((a.d_is, b.d_is), (a.v_i, b.v_i), (a.gamma_i, b.gamma_i), (a.h, b.h), (a.n_a, b.n_a)):
            assert 0.5 * x - 1e-9 <= y <= 1.5 * x + 1e-9
        assert b.dir_is in (-1, 1) and b.h >= 1


def test_poisoned_mean_differs_detectably():
    # Acknowledgement counts are small and right-skewed, so mirroring them moves the mean.
    rng = np.random.default_rng(3)
    rows = [DatasetRow(r.d_is, r.dir_is, r.v_i, r.h, r.gamma_i, int(k))
            for r, k in zip(clean_rows(1000, seed=3), rng.poisson(3.0, 1000))]
    out = poison_dataset(rows, 0.5, np.random.default_rng(4), LabelAttack.invert)
    p = stats.ttest_ind([r.n_a for r in rows], [r.n_a for r in out], equal_var=False).pvalue
    assert p < 0.05
    # The multiplicative factors are mean-one but widen every feature's spread.
    assert np.std([r.d_is for r in out]) > np.std([r.d_is for r in rows])


def test_invert_attack_mirrors_labels():
    rows = clean_rows(20)
    out = poison_dataset(rows, 0.5, np.random.default_rng(0), LabelAttack.invert, label_max=30)
    assert [r.n_a for r in out] == [30 - r.n_a for r in rows]


def test_redraw_stays_in_label_range():
    out = poison_dataset(clean_rows(200), 0.5, np.random.default_rng(0), "redraw", label_max=7)
    assert {r.n_a for r in out} <= set(range(8))


def test_nonpositive_strength_rejected():
    with pytest.raises(ValueError):
        poison_dataset(clean_rows(3), 0.0, np.random.default_rng(0))


def test_adversary_validation():
    assert AdversaryConfig(0.25, 0.25).validate() == []
    assert len(AdversaryConfig(1.2).validate()) == 2   # out of range and the sum
    assert any("poison_strength" in f for f in AdversaryConfig(poison_strength=-1).validate())


def test_adversary_counts_round_from_population():
    cfg = SimConfig(area_width_m=1000.0, area_height_m=1000.0, num_vehicles=30)
    vs = spawn_vehicles(cfg, np.random.default_rng(0))
    assign_adversaries(vs, AdversaryConfig(0.25, 0.25), np.random.default_rng(1))
    assert sum(v.is_malicious for v in vs) == 8 and sum(v.is_selfish for v in vs) == 8
    assert not any(v.is_malicious and v.is_selfish for v in vs)
    assert not any((v.is_malicious or v.is_selfish) and v.is_designated for v in vs)


@pytest.mark.parametrize("seed", range(3))
def test_selfish_vehicles_change_only_the_label_column(seed):
    cfg = SimConfig(area_width_m=1200.0, area_height_m=1200.0, num_vehicles=60, rng_seed=seed)
    worlds = []
    for frac in (0.0, 0.3):
        vs = spawn_vehicles(cfg, derive_rng(seed, "spawn"))
        assign_adversaries(vs, AdversaryConfig(selfish_fraction=frac), derive_rng(seed, "adversary"))
        collect_datasets(cfg, vs, derive_rng(seed, "hello"), 8)
        worlds.append(vs)
    changed = 0
    for a, b in zip(*worlds):
        assert len(a.dataset) == len(b.dataset)
        for ra, rb in zip(a.dataset, b.dataset):
            assert ra.features() == rb.features()
            changed += ra.n_a != rb.n_a
    assert changed > 0


# ---------------------------------------------------------------- isolation forest

def test_average_path_length_values():
    assert average_path_length(1) == 0.0 and average_path_length(2) == 1.0
    assert average_path_length(256) == pytest.approx(2 * (math.log(255) + 0.5772156649) - 2 * 255 / 256, rel=1e-3)
    sizes = np.arange(0, 300)
    np.testing.assert_allclose(average_path_lengths(sizes), [average_path_length(int(n)) for n in sizes],
                               rtol=1e-12, atol=1e-12)
    for n in (1, 10, 100_000, 200_000, 10**9):
        assert harmonic(n) == pytest.approx(float(mpmath.harmonic(n)), rel=1e-14)


def test_identical_samples_give_identical_scores():
    forest = fit_isolation_forest([np.ones(3)] * 80, 50, 64, np.random.default_rng(0))
    scores = forest.score(np.ones((80, 3)))
    assert np.ptp(scores) == 0.0
    assert 0.0 < forest.threshold < 1.0


@pytest.mark.parametrize("seed", range(10))
def test_far_point_scores_above_cluster_quantile(seed):
    rng = np.random.default_rng(seed)
    cluster = rng.normal(size=(256, 2))
    forest = fit_isolation_forest(list(cluster) + [np.array([10.0, 10.0])], 100, 64, rng)
    assert forest.score([10.0, 10.0])[0] > np.quantile(forest.score(cluster), 0.95)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 120), dim=st.integers(1, 6))
def test_forest_invariants(seed, n, dim):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, dim)) * rng.uniform(0.1, 100)
    forest = fit_isolation_forest(X, 20, 64, rng)
    assert all(t.depth <= math.ceil(math.log2(forest.subsample_size)) for t in forest.trees)
    probe = np.vstack([X, rng.normal(size=(5, dim)) * 1e3])
    s = forest.score(probe)
    assert np.all((s > 0) & (s < 1))
    assert 0 < forest.threshold < 1


def test_forest_is_deterministic():
    X = np.random.default_rng(1).normal(size=(100, 4))
    a = fit_isolation_forest(X, 30, 64, np.random.default_rng(7))
    b = fit_isolation_forest(X, 30, 64, np.random.default_rng(7))
    assert a.threshold == b.threshold
    assert a.score(X).tolist() == b.score(X).tolist()


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        fit_isolation_forest([np.zeros(3), np.zeros(4)])
    forest = fit_isolation_forest(np.random.default_rng(0).normal(size=(10, 3)), 5)
    with pytest.raises(ValueError):
        forest.score(np.zeros(4))


def test_score_decreases_with_path_length():
    paths = np.linspace(0, 40, 200)
    s = anomaly_score(paths, 64)
    assert np.all(np.diff(s) < 0)
    assert anomaly_score(average_path_length(64), 64) == pytest.approx(0.5)


# ---------------------------------------------------------------- the check

def fitted_detectors(seed=0):
    rng = np.random.default_rng(seed)
    ds = fit_isolation_forest(rng.normal(size=(100, 11)), 50, 64, rng)
    wrng = np.random.default_rng(seed + 1)
    models = [init_weights(DESK_ARCH, wrng) for _ in range(100)]
    ws = fit_isolation_forest([weight_features(m) for m in models], 50, 64, wrng)
    return Detectors(ds, ws), models


def test_mode_none_always_passes():
    v = check_model(np.full(11, 1e6), None, "none", Detectors())
    assert v.passed and math.isnan(v.dataset_score) and math.isnan(v.weight_score)


def test_both_is_a_conjunction():
    det, models = fitted_detectors()
    summary = np.zeros(11)
    assert check_model(summary, models[0], GuardMode.dataset, det).passed
    bad = weight_features(models[0]) * 50.0
    assert not check_model(summary, bad, GuardMode.weights, det).passed
    assert not check_model(summary, bad, GuardMode.both, det).passed


def test_unfitted_detector_rejected():
    with pytest.raises(ValueError):
        check_model(np.zeros(11), None, "dataset", Detectors())
    with pytest.raises(ValueError):
        check_model(None, np.zeros(9), "both", Detectors(dataset=fitted_detectors()[0].dataset))


def test_vectorised_check_matches_single():
    det, models = fitted_detectors(3)
    rng = np.random.default_rng(9)
    summaries = list(rng.normal(size=(len(models), 11)) * 2)
    for mode in GuardMode:
        many = check_models(summaries, models, mode, det)
        for s, m, v in zip(summaries, models, many):
            one = check_model(s, m, mode, det)
            assert (v.passed, v.mode) == (one.passed, one.mode)
            np.testing.assert_allclose([v.dataset_score, v.weight_score], [one.dataset_score, one.weight_score],
                                       rtol=1e-12)


def test_guard_monotonicity():
    det, models = fitted_detectors(5)
    rng = np.random.default_rng(6)
    summaries = list(rng.normal(size=(len(models), 11)) * 1.5)
    passed = {mode: {i for i, v in enumerate(check_models(summaries, models, mode, det)) if v.passed}
              for mode in GuardMode}
    assert passed[GuardMode.both] <= passed[GuardMode.dataset]
    assert passed[GuardMode.both] <= passed[GuardMode.weights]
    assert passed[GuardMode.both] == passed[GuardMode.dataset] & passed[GuardMode.weights]
    assert len(passed[GuardMode.none]) == len(models)


def test_guard_mode_aliases():
    assert GuardMode.parse("DatasetOnly") is GuardMode.dataset
    assert GuardMode.parse("weights_only") is GuardMode.weights
    with pytest.raises(ValueError):
        GuardMode.parse("sometimes")


def test_dataset_summary_layout():
    rows = clean_rows(10)
    s = dataset_summary(rows)
    feats = np.array([r.features() for r in rows])
    assert s.shape == (11,)
    np.testing.assert_allclose(s[:5], feats.mean(axis=0))
    np.testing.assert_allclose(s[5:10], feats.std(axis=0))
    assert s[10] == pytest.approx(np.mean([r.n_a for r in rows]))
    assert weight_features(init_weights(DESK_ARCH, np.random.default_rng(0))).shape == (9,)


# ---------------------------------------------------------------- calibration at desk scale

DESK = SimConfig(area_width_m=1000.0, area_height_m=1000.0, num_vehicles=30)


def test_honest_pass_rate_under_both():
    rates = []
    for seed in range(10):
        world = build_world(DESK, AdversaryConfig(), 16, seed)
        result, _ = run_federation(world, FLSettings(k_max=5, samples_per_vehicle=16), GuardMode.both)
        rates.append(np.mean([g.verdict == "pass" for g in result.guard_log]))
    assert np.mean(rates) >= 0.90, rates


def test_weight_check_catches_poisoning_the_dataset_check_misses():
    # Malicious vehicles train on poisoned rows but share their clean dataset.
    caught = {"dataset": [], "weights": []}
    for seed in range(5):
        world = build_world(DESK, AdversaryConfig(malicious_fraction=0.25), 16, seed)
        bad = {v.pseudonym for v in world.vehicles if v.is_malicious and v.is_fl_participant}
        assert all(v.shared_dataset is not None for v in world.vehicles if v.pseudonym in bad)
        for mode in caught:
            result, _ = run_federation(world, FLSettings(k_max=3, samples_per_vehicle=16), mode)
            caught[mode] += [g.verdict == "fail" for g in result.guard_log if g.vehicle_pseudonym in bad]
    assert np.mean(caught["weights"]) > np.mean(caught["dataset"]) + 0.2
