from __future__ import annotations

import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import pairwise_auroc

from riskpipe.core import ConfigError, DataError, SynthConfig, TabularSet, synth_telematics
from riskpipe.evaluate import (FPR_GRID, CvReport, FoldError, RocCurve, auroc, cv_run, derive_seed,
                               grouped_stratified_kfold, interpolate_roc, load_roc_csv, mean_roc, roc_curve,
                               select_features)
from riskpipe.gbt import GbtParams
from riskpipe.stack import TelematicsData, make_pipeline

SELECT = GbtParams(n_trees=50, max_depth=3, learning_rate=0.1, colsample=0.5)


def _rows(rng, n_groups, p_pos=0.3, max_size=6):
    sizes = rng.integers(1, max_size + 1, n_groups)
    groups = np.repeat(rng.permutation(n_groups * 3)[:n_groups], sizes)
    g_pos = rng.random(n_groups) < p_pos
    g_pos[0] = True
    labels = np.zeros(len(groups), np.int8)
    starts = np.r_[0, np.cumsum(sizes)[:-1]]
    for s, n, p in zip(starts, sizes, g_pos):
        if p:
            labels[s + rng.integers(0, n)] = 1
    return groups, labels


def _per_fold_positive_groups(fa, groups, labels):
    pos_groups = np.unique(np.asarray(groups)[np.asarray(labels) == 1])
    return np.bincount(fa.fold_of(pos_groups), minlength=fa.k)


class TestFolds:
    def test_one_positive_group_per_fold(self):
        groups = np.arange(20)
        labels = np.r_[np.ones(10), np.zeros(10)]
        fa = grouped_stratified_kfold(groups, labels, k=10, seed=3)
        np.testing.assert_array_equal(_per_fold_positive_groups(fa, groups, labels), np.ones(10))
        np.testing.assert_array_equal(np.bincount(fa.fold), np.full(10, 2))

    def test_singleton_groups_reduce_to_stratified_kfold(self):
        rng = np.random.default_rng(0)
        labels = (rng.random(103) < 0.2).astype(int)
        fa = grouped_stratified_kfold(np.arange(103), labels, k=5, seed=1)
        pos = np.bincount(fa.fold[labels == 1], minlength=5)
        neg = np.bincount(fa.fold[labels == 0], minlength=5)
        assert pos.max() - pos.min() <= 1
        assert np.ptp(pos + neg) <= 1
        assert neg.max() - neg.min() <= 2

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 10))
    def test_invariants(self, seed, k):
        rng = np.random.default_rng(seed)
        groups, labels = _rows(rng, int(rng.integers(k, 60)))
        fa = grouped_stratified_kfold(groups, labels, k, seed)
        # each group id maps to exactly one fold
        assert len(fa.groups) == len(np.unique(groups)) == len(fa.fold)
        seen = np.zeros(len(groups), int)
        for i in range(k):
            train, test = fa.split(groups, i)
            seen[test] += 1
            assert not set(groups[train]) & set(groups[test])
            assert len(train) + len(test) == len(groups)
        np.testing.assert_array_equal(seen, 1)
        assert len(np.unique(fa.fold)) == k
        per = _per_fold_positive_groups(fa, groups, labels)
        assert per.max() - per.min() <= 1

    @pytest.mark.parametrize("n_groups,n_pos,want", [(565, 18, {1, 2}), (5649, 181, {18, 19})])
    def test_full_scale_counts(self, n_groups, n_pos, want):
        labels = np.r_[np.ones(n_pos), np.zeros(n_groups - n_pos)]
        fa = grouped_stratified_kfold(np.arange(n_groups), labels, k=10, seed=0)
        assert set(np.bincount(fa.fold[labels == 1]).tolist()) == want

    def test_deterministic(self):
        groups, labels = _rows(np.random.default_rng(1), 50)
        a = grouped_stratified_kfold(groups, labels, 5, 9)
        b = grouped_stratified_kfold(groups, labels, 5, 9)
        np.testing.assert_array_equal(a.fold, b.fold)

    def test_errors(self):
        with pytest.raises(ConfigError):
            grouped_stratified_kfold([1, 2, 3], [1, 0, 0], k=1)
        with pytest.raises(DataError):
            grouped_stratified_kfold([1, 2, 3], [1, 0, 0], k=4)
        with pytest.raises(DataError):
            grouped_stratified_kfold([1, 2, 3], [0, 0, 0], k=2)
        fa = grouped_stratified_kfold([1, 2, 3], [1, 0, 0], k=2)
        with pytest.raises(DataError):
            fa.fold_of([4])

    def test_derive_seed_independent_paths(self):
        assert derive_seed(1, "fold", 0) == derive_seed(1, "fold", 0)
        assert len({derive_seed(1, "fold", i) for i in range(10)} | {derive_seed(2, "fold", 0)}) == 11
        assert derive_seed(1, "a") != derive_seed(1, "b")


class TestAuroc:
    def test_perfect(self):
        assert auroc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_ties(self):
        assert auroc(np.full(9, 0.4), [0, 1, 1, 0, 0, 1, 0, 0, 0]) == 0.5

    def test_seven_elements(self):
        s = [0.3, 0.7, 0.7, 0.1, 0.5, 0.7, 0.2]
        y = [0, 1, 0, 0, 1, 1, 0]
        assert auroc(s, y) == pairwise_auroc(s, y) == 10 / 12

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 100), st.integers(1, 10))
    def test_matches_pairwise_oracle(self, seed, n, levels):
        rng = np.random.default_rng(seed)
        s = rng.integers(0, levels, n) / levels
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        assert abs(auroc(s, y) - pairwise_auroc(s, y)) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_invariant_under_increasing_transform(self, seed):
        rng = np.random.default_rng(seed)
        s = np.round(rng.normal(size=60), 1)
        y = rng.integers(0, 2, 60)
        y[:2] = [0, 1]
        assert auroc(np.exp(3 * s) - 7, y) == auroc(s, y)

    def test_errors(self):
        with pytest.raises(DataError):
            auroc([0.1, 0.2], [1, 1])
        with pytest.raises(DataError):
            auroc([0.1, np.nan], [1, 0])
        with pytest.raises(DataError):
            auroc([0.1], [1, 0])


class TestRoc:
    def test_perfect_separation_hits_corner(self):
        c = roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert any(f == 0.0 and t == 1.0 for f, t in zip(c.fpr, c.tpr))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 200))
    def test_shape_and_area(self, seed, n):
        rng = np.random.default_rng(seed)
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        c = roc_curve(s, y)
        assert (c.fpr[0], c.tpr[0]) == (0.0, 0.0)
        assert (c.fpr[-1], c.tpr[-1]) == (1.0, 1.0)
        assert np.isinf(c.threshold[0])
        assert (np.diff(c.fpr) >= 0).all() and (np.diff(c.tpr) >= 0).all()
        assert (np.diff(c.threshold) < 0).all()
        assert len(c.fpr) == len(np.unique(s)) + 1
        assert abs(c.area() - auroc(s, y)) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_inverted_labels_mirror_curve(self, seed):
        rng = np.random.default_rng(seed)
        s = np.round(rng.random(40), 1)
        y = rng.integers(0, 2, 40)
        y[:2] = [0, 1]
        a, b = roc_curve(s, y), roc_curve(s, 1 - y)
        np.testing.assert_array_equal(b.fpr, a.tpr)
        np.testing.assert_array_equal(b.tpr, a.fpr)
        np.testing.assert_array_equal(b.threshold, a.threshold)
        assert abs(b.area() - (1 - a.area())) < 1e-12

    def test_interpolation_takes_top_of_vertical_step(self):
        c = RocCurve(np.array([0.0, 0.0, 0.5, 1.0]), np.array([0.0, 0.6, 0.8, 1.0]), np.array([np.inf, 3, 2, 1]))
        t = interpolate_roc(c)
        assert t[0] == 0.6
        assert t[25] == pytest.approx(0.7)
        assert t[-1] == 1.0

    def test_mean_roc_population_std(self):
        a = RocCurve(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.array([np.inf, 0.0]))
        b = RocCurve(np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 1.0]), np.array([np.inf, 1.0, 0.0]))
        m, s = mean_roc([a, b])
        np.testing.assert_allclose(m, (FPR_GRID + 1.0) / 2)
        np.testing.assert_allclose(s, (1.0 - FPR_GRID) / 2)


class TestSelectFeatures:
    def _planted(self, seed, n=2000):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, 10))
        y = (rng.random(n) < 1 / (1 + np.exp(-2 * X[:, 0]))).astype(float)
        return X, y, [f"x{i}" for i in range(10)]

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_informative_first(self, seed):
        X, y, names = self._planted(seed)
        X = X[:, ::-1]
        assert select_features(X, SELECT.replace(seed=seed), 3, labels=y, feature_names=names[::-1])[0] == "x0"

    def test_identity_when_n_equals_count(self):
        X, y, names = self._planted(0, 200)
        assert select_features(X, SELECT, 10, labels=y, feature_names=names) == names

    def test_more_than_available_is_flagged(self):
        X, y, names = self._planted(0, 200)
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            assert select_features(X, SELECT, 12, labels=y, feature_names=names) == names
        assert any("only 10" in str(x.message) for x in w)

    def test_requires_feature_subsampling(self):
        X, y, names = self._planted(0, 200)
        with pytest.raises(ConfigError):
            select_features(X, SELECT.replace(colsample=1.0), 3, labels=y)

    def test_deterministic(self):
        X, y, names = self._planted(4, 500)
        a = select_features(X, SELECT.replace(seed=7), 4, labels=y, feature_names=names)
        assert a == select_features(X, SELECT.replace(seed=7), 4, labels=y, feature_names=names)

    def test_tabular_input(self):
        s = synth_telematics(SynthConfig(n_drivers=300, signal=3.0, claim_rate=0.2, seed=0))
        top = select_features(s.drivers, SELECT, 3)
        assert len(top) == 3 and set(top) <= set(s.drivers.columns)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_duplicated_informative_column(self, seed):
        from riskpipe.gbt import fit

        X, y, names = self._planted(seed)
        params = SELECT.replace(seed=seed)
        X2 = np.column_stack([X, X[:, 0]])
        top = select_features(X2, params, 2, labels=y, feature_names=names + ["x0_copy"])
        assert len({"x0", "x0_copy"} & set(top)) == 1

        single, double = fit(X, y, params), fit(X2, y, params)
        g1, g2 = single.importance("gain"), double.importance("gain")
        w1, w2 = single.importance("weight"), double.importance("weight")
        share1 = g1[0] / sum(g1.values())
        for f in (0, 10):
            assert g2.get(f, 0.0) / sum(g2.values()) < share1
        total1 = g1[0] * w1[0]
        total2 = sum(g2.get(f, 0.0) * w2.get(f, 0.0) for f in (0, 10))
        assert abs(total2 / total1 - 1.0) <= 0.2


class TestReport:
    def _report(self):
        s = synth_telematics(SynthConfig(n_drivers=300, mean_journeys=10, signal=2.0, claim_rate=0.1, seed=2))
        return cv_run("driver-stack", s.drivers, k=5, seed=3)

    def test_aggregates(self):
        r = self._report()
        assert r.mean == pytest.approx(np.mean(r.fold_auroc))
        assert r.std == pytest.approx(np.std(r.fold_auroc))
        assert set(r.base_auroc) == {"exposure", "behavior"}
        assert sum(n for n, _ in r.fold_sizes) == 300
        for c, a in zip(r.fold_roc, r.fold_auroc):
            assert abs(c.area() - a) < 1e-12

    def test_json_round_trip(self, tmp_path):
        r = self._report()
        r.save(tmp_path / "r.json")
        back = CvReport.load(tmp_path / "r.json")
        assert back.to_json() == r.to_json()
        d = json.loads(r.to_json())
        assert d["mean_auroc"] == pytest.approx(np.mean(d["fold_auroc"]))
        assert len(d["mean_roc"]["fpr"]) == 101
        assert d["fold_roc"][0]["threshold"][0] is None

    def test_csv_round_trip(self, tmp_path):
        r = self._report()
        r.save_roc_csv(tmp_path / "roc.csv")
        curves, (mf, mt) = load_roc_csv(tmp_path / "roc.csv")
        assert sorted(curves) == list(range(5))
        for i, c in enumerate(r.fold_roc):
            for a, b in zip(curves[i], c):
                np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(mf, FPR_GRID)
        np.testing.assert_array_equal(mt, r.mean_curve()[0])

    def test_rejects_foreign_json(self):
        with pytest.raises(DataError):
            CvReport.from_dict({"format": "other"})


class TestCvRun:
    @pytest.fixture(scope="class")
    @staticmethod
    def suite():
        return synth_telematics(SynthConfig(n_drivers=200, mean_journeys=15, signal=2.0, claim_rate=0.15,
                                            event_columns=(), seed=4))

    @pytest.mark.parametrize("name", ["logistic", "gbt", "driver-stack", "journey-gbt", "combined"])
    def test_no_fitting_step_sees_test_groups(self, suite, name):
        pipe = make_pipeline(name, inner_k=3)
        data = TelematicsData(suite.journeys, suite.drivers)
        events: list = []
        report = cv_run(pipe, data if pipe.task == "journey" else suite.drivers, k=4, seed=1, audit=events)
        rows = suite.journeys if pipe.task == "journey" else suite.drivers
        fa = grouped_stratified_kfold(rows.groups, rows.labels, 4, 1)
        assert {e.fold for e in events} == set(range(4))
        for e in events:
            _, test = fa.split(rows.groups, e.fold)
            assert not e.groups & set(rows.groups[test].tolist()), (e.stage, e.fold)
        assert len(report.fold_auroc) == 4

    def test_audit_covers_every_fitting_step(self, suite):
        events: list = []
        cv_run(make_pipeline("driver-stack", inner_k=3), suite.drivers, k=3, seed=0, audit=events)
        stages = {e.stage for e in events}
        assert {"resample:behavior", "fit:behavior", "fit:exposure", "fit:meta"} <= stages

    def test_same_seed_same_bytes(self, suite):
        a = cv_run("driver-stack", suite.drivers, k=4, seed=5)
        b = cv_run("driver-stack", suite.drivers, k=4, seed=5, threads=4)
        assert a.to_json() == b.to_json()
        c = cv_run("driver-stack", suite.drivers, k=4, seed=6)
        assert c.to_json() != a.to_json()

    def test_journey_threads_deterministic(self, suite):
        data = TelematicsData(suite.journeys, suite.drivers)
        a = cv_run("journey-gbt", data, k=3, seed=2, threads=1)
        b = cv_run("journey-gbt", data, k=3, seed=2, threads=3)
        assert a.to_json() == b.to_json()

    def test_fold_error_carries_index(self):
        t = TabularSet(("x",), np.arange(6.0)[:, None], np.zeros((6, 1), bool), np.arange(6), np.zeros(6),
                       [1, 0, 0, 0, 0, 0])
        with pytest.raises(FoldError) as exc:
            cv_run("gbt", t, k=2, seed=0)
        assert exc.value.fold in (0, 1)
        assert f"fold {exc.value.fold}" in str(exc.value)

    def test_unknown_pipeline(self, suite):
        with pytest.raises(ConfigError):
            cv_run("svm", suite.drivers, k=3)

    def test_label_shuffled_null(self):
        # independent permutations; a single one has sd ~0.045 at this size
        s = synth_telematics(SynthConfig(n_drivers=2000, mean_journeys=5, signal=3.0, claim_rate=0.2, seed=8))
        for name in ("logistic", "gbt", "driver-stack"):
            means = []
            for p in range(5):
                d = s.drivers.with_labels(np.random.default_rng(p).permutation(s.drivers.labels))
                means.append(cv_run(name, d, k=5, seed=p).mean)
            assert 0.45 <= np.mean(means) <= 0.55, (name, means)

    @pytest.mark.parametrize("name", ["logistic", "driver-stack"])
    def test_maximal_signal(self, name):
        s = synth_telematics(SynthConfig(n_drivers=1000, mean_journeys=20, signal=30.0, event_columns=(), seed=0))
        assert cv_run(name, s.drivers, k=10, seed=0).mean >= 0.95
