from __future__ import annotations

import logging

import numpy as np
import pytest
from scipy.stats import spearmanr

from riskpipe.core import (BEHAVIOR_COLUMNS, EXPOSURE_COLUMNS, ConfigError, DataError, SynthConfig, TabularSet,
                           synth_telematics)
from riskpipe.evaluate import auroc, cv_run
from riskpipe.stack import (DRIVER_GBT, META_FEATURES, BaseSpec, CombinedConfig, DriverStackConfig,
                            DriverStackPipeline, FeatureSplit, SamplerConfig, TelematicsData, fit_combined,
                            fit_driver_stack, fit_journey_model, make_pipeline)
from riskpipe.serialize import model_from_json, model_to_json


def _drivers(n=300, claim_rate=0.15, seed=0, **kw):
    return synth_telematics(SynthConfig(n_drivers=n, mean_journeys=8, claim_rate=claim_rate, event_columns=(),
                                        seed=seed, **kw)).drivers


def _shuffle_groups(t: TabularSet, seed: int) -> TabularSet:
    """Reassign whole rows to other groups: features and labels stay paired."""
    perm = np.random.default_rng(seed).permutation(t.n_rows)
    return TabularSet(t.columns, t.values, t.mask, t.groups[perm], t.order, t.labels)


class TestFeatureSplit:
    def test_default_covers_driver_table(self):
        FeatureSplit().validate(_drivers(50).columns)

    def test_overlap(self):
        with pytest.raises(ConfigError):
            FeatureSplit(exposure=("overall",)).validate()

    def test_uncovered_column(self):
        with pytest.raises(ConfigError):
            FeatureSplit(behavior=BEHAVIOR_COLUMNS[1:]).validate(_drivers(50).columns)

    def test_missing_column(self):
        with pytest.raises(DataError):
            FeatureSplit(exposure=EXPOSURE_COLUMNS + ("nope",)).validate(_drivers(50).columns)


class TestDriverStack:
    @pytest.fixture(scope="class")
    @staticmethod
    def drivers():
        return _drivers()

    @pytest.fixture(scope="class")
    @staticmethod
    def model(drivers):
        return fit_driver_stack(drivers, DriverStackConfig(inner_k=3), seed=1)

    def test_meta_arity_matches_bases(self, model):
        assert model.base_names == ["exposure", "behavior"]
        assert len(model.meta.coef) == 2
        assert model.oof.shape == (300, 2)

    def test_resampling_only_on_behavior_base(self, drivers):
        stages: list[str] = []
        fit_driver_stack(drivers, DriverStackConfig(inner_k=3), seed=0, audit=lambda s, g: stages.append(s))
        assert stages.count("resample:behavior") == 4
        assert not any(s == "resample:exposure" for s in stages)
        assert stages.count("fit:meta") == 1

    def test_oof_scores_come_from_held_out_models(self, drivers, model):
        # refit bases score their own training rows more optimistically than held-out bases
        refit = model.base_scores(drivers)
        for j in range(2):
            assert auroc(refit[:, j], drivers.labels) >= auroc(model.oof[:, j], drivers.labels)

    def test_same_seed_same_bytes(self, drivers, model):
        again = fit_driver_stack(drivers, DriverStackConfig(inner_k=3), seed=1)
        assert model_to_json(again) == model_to_json(model)
        other = fit_driver_stack(drivers, DriverStackConfig(inner_k=3), seed=2)
        assert model_to_json(other) != model_to_json(model)

    def test_identical_base_scores_give_zero_meta_weights(self, drivers):
        flat = TabularSet(drivers.columns, np.ones_like(drivers.values), drivers.mask, drivers.groups,
                          drivers.order, drivers.labels)
        m = fit_driver_stack(flat, DriverStackConfig(inner_k=3), seed=0)
        assert np.ptp(m.oof, axis=0).max() < 1e-12
        np.testing.assert_allclose(m.meta.full_coef(), 0.0, atol=1e-9)
        prior = drivers.labels.mean()
        np.testing.assert_allclose(m.predict(flat), prior, atol=1e-3)

    def test_single_informative_base_keeps_its_ranking(self, drivers):
        cfg = DriverStackConfig(bases=(BaseSpec("only", ("overall", "miles_driven")),), inner_k=3)
        m = fit_driver_stack(drivers, cfg, seed=0)
        assert m.meta.coef[0] > 0
        base = m.base_scores(drivers)[:, 0]
        assert spearmanr(base, m.predict(drivers)).statistic == pytest.approx(1.0, abs=1e-12)

    def test_single_row(self, drivers, model):
        one = model.predict(drivers.take([5]))
        assert one.shape == (1,)
        assert 0.0 < one[0] < 1.0
        row = drivers.matrix(model.input_columns)[5]
        np.testing.assert_array_equal(model.predict(row), one)

    def test_permutation_equivariance(self, drivers, model):
        perm = np.random.default_rng(0).permutation(drivers.n_rows)
        np.testing.assert_array_equal(model.predict(drivers.take(perm)), model.predict(drivers)[perm])

    def test_arity_mismatch(self, drivers, model):
        with pytest.raises(DataError):
            model.predict(drivers.matrix(model.input_columns)[:, :-1])

    def test_single_class_inner_fold(self, drivers):
        labels = np.zeros(drivers.n_rows, np.int8)
        labels[0] = 1
        with pytest.raises(DataError, match="fewer folds"):
            fit_driver_stack(drivers.with_labels(labels), DriverStackConfig(inner_k=3))

    def test_invalid_config(self, drivers):
        for cfg in (DriverStackConfig(bases=()), DriverStackConfig(inner_k=1), DriverStackConfig(meta_l2=-1.0),
                    DriverStackConfig(meta_input="probit"),
                    DriverStackConfig(bases=(BaseSpec("a", ("overall",)), BaseSpec("a", ("speed",))))):
            with pytest.raises(ConfigError):
                fit_driver_stack(drivers, cfg)

    def test_unknown_base_column(self, drivers):
        with pytest.raises(DataError):
            fit_driver_stack(drivers, DriverStackConfig(bases=(BaseSpec("a", ("nope",)),)))

    def test_smote_neighbour_count_clamped(self, drivers, caplog):
        labels = np.zeros(drivers.n_rows, np.int8)
        labels[:6] = 1
        cfg = DriverStackConfig.from_split(FeatureSplit(), DRIVER_GBT, SamplerConfig(k=5), inner_k=3)
        with caplog.at_level(logging.WARNING, logger="riskpipe.stack"):
            fit_driver_stack(drivers.with_labels(labels), cfg)
        assert any("SMOTE k reduced" in r.getMessage() for r in caplog.records)

    def test_json_round_trip(self, drivers, model):
        text = model_to_json(model)
        back = model_from_json(text)
        np.testing.assert_array_equal(back.predict(drivers), model.predict(drivers))
        assert model_to_json(back) == text


class TestDriverStackCv:
    @pytest.mark.parametrize("seed", range(5))
    def test_stack_not_worse_than_best_base(self, seed):
        d = _drivers(1000, 0.03, seed)
        stack = cv_run("driver-stack", d, k=5, seed=seed).mean
        bases = [cv_run(name, d, k=5, seed=seed).mean for name in ("gbt-exposure", "gbt-behavior")]
        assert stack >= max(bases) - 0.02

    def test_rank_meta_input_matches_logit(self):
        diffs = []
        for seed in range(5):
            d = _drivers(1000, 0.15, seed)
            logit = cv_run(DriverStackPipeline(DriverStackConfig()), d, k=5, seed=seed).mean
            rank = cv_run(DriverStackPipeline(DriverStackConfig(meta_input="rank")), d, k=5, seed=seed).mean
            diffs.append(rank - logit)
        assert abs(np.mean(diffs)) <= 0.01


class TestJourneyModel:
    @pytest.fixture(scope="class")
    @staticmethod
    def suite():
        return synth_telematics(SynthConfig(n_drivers=120, mean_journeys=10, claim_rate=0.4, event_columns=(),
                                            seed=3))

    def test_keeps_top_features(self, suite):
        m = fit_journey_model(suite.journeys, seed=0)
        assert len(m.features) == 24
        assert m.predict(suite.journeys).shape == (suite.journeys.n_rows,)

    def test_json_round_trip(self, suite):
        m = fit_journey_model(suite.journeys, seed=0)
        back = model_from_json(model_to_json(m))
        np.testing.assert_array_equal(back.predict(suite.journeys), m.predict(suite.journeys))


class TestCombined:
    @pytest.fixture(scope="class")
    @staticmethod
    def suite():
        return synth_telematics(SynthConfig(n_drivers=120, mean_journeys=10, claim_rate=0.4, event_columns=(),
                                            seed=3))

    @pytest.fixture(scope="class")
    @staticmethod
    def model(suite):
        return fit_combined(suite.journeys, suite.drivers, CombinedConfig(inner_k=3), seed=0)

    def test_meta_sees_two_scores(self, model):
        assert model.meta.feature_names == META_FEATURES
        assert model.meta.n_features == 2

    def test_unresolvable_group(self, suite, model):
        missing = suite.drivers.take(np.arange(1, suite.drivers.n_rows))
        with pytest.raises(DataError, match="without a driver row"):
            fit_combined(suite.journeys, missing, CombinedConfig(inner_k=3))
        with pytest.raises(DataError, match="without a driver row"):
            model.predict(TelematicsData(suite.journeys, missing))

    def test_needs_driver_table(self, suite):
        with pytest.raises(DataError):
            make_pipeline("combined").fit(TelematicsData(suite.journeys), 0)

    def test_json_round_trip(self, suite, model):
        data = TelematicsData(suite.journeys, suite.drivers)
        text = model_to_json(model)
        back = model_from_json(text)
        np.testing.assert_array_equal(back.predict(data), model.predict(data))
        assert model_to_json(back) == text

    def test_deterministic(self, suite, model):
        again = fit_combined(suite.journeys, suite.drivers, CombinedConfig(inner_k=3), seed=0)
        assert model_to_json(again) == model_to_json(model)

    @pytest.mark.parametrize("seed", range(3))
    def test_strong_journey_signal_dominates_meta_gain(self, seed):
        s = synth_telematics(SynthConfig(n_drivers=400, mean_journeys=15, claim_rate=0.3, journey_weight=3.0,
                                         event_columns=(), seed=seed))
        m = fit_combined(s.journeys, s.drivers, CombinedConfig(inner_k=3), seed=seed)
        gain = m.meta.importance("gain")
        assert gain.get(1, 0.0) > gain.get(0, 0.0)


class TestCombinedCv:
    @pytest.fixture(scope="class")
    @staticmethod
    def reports():
        s = synth_telematics(SynthConfig(n_drivers=1000, mean_journeys=15, claim_rate=0.3, event_columns=(), seed=1))
        out = {}
        for key, name, drivers in (("journey", "journey-gbt", s.drivers), ("combined", "combined", s.drivers),
                                   ("shuffled", "combined", _shuffle_groups(s.drivers, 1))):
            out[key] = cv_run(make_pipeline(name, inner_k=3), TelematicsData(s.journeys, drivers), k=5, seed=1,
                              threads=4)
        return out

    def test_combined_not_worse_than_journey_only(self, reports):
        assert reports["combined"].mean >= reports["journey"].mean

    def test_shuffled_driver_scores_add_nothing(self, reports):
        assert abs(reports["shuffled"].mean - reports["journey"].mean) <= 0.02

    def test_journey_base_equals_journey_pipeline(self, reports):
        np.testing.assert_array_equal(reports["combined"].base_auroc["journey"], reports["journey"].fold_auroc)
