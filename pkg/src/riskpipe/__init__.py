"""Telematics claim-risk modelling: synthetic data, widening, resampling, boosted trees, stacking, CV."""

__version__ = "0.1.0"

from .core import (ConfigError, DataError, IntegrityError, ParseError, Schema, SynthConfig, TabularSet,
                   label_drivers, label_journeys, load_csv, save_csv, synth_overlap_2d, synth_telematics)
from .evaluate import CvReport, auroc, cv_run, grouped_stratified_kfold, roc_curve, select_features
from .gbt import GbtModel, GbtParams, fit
from .linear import LinearModel, coefficients, fit_logistic
from .sample import LabeledSet, random_over, random_under, smote, tomek_links, tomek_removal
from .stack import (CombinedModel, DriverStackConfig, FeatureSplit, StackModel, fit_combined, fit_driver_stack,
                    make_pipeline)
from .widen import WidenConfig, first_differences, widen

__all__ = [
    "ConfigError",
    "DataError",
    "IntegrityError",
    "ParseError",
    "Schema",
    "SynthConfig",
    "TabularSet",
    "label_drivers",
    "label_journeys",
    "load_csv",
    "save_csv",
    "synth_overlap_2d",
    "synth_telematics",
    "CvReport",
    "auroc",
    "cv_run",
    "grouped_stratified_kfold",
    "roc_curve",
    "select_features",
    "GbtModel",
    "GbtParams",
    "fit",
    "LinearModel",
    "coefficients",
    "fit_logistic",
    "LabeledSet",
    "random_over",
    "random_under",
    "smote",
    "tomek_links",
    "tomek_removal",
    "CombinedModel",
    "DriverStackConfig",
    "FeatureSplit",
    "StackModel",
    "fit_combined",
    "fit_driver_stack",
    "make_pipeline",
    "WidenConfig",
    "first_differences",
    "widen",
]
