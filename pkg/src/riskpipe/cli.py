"""Command-line interface: ``riskpipe <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import (DRIVER_SCHEMA, JOURNEY_SCHEMA, ConfigError, DataError, SynthConfig, TabularSet,
                   label_drivers, label_journeys, load_claims, load_csv, save_claims, save_csv,
                   synth_overlap_2d, synth_telematics, to_plain)
from .evaluate import cv_run, select_features
from .gbt import GbtParams
from .linear import ConvergenceError, coefficients
from .plot import roc_svg, scatter_svg
from .sample import METRICS, SAMPLERS, LabeledSet, resample, save_labeled_csv, smote, tomek_removal
from .serialize import save_model
from .stack import (DRIVER_GBT, JOURNEY_GBT, JOURNEY_SELECT_GBT, FeatureSplit, JourneyConfig, SamplerConfig,
                    TelematicsData, make_pipeline)
from .widen import WidenConfig, widen

log = logging.getLogger("riskpipe")

DRIVER_PIPELINES = {"logistic": "logistic", "gbt": "gbt", "gbt-exposure": "gbt-exposure",
                    "gbt-behavior": "gbt-behavior", "stack": "driver-stack", "driver-stack": "driver-stack"}
JOURNEY_PIPELINES = {"gbt": "journey-gbt", "journey-gbt": "journey-gbt", "combined": "combined"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


# ---------------------------------------------------------------- argument groups

def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--config", metavar="JSON", default=None,
                   help="JSON file of option defaults (keys are option names with '_'); flags override it")
    g.add_argument("--seed", type=int, default=None,
                   help="random seed; falls back to the config file, then $RISKPIPE_SEED, then 0")
    g.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    g.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="logging verbosity (stderr)")


def _synth_args(p: argparse.ArgumentParser) -> None:
    d = SynthConfig()
    g = p.add_argument_group("synthetic data")
    g.add_argument("--drivers", type=int, default=d.n_drivers, help="number of drivers")
    g.add_argument("--mean-journeys", type=float, default=d.mean_journeys, help="mean journeys per driver")
    g.add_argument("--claim-rate", type=float, default=round(d.claim_rate, 6), help="driver claim rate")
    g.add_argument("--signal", type=float, default=d.signal, help="planted signal strength (0 = none)")
    g.add_argument("--events", action=argparse.BooleanOptionalAction, default=True,
                   help="include per-journey event-count columns")


def _gbt_args(p: argparse.ArgumentParser) -> None:
    d = DRIVER_GBT
    g = p.add_argument_group("driver-level GBT")
    g.add_argument("--trees", type=int, default=d.n_trees, help="boosting rounds")
    g.add_argument("--depth", type=int, default=d.max_depth, help="maximum tree depth")
    g.add_argument("--learning-rate", type=float, default=d.learning_rate, help="shrinkage")
    g.add_argument("--reg-lambda", type=float, default=d.reg_lambda, help="L2 leaf penalty")
    g.add_argument("--gamma", type=float, default=d.gamma, help="minimum split gain")
    g.add_argument("--colsample", type=float, default=d.colsample, help="per-tree feature fraction")
    g.add_argument("--pos-weight", type=float, default=d.pos_weight, help="positive-class weight")
    g.add_argument("--min-child-weight", type=float, default=d.min_child_weight, help="minimum child hessian")


def _sampler_args(p: argparse.ArgumentParser, k_flag: str = "--k") -> None:
    g = p.add_argument_group("resampling")
    g.add_argument("--method", default="smote+tomek", choices=SAMPLERS, help="resampling method")
    g.add_argument("--ratio", type=float, default=1 / 3, help="target minority:majority ratio")
    g.add_argument(k_flag, dest="smote_k", type=int, default=5, help="SMOTE neighbours")
    g.add_argument("--metric", default="euclidean", choices=sorted(METRICS), help="distance metric")


def _widen_args(p: argparse.ArgumentParser) -> None:
    d = WidenConfig()
    g = p.add_argument_group("widening")
    g.add_argument("--lags", type=int, default=d.lags, help="preceding journeys appended")
    g.add_argument("--passes", type=int, default=d.passes, help="difference passes (0, 1 or 2)")
    g.add_argument("--prior-labels", action=argparse.BooleanOptionalAction, default=d.include_labels,
                   help="append labels of preceding journeys")


def _journey_args(p: argparse.ArgumentParser) -> None:
    _widen_args(p)
    g = p.add_argument_group("journey model")
    g.add_argument("--journey-trees", type=int, default=JOURNEY_GBT.n_trees, help="journey GBT rounds")
    g.add_argument("--journey-depth", type=int, default=JOURNEY_GBT.max_depth, help="journey GBT depth")
    g.add_argument("--journey-learning-rate", type=float, default=JOURNEY_GBT.learning_rate,
                   help="journey GBT shrinkage")
    g.add_argument("--journey-colsample", type=float, default=JOURNEY_GBT.colsample,
                   help="journey GBT feature fraction")
    g.add_argument("--top-n", type=int, default=JourneyConfig().top_n,
                   help="widened features kept by gain-based selection (0 keeps all)")
    g.add_argument("--select-trees", type=int, default=JOURNEY_SELECT_GBT.n_trees, help="selection GBT rounds")
    g.add_argument("--select-colsample", type=float, default=JOURNEY_SELECT_GBT.colsample,
                   help="selection GBT feature fraction (must be < 1)")


def _inputs(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("inputs (synthetic data is generated when no table is given)")
    g.add_argument("--journeys", metavar="CSV", default=None, help="journey table")
    g.add_argument("--drivers-csv", metavar="CSV", default=None, help="driver table (one row per driver)")
    g.add_argument("--claims", metavar="CSV", default=None, help="claim events; relabels the tables")


def build_parser() -> Parser:
    parser = Parser(prog="riskpipe", formatter_class=Formatter, allow_abbrev=False,
                    description="Telematics claim-risk pipeline: synthetic data, widening, resampling, "
                                "boosted trees, stacking and grouped cross-validation.")
    parser.add_argument("--version", action="version", version=f"riskpipe {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=Formatter, allow_abbrev=False)
        _common(p)
        return p

    p = cmd("synth", "generate synthetic drivers, journeys and claim events")
    _synth_args(p)
    p.add_argument("--out", default=".", help="output directory")

    p = cmd("widen", "append difference and lag columns to a journey table")
    p.add_argument("--input", required=True, help="journey CSV")
    p.add_argument("--out", default="wide.csv", help="output CSV")
    _widen_args(p)

    p = cmd("sample", "resample a driver table for class balance")
    p.add_argument("--input", required=True, help="driver CSV")
    p.add_argument("--columns", default="behavior",
                   help="comma-separated feature columns, or 'behavior' / 'exposure' / 'all'")
    p.add_argument("--out", default="sampled.csv", help="output CSV (origin,<features>,label)")
    _sampler_args(p)

    for name, help_ in (("train", "fit a pipeline on all rows and save the model"),
                        ("cv", "grouped stratified k-fold evaluation of a pipeline")):
        p = cmd(name, help_)
        p.add_argument("--task", default="driver", choices=["driver", "journey"], help="prediction target")
        p.add_argument("--pipeline", default="stack",
                       help=f"driver: {', '.join(DRIVER_PIPELINES)}; journey: {', '.join(JOURNEY_PIPELINES)}")
        if name == "cv":
            p.add_argument("--k", type=int, default=10, help="folds")
        p.add_argument("--inner-k", type=int, default=0, help="inner folds for stacking (0 = pipeline default)")
        p.add_argument("--meta-l2", type=float, default=1.0, help="L2 strength of logistic models")
        p.add_argument("--out", default="." if name == "cv" else "model.json",
                       help="output directory" if name == "cv" else "model JSON path")
        _inputs(p)
        _synth_args(p)
        _gbt_args(p)
        _sampler_args(p, "--smote-k")
        _journey_args(p)

    p = cmd("select-features", "rank widened journey features by mean split gain")
    p.add_argument("--top", type=int, default=24, help="number of features to keep")
    p.add_argument("--out", default="features.json", help="output JSON list")
    p.add_argument("--no-widen", dest="widen", action="store_false", help="rank the raw columns instead")
    _inputs(p)
    _synth_args(p)
    _widen_args(p)
    g = p.add_argument_group("selection GBT")
    g.add_argument("--trees", type=int, default=JOURNEY_SELECT_GBT.n_trees, help="boosting rounds")
    g.add_argument("--depth", type=int, default=JOURNEY_SELECT_GBT.max_depth, help="maximum depth")
    g.add_argument("--colsample", type=float, default=JOURNEY_SELECT_GBT.colsample,
                   help="per-tree feature fraction (must be < 1)")
    g.add_argument("--learning-rate", type=float, default=JOURNEY_SELECT_GBT.learning_rate, help="shrinkage")

    p = cmd("demo-imbalance", "plot class imbalance, class overlap and resampling on 2-D data")
    p.add_argument("--n", type=int, default=1000, help="points per panel")
    p.add_argument("--out", default=".", help="output directory")
    _sampler_args(p)
    return parser


# ---------------------------------------------------------------- helpers

def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _suggest(p: argparse.ArgumentParser, unknown: list[str]) -> str:
    opts = [o for a in p._actions for o in a.option_strings]
    hints = []
    for u in unknown:
        if u.startswith("-"):
            close = difflib.get_close_matches(u.split("=")[0], opts, n=1)
            if close:
                hints.append(f"{u} (did you mean {close[0]}?)")
                continue
        hints.append(u)
    return "unrecognized arguments: " + " ".join(hints)


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args, unknown = parser.parse_known_args(argv)
    sub = _subparser(parser, args.command)
    if unknown:
        raise UsageError(f"riskpipe {args.command}: {_suggest(sub, unknown)}")
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        known = {a.dest for a in sub._actions}
        bad = sorted(set(cfg) - known)
        if bad:
            hints = {b: difflib.get_close_matches(b, known, n=1) for b in bad}
            raise UsageError("unknown config keys: " + ", ".join(
                f"{b}" + (f" (did you mean {h[0]}?)" if h else "") for b, h in hints.items()))
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    if args.seed is None:
        env = os.environ.get("RISKPIPE_SEED")
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"RISKPIPE_SEED must be an integer, got {env!r}") from None
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args


def _synth_config(a) -> SynthConfig:
    events = SynthConfig().event_columns if a.events else ()
    return SynthConfig(n_drivers=a.drivers, mean_journeys=a.mean_journeys, claim_rate=a.claim_rate,
                       signal=a.signal, event_columns=events, seed=a.seed)


def _gbt_params(a) -> GbtParams:
    return GbtParams(n_trees=a.trees, max_depth=a.depth, learning_rate=a.learning_rate, reg_lambda=a.reg_lambda,
                     gamma=a.gamma, colsample=a.colsample, pos_weight=a.pos_weight,
                     min_child_weight=a.min_child_weight)


def _widen_config(a) -> WidenConfig:
    return WidenConfig(lags=a.lags, include_labels=a.prior_labels, passes=a.passes)


def _journey_config(a) -> JourneyConfig:
    params = JOURNEY_GBT.replace(n_trees=a.journey_trees, max_depth=a.journey_depth,
                                 learning_rate=a.journey_learning_rate, colsample=a.journey_colsample)
    select = JOURNEY_SELECT_GBT.replace(n_trees=a.select_trees, colsample=a.select_colsample)
    return JourneyConfig(widen=_widen_config(a), select_params=select, top_n=a.top_n, params=params)


def _load_data(a) -> TelematicsData:
    """Tables from files, or synthetic tables when none are given."""
    if a.journeys is None and a.drivers_csv is None:
        cfg = _synth_config(a)
        syn = synth_telematics(cfg)
        log.info("generated synthetic data: %d drivers, %d journeys, %d claims",
                 syn.drivers.n_rows, syn.journeys.n_rows, len(syn.claims))
        return TelematicsData(syn.journeys, syn.drivers)
    journeys = load_csv(a.journeys, JOURNEY_SCHEMA) if a.journeys else None
    drivers = load_csv(a.drivers_csv, DRIVER_SCHEMA) if a.drivers_csv else None
    if a.claims:
        claims = load_claims(a.claims)
        if journeys is not None:
            journeys = journeys.with_labels(label_journeys(journeys, claims))
        if drivers is not None:
            ref = journeys if journeys is not None else drivers
            lab = label_drivers(ref, claims)
            drivers = drivers.with_labels([lab.get(int(g), 0) for g in drivers.groups])
    return TelematicsData(journeys, drivers)


def _pipeline(a):
    table = DRIVER_PIPELINES if a.task == "driver" else JOURNEY_PIPELINES
    if a.pipeline not in table:
        close = difflib.get_close_matches(a.pipeline, table, n=1)
        raise UsageError(f"unknown {a.task} pipeline {a.pipeline!r}; choose from {', '.join(table)}"
                         + (f" (did you mean {close[0]}?)" if close else ""))
    sampler = SamplerConfig(a.method, a.ratio, a.smote_k, a.metric)
    return make_pipeline(table[a.pipeline], gbt=_gbt_params(a), sampler=sampler, split=FeatureSplit(),
                         journey=_journey_config(a), meta_l2=a.meta_l2, inner_k=a.inner_k or None)


def _task_data(a, pipe, data: TelematicsData):
    if pipe.task == "driver":
        if data.drivers is None:
            raise UsageError("driver tasks need --drivers-csv (or no inputs for synthetic data)")
        return data.drivers
    if data.journeys is None:
        raise UsageError("journey tasks need --journeys")
    if pipe.name == "combined" and data.drivers is None:
        raise UsageError("the combined pipeline needs --journeys and --drivers-csv")
    return data


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_synth(a) -> None:
    cfg = _synth_config(a)
    syn = synth_telematics(cfg)
    out = _outdir(a.out)
    save_csv(syn.journeys, out / "journeys.csv", JOURNEY_SCHEMA)
    save_csv(syn.drivers, out / "drivers.csv", DRIVER_SCHEMA)
    save_claims(syn.claims, out / "claims.csv")
    print(f"wrote {syn.drivers.n_rows} drivers, {syn.journeys.n_rows} journeys, {len(syn.claims)} claims to {out}")


def cmd_widen(a) -> None:
    data = load_csv(a.input, JOURNEY_SCHEMA)
    wide = widen(data, _widen_config(a))
    save_csv(wide, a.out, JOURNEY_SCHEMA)
    print(f"widened {len(data.columns)} -> {len(wide.columns)} columns over {wide.n_rows} rows: {a.out}")


def _columns(spec: str, data: TabularSet) -> list[str]:
    split = FeatureSplit()
    named = {"behavior": list(split.behavior), "exposure": list(split.exposure), "all": list(data.columns)}
    return named.get(spec) or [c.strip() for c in spec.split(",") if c.strip()]


def cmd_sample(a) -> None:
    data = load_csv(a.input, DRIVER_SCHEMA)
    cols = _columns(a.columns, data)
    X = data.matrix(cols)
    if np.isnan(X).any():
        raise DataError("resampling needs fully observed columns")
    before = LabeledSet(X, data.labels, a.metric)
    after = resample(before, a.method, a.ratio, a.smote_k, a.seed)
    save_labeled_csv(after, a.out, cols, origin_ids=data.groups)
    n0, n1 = before.counts()
    m0, m1 = after.counts()
    print(f"{a.method}: (neg, pos) ({n0}, {n1}) -> ({m0}, {m1}); wrote {a.out}")


def cmd_train(a) -> None:
    pipe = _pipeline(a)
    data = _task_data(a, pipe, _load_data(a))
    model = pipe.fit(data, a.seed)
    fitted = getattr(model, "model", model)
    save_model(fitted if pipe.name in ("logistic", "gbt", "gbt-exposure", "gbt-behavior") else model, a.out,
               meta={"pipeline": pipe.describe(), "seed": a.seed})
    if pipe.name == "logistic":
        for name, v in coefficients(fitted, top=5):
            print(f"{name:28s} {v:+.4f}")
    print(f"saved {pipe.name} model to {a.out}")


def cmd_cv(a) -> None:
    pipe = _pipeline(a)
    data = _task_data(a, pipe, _load_data(a))
    report = cv_run(pipe, data, a.k, a.seed, threads=a.threads)
    out = _outdir(a.out)
    report.save(out / "cv_report.json")
    report.save_roc_csv(out / "roc.csv")
    with open(out / "roc.svg", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(roc_svg(report))
    print(f"{pipe.name}: mean AUROC {report.mean:.4f} ± {report.std:.4f} over {a.k} folds")
    for name, vals in sorted(report.base_auroc.items()):
        print(f"  base {name}: {np.mean(vals):.4f}")
    print(f"wrote {out / 'cv_report.json'}, {out / 'roc.csv'}, {out / 'roc.svg'}")


def cmd_select_features(a) -> None:
    data = _load_data(a)
    if data.journeys is None:
        raise UsageError("select-features needs --journeys (or no inputs for synthetic data)")
    table = widen(data.journeys, _widen_config(a)) if a.widen else data.journeys
    params = JOURNEY_SELECT_GBT.replace(n_trees=a.trees, max_depth=a.depth, colsample=a.colsample,
                                        learning_rate=a.learning_rate, seed=a.seed)
    names = select_features(table, params, a.top)
    _write_json(Path(a.out), names)
    for n in names:
        print(n)


def cmd_demo_imbalance(a) -> None:
    out = _outdir(a.out)
    summary = {"imbalance": [], "overlap": [], "resampling": {}}
    panels = []
    for ratio in (0.5, 0.2, 0.05):
        d = synth_overlap_2d(a.n, ratio, 0.5, seed=a.seed)
        panels.append((f"positive share {ratio:g}", d.values, d.labels))
        summary["imbalance"].append({"ratio": ratio, "positives": int(d.labels.sum()), "n": d.n_rows})
    with open(out / "imbalance.svg", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(scatter_svg(panels))
    panels = []
    for overlap in (0.0, 0.6, 1.0):
        d = synth_overlap_2d(a.n, 0.5, overlap, seed=a.seed)
        panels.append((f"overlap {overlap:g}", d.values, d.labels))
        summary["overlap"].append({"overlap": overlap, "n": d.n_rows})
    with open(out / "overlap.svg", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(scatter_svg(panels))
    d = synth_overlap_2d(a.n, 0.1, 0.6, seed=a.seed)
    base = LabeledSet(d.values, d.labels, a.metric)
    steps = [("original", base)]
    if a.method in ("smote", "smote+tomek"):
        sm = smote(base, a.ratio, a.smote_k, a.seed)
        steps.append(("SMOTE", sm))
        if a.method == "smote+tomek":
            steps.append(("SMOTE + Tomek", tomek_removal(sm)))
    else:
        steps.append((a.method, resample(base, a.method, a.ratio, a.smote_k, a.seed)))
    for name, s in steps:
        n0, n1 = s.counts()
        summary["resampling"][name] = {"negatives": n0, "positives": n1}
    with open(out / "resampling.svg", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(scatter_svg([(n, s.X, s.y) for n, s in steps]))
    _write_json(out / "demo_summary.json", summary)
    print(f"wrote imbalance.svg, overlap.svg, resampling.svg, demo_summary.json to {out}")


COMMANDS = {
    "synth": cmd_synth,
    "widen": cmd_widen,
    "sample": cmd_sample,
    "train": cmd_train,
    "cv": cmd_cv,
    "select-features": cmd_select_features,
    "demo-imbalance": cmd_demo_imbalance,
}


def _effective(a) -> dict:
    return {k: v for k, v in sorted(vars(a).items()) if not k.startswith("_")}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)
    log.info("command %s, seed %d, config %s", args.command, args.seed, json.dumps(to_plain(_effective(args))))
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ConvergenceError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
