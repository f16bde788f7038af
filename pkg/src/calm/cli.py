"""Command-line interface.

Exit codes: 0 success, 2 input error, 3 estimation error.

Options may also come from an INI file given with ``--config``; keys live in
a ``[calm]`` section and use the long flag names (``fewshot-m = 10``).
Flags on the command line win over the file. The seed falls back to the
``CALM_SEED`` environment variable and then to 0; the value used is printed
and embedded in every output file.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
from dataclasses import replace

import numpy as np

from .data import load_dataset, load_propensity, quartile_strata, split_folds
from .efftest import sup_test
from .errors import CalmError, MissingPredictionError, ParseError
from .estimators import (
    estimate_ate_aipw,
    estimate_ate_calm,
    estimate_ate_calm_fs,
    estimate_cate_calm,
    estimate_mu_aipw,
    estimate_mu_calm,
    estimate_mu_calm_fs,
)
from .nuisance import RegressorConfig
from .predictor import (
    RemotePredictor,
    SyntheticPredictor,
    SyntheticPredictorConfig,
    read_predictions,
    write_predictions,
)
from .simharness import (
    DgpConfig,
    EstimatorSpec,
    _Model,
    metrics_to_csv,
    run_monte_carlo,
)

__all__ = ["main", "build_parser", "dgp_preset"]

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION = 0, 2, 3

# flags excluded from embedded configs because they must not change outputs
_UNEMBEDDED = ("threads", "config", "out", "func")


class InputError(Exception):
    """Raised for problems with user-supplied inputs."""


def dgp_preset(name):
    presets = {
        "default": DgpConfig(),
        "constant-mean": DgpConfig(
            p=1, beta="zero", theta=(0.9, 0.9), sigma_y=math.sqrt(0.19),
            predictor=SyntheticPredictorConfig(rho=0.8, noise_sd=1.0, demo_sd=0.5),
        ),
        "nonlinear": DgpConfig(curvature=1.0),
        "cate": DgpConfig(p=1, tau=0.0, tau1=1.0, shared_beta=True),
        "null": DgpConfig(predictor=SyntheticPredictorConfig(rho=0.0, noise_sd=1.0, demo_sd=0.5)),
    }
    if name not in presets:
        raise InputError(f"unknown DGP preset {name!r}; choose from {sorted(presets)}")
    return presets[name]


def _common(p):
    p.add_argument("--config", help="INI file with a [calm] section of flag defaults")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: $CALM_SEED or 0)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", help="output path (prefix for simulate)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker cap; outputs do not depend on it")
    p.add_argument("--regressor", default="knn", choices=["knn", "kernel_smoother", "stump_ensemble", "linear"])
    p.add_argument("--k", type=int, default=None, help="fixed neighbour count for knn")


def _data_args(p):
    p.add_argument("--data", required=True, help="CSV with id,y,t,x1..xp[,xc][,z]")
    p.add_argument("--propensity", required=True, help="JSON arm -> probability or stratum table")


def build_parser():
    parser = argparse.ArgumentParser(prog="calm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="estimate an arm mean, ATE or CATE")
    _common(a)
    _data_args(a)
    a.add_argument("--predictions", help="JSON-lines predictions (omit for AIPW)")
    a.add_argument("--arm", type=int, default=None)
    a.add_argument("--contrast", default=None, help="t,t' for an ATE or CATE")
    a.add_argument("--cate-at", default=None, help="query points, coordinates by ',' and points by ';'")
    a.add_argument("--estimator", default="calm", choices=["calm", "aipw"])
    a.add_argument("--weight", default=None, choices=["smooth", "robust", "zero", "ate"])
    a.add_argument("--coarsen", default="given", choices=["given", "quartile"])
    a.add_argument("--folds", type=int, default=None)
    a.add_argument("--fewshot-m", type=int, default=None)
    a.add_argument("--fewshot-B", type=int, default=None)
    a.add_argument("--bandwidth", type=float, default=None)
    a.add_argument("--kernel", default="gaussian", choices=["gaussian", "epanechnikov"])
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="Monte Carlo study on a synthetic trial law")
    _common(s)
    s.add_argument("--dgp", default="default")
    s.add_argument("--R", type=int, default=300)
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--p", type=int, default=None)
    s.add_argument("--rho", type=float, default=None)
    s.add_argument("--delta", type=float, default=None)
    s.add_argument("--estimators", default="aipw,calm-zero")
    s.add_argument("--estimand", default="mu_t", choices=["mu_t", "ate"])
    s.add_argument("--arm", type=int, default=1)
    s.add_argument("--contrast", default="1,2")
    s.add_argument("--weight", default=None, choices=["smooth", "robust", "zero", "ate"])
    s.add_argument("--folds", type=int, default=2)
    s.add_argument("--fewshot-m", type=int, default=10)
    s.add_argument("--fewshot-B", type=int, default=200)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("test-efficiency", help="sup test of zero conditional covariance")
    _common(e)
    _data_args(e)
    e.add_argument("--predictions", required=True)
    e.add_argument("--arm", type=int, default=1)
    e.add_argument("--n-sim", type=int, default=5000)
    e.add_argument("--bandwidth", type=float, default=None)
    e.add_argument("--coordinate", type=int, default=1, help="1-based index coordinate")
    e.add_argument("--engine", default="gaussian", choices=["gaussian", "multiplier"])
    e.set_defaults(func=cmd_test_efficiency)

    g = sub.add_parser("aggregate-predictions", help="few-shot predictions over the three fold rotations")
    _common(g)
    _data_args(g)
    g.add_argument("--arms", default=None, help="comma-separated arms (default: all)")
    g.add_argument("--fewshot-m", type=int, default=10)
    g.add_argument("--fewshot-B", type=int, default=200)
    g.add_argument("--remote-url", default=None)
    g.add_argument("--cache", default=None, help="JSON-lines response cache for --remote-url")
    g.add_argument("--synthetic-dgp", default=None, help="DGP preset whose synthetic predictor reads z")
    g.set_defaults(func=cmd_aggregate)
    return parser


def _apply_config_file(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    cp = configparser.ConfigParser()
    try:
        with open(known.config, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise InputError(f"cannot read config file: {exc}") from None
    if not cp.has_section("calm"):
        raise InputError("config file needs a [calm] section")
    sub = parser._subparsers._group_actions[0]
    for subparser in sub.choices.values():
        dests = {a.dest.lower(): a for a in subparser._actions}
        defaults = {}
        for key, raw in cp.items("calm"):
            lookup = key.replace("-", "_").lower()
            if lookup in dests and lookup not in _UNEMBEDDED:
                act = dests[lookup]
                dest = act.dest
                try:
                    defaults[dest] = act.type(raw) if act.type else raw
                except ValueError:
                    raise InputError(f"config key {key!r}: bad value {raw!r}") from None
                if act.choices and defaults[dest] not in act.choices:
                    raise InputError(f"config key {key!r}: {raw!r} not in {sorted(act.choices)}")
        subparser.set_defaults(**defaults)
        for act in subparser._actions:
            if act.dest in defaults:
                act.required = False


def _resolve_seed(args):
    if args.seed is None:
        env = os.environ.get("CALM_SEED")
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            raise InputError(f"CALM_SEED is not an integer: {env!r}") from None
    print(f"seed: {args.seed}")


def _resolved(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in _UNEMBEDDED}


def _read(path, binary=False):
    try:
        with open(path, "rb" if binary else "r", encoding=None if binary else "utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None


def _write(path, text):
    if path is None:
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _regressor(args):
    if args.k is not None:
        return RegressorConfig(family=args.regressor, k=args.k, selection="fixed")
    return RegressorConfig(family=args.regressor)


def _pair(text):
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"expected 't,t2', got {text!r}") from None
    return a, b


def _load_inputs(args):
    prop = load_propensity(_read(args.propensity))
    ds = load_dataset(_read(args.data, binary=True), prop)
    if getattr(args, "coarsen", "given") == "quartile" or (ds.x_coarse is None and prop.needs_strata):
        ds = ds.with_coarsening(quartile_strata(ds.x))
    return ds


def _table(rows):
    head = f"{'method':<16}{'estimand':<12}{'estimate':>14}{'SE':>12}{'CI low':>14}{'CI high':>14}"
    lines = [head]
    for name, rep in rows:
        lines.append(
            f"{name:<16}{rep.estimand:<12}{rep.point:>14.6f}{rep.se:>12.6f}{rep.ci[0]:>14.6f}{rep.ci[1]:>14.6f}"
        )
    return "\n".join(lines)


def cmd_analyze(args):
    _resolve_seed(args)
    ds = _load_inputs(args)
    contrast = _pair(args.contrast) if args.contrast else None
    if contrast is None and args.arm is None:
        raise InputError("give --arm or --contrast")
    if args.cate_at and contrast is None:
        raise InputError("--cate-at needs --contrast")
    arms = list(contrast) if contrast else [args.arm]
    ps = None
    if args.estimator == "calm":
        if not args.predictions:
            raise InputError("CALM needs --predictions")
        ps = read_predictions(_read(args.predictions))
    few_shot = ps is not None and ps.mode == "few_shot"
    K = args.folds or (3 if few_shot else 2)
    if few_shot and K != 3:
        raise InputError("few-shot predictions need --folds 3")
    folds = split_folds(ds.n, K, args.seed)
    if ps is not None:
        # validate coverage up front so a gap is reported as an input error
        for arm in arms:
            if few_shot:
                for donor, tr, ev in ((1, 2, 3), (2, 3, 1), (3, 1, 2)):
                    ids = [ds.ids[i] for i in np.concatenate([folds.indices(tr), folds.indices(ev)])]
                    ps.few_shot_draws(ids, arm, donor)
            else:
                ps.zero_shot_vector(ds.ids, arm)
    cfg = _regressor(args)
    weight = args.weight or ("ate" if contrast else "smooth")
    if weight == "ate" and not contrast:
        raise InputError("--weight ate needs --contrast")
    try:
        if args.estimator == "aipw":
            rep = estimate_mu_aipw(ds, folds, args.arm, cfg, args.alpha) if not contrast else estimate_ate_aipw(
                ds, folds, contrast, cfg, args.alpha
            )
        elif few_shot:
            m = args.fewshot_m or ps.m or int(ps.metadata.get("fewshot_m", 0)) or None
            if contrast:
                rep = estimate_ate_calm_fs(ds, None, contrast, m, ps.B, weight, cfg, args.alpha, folds=folds, predictions=ps)
            else:
                rep = estimate_mu_calm_fs(ds, None, args.arm, m, ps.B, weight, cfg, args.alpha, folds=folds, predictions=ps)
        elif contrast:
            rep = estimate_ate_calm(ds, folds, ps, contrast, weight, cfg, args.alpha)
        else:
            rep = estimate_mu_calm(ds, folds, ps, args.arm, weight, cfg, args.alpha)
        reports = [rep]
        if args.cate_at:
            pts = [[float(v) for v in pt.split(",")] for pt in args.cate_at.split(";") if pt.strip()]
            reports = estimate_cate_calm(
                ds, folds, ps, contrast, np.array(pts), args.bandwidth, args.kernel, weight, cfg, args.alpha,
                influence=rep.influence,
            )
    except MissingPredictionError:
        raise
    except CalmError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    label = args.estimator if args.estimator == "aipw" else ("calm-fs" if few_shot else "calm-zero")
    print(_table([(label, r) for r in reports]))
    doc = {
        "config": _resolved(args),
        "seed": args.seed,
        "weight": weight if args.estimator == "calm" else "none",
        "reports": [r.to_dict() for r in reports],
    }
    _write(args.out, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_simulate(args):
    _resolve_seed(args)
    dgp = dgp_preset(args.dgp)
    if args.n is not None:
        dgp = replace(dgp, n=args.n)
    if args.p is not None:
        dgp = replace(dgp, p=args.p)
    if args.rho is not None:
        dgp = replace(dgp, predictor=replace(dgp.predictor, rho=args.rho))
    if args.delta is not None:
        dgp = replace(dgp, predictor=replace(dgp.predictor, delta=args.delta))
    cfg = _regressor(args)
    arms = _pair(args.contrast)
    specs = []
    for name in [s.strip() for s in args.estimators.split(",") if s.strip()]:
        if name not in ("aipw", "calm-zero", "calm-fs"):
            raise InputError(f"unknown estimator {name!r}")
        default_w = "ate" if args.estimand == "ate" else "smooth"
        specs.append(
            EstimatorSpec(
                name=name, family=name, estimand=args.estimand, arm=args.arm, arms=arms,
                weight=args.weight or default_w, folds=3 if name == "calm-fs" else args.folds,
                m=args.fewshot_m, B=args.fewshot_B, alpha=args.alpha, config=cfg,
            )
        )
    try:
        metrics = run_monte_carlo(dgp, specs, args.R, args.seed, threads=args.threads)
    except CalmError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    header = {"config": _resolved(args), "seed": args.seed, "dgp": dgp.to_dict()}
    csv_text = "# " + json.dumps(header, sort_keys=True) + "\n" + metrics_to_csv(metrics)
    doc = dict(header, metrics=[m.to_dict() for m in metrics.values()])
    print(metrics_to_csv(metrics), end="")
    if args.out:
        _write(args.out + ".csv", csv_text)
        _write(args.out + ".json", json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_test_efficiency(args):
    _resolve_seed(args)
    ds = _load_inputs(args)
    ps = read_predictions(_read(args.predictions))
    yd = ps.zero_shot_vector(ds.ids, args.arm)
    if not 1 <= args.coordinate <= ds.p:
        raise InputError(f"--coordinate must lie in 1..{ds.p}")
    try:
        rep = sup_test(
            ds, yd, args.arm, h=args.bandwidth, alpha=args.alpha, n_sim=args.n_sim, seed=args.seed,
            coordinate=args.coordinate - 1, engine=args.engine, config=_regressor(args),
        )
    except CalmError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    print(f"t_stat {rep.t_stat:.6f}")
    print(f"critical_value {rep.critical_value:.6f}")
    print(f"p_value {rep.p_value:.6f}")
    print(f"decision {'reject' if rep.reject else 'retain'}")
    doc = {"config": _resolved(args), "seed": args.seed, "report": rep.to_dict()}
    _write(args.out, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_aggregate(args):
    from .estimators import few_shot_predictions

    _resolve_seed(args)
    ds = _load_inputs(args)
    if (args.remote_url is None) == (args.synthetic_dgp is None):
        raise InputError("give exactly one of --remote-url or --synthetic-dgp")
    if args.remote_url:
        predictor = RemotePredictor(args.remote_url, cache_path=args.cache)
    else:
        dgp = dgp_preset(args.synthetic_dgp)
        predictor = SyntheticPredictor(_Model(dgp), dgp.predictor)
    arms = [int(a) for a in args.arms.split(",")] if args.arms else list(range(1, ds.arm_count + 1))
    folds = split_folds(ds.n, 3, args.seed)
    try:
        from .predictor import PredictionSet

        ps = PredictionSet(m=args.fewshot_m)
        for arm in arms:
            ps.merge(few_shot_predictions(ds, folds, predictor, arm, args.fewshot_m, args.fewshot_B, args.seed))
    except CalmError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    text = write_predictions(ps, config=_resolved(args) | {"seed": args.seed})
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    except MissingPredictionError as exc:
        print(f"input error: missing prediction for subject {exc.key[0]!r} (key {exc.key!r})", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ParseError, CalmError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
