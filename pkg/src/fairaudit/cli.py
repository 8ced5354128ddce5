"""Command line: `fairaudit run | variations | synth | explain`.

Exit codes: 0 every verdict fair, 2 at least one unfair verdict, 1 error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import synthgen
from .attrib import explain_sample
from .audit import VARIATION_NAMES, render_report, run_audit
from .config import AOD_MODES, SEARCHES, ConfigError, RunConfig
from .learner import GbmModel, LearnerError
from .prep import MISSING_SUFFIX, impute
from .tabular import Column, Dataset, Schema, load_csv, save_csv

logger = logging.getLogger("fairaudit")

EXIT_FAIR, EXIT_ERROR, EXIT_UNFAIR = 0, 1, 2
PRESETS = ("default", "masking", "null", "variation")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    # defaults are None so that only flags given on the command line override the config file
    p.add_argument("--config", help="JSON config file; command-line flags override it")
    p.add_argument("--data", help="input CSV")
    p.add_argument("--schema", help="schema JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="master seed (required, here or in the config)")
    p.add_argument("--tau", type=float, help="threshold for every criterion")
    for c in ("independence", "separation", "sufficiency"):
        p.add_argument(f"--tau-{c}", type=float, dest=f"tau_{c}", help=f"threshold for {c}")
    p.add_argument("-B", "--bootstrap", type=int, help="bootstrap iterations (default 500)")
    p.add_argument("--cv-k", type=int, help="cross-validation folds (default 5)")
    p.add_argument("--tuning-budget", type=int, help="hyperparameter trials (default 30)")
    p.add_argument("--search", choices=SEARCHES, help="tuning strategy")
    p.add_argument("--variations", help="comma-separated subset of " + ",".join(VARIATION_NAMES))
    p.add_argument("--max-depth", type=int, choices=(1, 2), help="intersection depth (default 2)")
    p.add_argument("--min-group", type=int, help="rows below which a group is flagged small (default 50)")
    p.add_argument("--aod-mode", choices=AOD_MODES, help="AOD form (default average)")
    p.add_argument("--hyperparams", help="JSON object of fixed model parameters; skips tuning")
    p.add_argument("--shap-sample", type=int, help="rows used for category importance (default 2000)")
    p.add_argument("--threads", type=int, help="worker threads; results do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairaudit", description="Intersectional fairness audit of credit models")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train, explain and audit one dataset")
    _add_run_flags(run)
    var = sub.add_parser("variations", help="like run, over all four data variations")
    _add_run_flags(var)

    syn = sub.add_parser("synth", help="write a synthetic dataset and its schema")
    src = syn.add_mutually_exclusive_group()
    src.add_argument("--preset", choices=PRESETS, default="default")
    src.add_argument("--spec", help="generator spec JSON")
    syn.add_argument("-n", type=int, help="rows before widowed removal")
    syn.add_argument("--seed", type=int, help="generator seed")
    syn.add_argument("--tau", type=float, default=0.1, help="masking strength in threshold units")
    syn.add_argument("--out", required=True, help="output directory (data.csv, schema.json)")

    exp = sub.add_parser("explain", help="category importance of a saved model")
    exp.add_argument("--model", required=True)
    exp.add_argument("--data", required=True)
    exp.add_argument("--schema", required=True)
    exp.add_argument("--sample-size", type=int, default=2000)
    exp.add_argument("--seed", type=int, default=0)
    exp.add_argument("--out", required=True, help="output CSV")
    return parser


def resolve_config(args: argparse.Namespace, all_variations: bool = False) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if all_variations and not args.config:
        cfg.variations = list(VARIATION_NAMES)
    simple = {
        "data": "data", "schema": "schema", "out": "out", "seed": "seed", "bootstrap": "bootstrap",
        "cv_k": "cv_k", "tuning_budget": "tuning_budget", "search": "search", "max_depth": "max_depth",
        "min_group": "min_group", "aod_mode": "aod_mode", "shap_sample": "shap_sample", "threads": "threads",
    }
    for attr, key in simple.items():
        v = getattr(args, attr)
        if v is not None:
            setattr(cfg, key, v)
    thresholds = dict(cfg.thresholds)
    if args.tau is not None:
        thresholds = {k: args.tau for k in ("independence", "separation", "sufficiency")}
    for c in ("independence", "separation", "sufficiency"):
        v = getattr(args, f"tau_{c}")
        if v is not None:
            thresholds[c] = v
    cfg.thresholds = thresholds
    if args.variations is not None:
        cfg.variations = [v.strip() for v in args.variations.split(",") if v.strip()]
    if args.hyperparams is not None:
        try:
            cfg.hyperparams = json.loads(args.hyperparams)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--hyperparams is not valid JSON: {exc}") from exc
    if cfg.seed is None:
        raise ConfigError("--seed is required (no hidden entropy)")
    for key in ("data", "schema", "out"):
        if getattr(cfg, key) is None:
            raise ConfigError(f"--{key} is required")
    return cfg.validate()


def cmd_audit(cfg: RunConfig) -> int:
    schema = Schema.load(cfg.schema)
    ds = load_csv(cfg.data, schema)
    report = run_audit(ds, cfg)
    out = Path(cfg.out)
    render_report(report, out)
    report.model.save(out / "model.json")
    logger.info("%d verdicts, %d unfair; report in %s", len(report.verdicts), report.n_unfair, out)
    print(f"{report.n_unfair} unfair verdict(s) of {len(report.verdicts)}; report written to {out}")
    return report.exit_code


def cmd_synth(args: argparse.Namespace) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.spec:
        spec = synthgen.GeneratorSpec.load(args.spec)
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
        if args.n is not None:
            spec = replace(spec, n=args.n)
    else:
        n = args.n
        if args.preset in ("masking", "null"):
            spec = synthgen.masking_spec(args.tau, 50_000 if n is None else n, seed, interaction=args.preset == "masking")
        elif args.preset == "variation":
            spec = synthgen.variation_spec(20_000 if n is None else n, seed)
        else:
            spec = synthgen.default_spec(50_000 if n is None else n, seed)
    ds = synthgen.generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(ds, out / "data.csv")
    ds.schema.save(out / "schema.json")
    print(f"wrote {ds.n} rows to {out / 'data.csv'} and {out / 'schema.json'}")
    return EXIT_FAIR


def explain_matrix(model: GbmModel, ds: Dataset) -> np.ndarray:
    """Encode `ds` for `model`, imputing as in training.

    Missing-value indicators the model was trained with are rebuilt from the data,
    and come out all-zero when this data has no gaps in that column.
    """
    ds = impute(ds)
    extra = []
    frame = ds.frame
    for col in model.encoder.columns:
        src = col.source
        if src in frame.columns or src in {c.name for c in extra}:
            continue
        base = src[: -len(MISSING_SUFFIX)] if src.endswith(MISSING_SUFFIX) else None
        if base is None or base not in frame.columns:
            raise LearnerError(f"model feature {src!r} is not in the data")
        frame = frame.assign(**{src: 0.0})
        extra.append(Column(src, "numeric", "feature", category=col.category))
    ds = Dataset(ds.schema.add_columns(extra), frame)
    return model.encoder.transform(ds)


def cmd_explain(args: argparse.Namespace) -> int:
    if args.sample_size < 1:
        raise ConfigError("--sample-size must be at least 1")
    model = GbmModel.load(args.model)
    ds = load_csv(args.data, Schema.load(args.schema))
    X = explain_matrix(model, ds)
    importance = explain_sample(model, X, args.sample_size, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    importance.write_csv(out)
    print("categories by summed importance: " + ", ".join(importance.ranked("sum")))
    return EXIT_FAIR


def _module_of(exc: BaseException) -> str:
    mod = type(exc).__module__
    return mod.split(".")[-1] if mod.startswith("fairaudit") else "fairaudit"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command in ("run", "variations"):
            return cmd_audit(resolve_config(args, all_variations=args.command == "variations"))
        if args.command == "synth":
            return cmd_synth(args)
        return cmd_explain(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error [{_module_of(exc)}]: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
