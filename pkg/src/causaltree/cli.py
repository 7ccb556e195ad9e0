"""Command-line interface: ``causaltree fit | predict | simulate``.

Exit codes are 0 on success, 2 for invalid input or configuration and 3
when estimation fails numerically.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from causaltree.criteria import CriterionError, parse_estimator
from causaltree.data import DataError, ColumnSchema, _parse_float, load_csv, split_sample
from causaltree.honest import (
    EstimateUnavailable,
    WeightingConfig,
    estimate_leaves,
    estimates_from_csv,
    estimates_to_csv,
    predict_arrays,
)
from causaltree.prune import CvConfig, fit_tree
from causaltree.sim import SimConfig, simulate
from causaltree.tree import GrowError, GrowParams, Tree

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3

FAMILIES = {"ct": "CT", "tot": "TOT", "fit": "F", "ts": "TS"}


class ConfigError(ValueError):
    """Malformed command-line or config-file input."""


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Settings shared by the ``fit`` command."""

    estimator: str = "ct"
    honest: bool = True
    n_min: int = 25
    buckets: int = 4
    folds: Optional[int] = None
    level: float = 0.9
    seed: int = 0
    weighted: bool = False
    trim: tuple = (0.05, 0.95)
    train_frac: float = 0.5

    def __post_init__(self):
        if self.estimator not in FAMILIES:
            raise ConfigError(f"estimator must be one of {sorted(FAMILIES)}, got {self.estimator!r}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f"--level must lie in (0, 1), got {self.level}")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError(f"--train-frac must lie in (0, 1), got {self.train_frac}")
        lo, hi = self.trim
        if not 0.0 <= lo < hi <= 1.0:
            raise ConfigError(f"--trim must satisfy 0 <= LOW < HIGH <= 1, got {lo},{hi}")

    @property
    def name(self) -> str:
        return FAMILIES[self.estimator] + ("-H" if self.honest else "-A")


def _trim(text: str):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW,HIGH, got {text!r}") from None
    return lo, hi


def _schema(args) -> ColumnSchema:
    covs = tuple(c.strip() for c in (args.covariates or "").split(",") if c.strip())
    return ColumnSchema(args.outcome, args.treatment, covs, args.propensity, args.true_cate)


def _report(tree: Tree, estimates, cfg: RunConfig, n_build: int, n_est: int, alpha: float) -> str:
    lines = [
        f"estimator: {cfg.name}",
        f"units used to build the tree: {n_build}",
        f"units used for leaf estimates: {n_est}",
        f"selected penalty: {alpha:.6g}",
        f"leaves: {tree.n_leaves}",
        "",
        f"{'leaf':>5}  {'tau_hat':>10}  {'ci':>25}  {'treated':>7}  {'control':>7}  region",
    ]
    for leaf in sorted(estimates):
        e = estimates[leaf]
        if e.available:
            ci = f"[{e.ci_lo:.4g}, {e.ci_hi:.4g}]"
            tau = f"{e.tau_hat:.4g}"
        else:
            ci, tau = "unavailable", "nan"
        lines.append(f"{leaf:>5}  {tau:>10}  {ci:>25}  {e.n_treat:>7}  {e.n_control:>7}  "
                     f"{tree.describe_region(leaf)}")
    lines += ["", f"{100 * cfg.level:g}% normal confidence intervals.", "", tree.to_text()]
    return "\n".join(lines)


def cmd_fit(args) -> int:
    cfg = RunConfig(
        estimator=args.estimator,
        honest=args.honest,
        n_min=args.n_min,
        buckets=args.buckets,
        folds=args.folds,
        level=args.level,
        seed=args.seed,
        weighted=args.weighted,
        trim=args.trim,
        train_frac=args.train_frac,
    )
    schema = _schema(args)
    data = load_csv(args.data, schema)
    weighting = WeightingConfig(trim=cfg.trim) if cfg.weighted else None
    if weighting is not None and data.propensity is None:
        raise DataError("--weighted needs a propensity column (--propensity)")

    if not cfg.honest:
        build_data, build_idx = data, np.arange(data.n)
        est_data, est_idx = data, build_idx
    elif args.est_data:
        est_data = load_csv(args.est_data, dataclasses.replace(schema, covariates=data.feature_names))
        build_data, build_idx = data, np.arange(data.n)
        est_idx = np.arange(est_data.n)
    else:
        split = split_sample(data, (cfg.train_frac, 1.0 - cfg.train_frac, 0.0), seed=cfg.seed)
        build_data, build_idx = data, split.train_indices
        est_data, est_idx = data, split.est_indices

    spec = parse_estimator(cfg.name, p=data.marginal_p, n_est=len(est_idx) if cfg.honest else None)
    params = GrowParams(n_min=cfg.n_min, bucket_size=cfg.buckets)
    fit = fit_tree(build_data, build_idx, spec, params, CvConfig(cfg.folds, cfg.seed))
    method = "transformed" if spec.family == "TOT" else "difference"
    estimates = estimate_leaves(
        fit.tree, est_data, est_idx, level=cfg.level, weighting=weighting, method=method,
        source="honest" if cfg.honest else "adaptive",
    )

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tree.json").write_text(json.dumps(fit.tree.to_dict(), indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    estimates_to_csv(fit.tree, estimates, out / "estimates.csv")
    report = _report(fit.tree, estimates, cfg, len(build_idx), len(est_idx), fit.alpha)
    (out / "report.txt").write_text(report, encoding="utf-8")
    if not args.quiet:
        print(report)
    return EXIT_OK


def read_covariates(path, names: Sequence[str], k: int) -> np.ndarray:
    """Covariate matrix for ``names`` (or the first ``k`` columns when unnamed)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        rows = [r for r in reader if r]
    if names:
        missing = [c for c in names if c not in header]
        if missing:
            raise DataError(f"schema mismatch: tree expects column(s) {', '.join(missing)}")
        cols = [header.index(c) for c in names]
    else:
        if len(header) != k:
            raise DataError(f"schema mismatch: tree has {k} covariates, file has {len(header)} columns")
        cols = list(range(k))
    x = np.empty((len(rows), len(cols)))
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"row {i + 1}: expected {len(header)} fields, found {len(r)}")
        for j, c in enumerate(cols):
            x[i, j] = _parse_float(r[c], header[c], i + 1)
    return x


def cmd_predict(args) -> int:
    try:
        tree = Tree.from_dict(json.loads(Path(args.tree).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read tree file {args.tree}: {exc}") from None
    estimates = estimates_from_csv(args.estimates)
    if set(estimates) != set(tree.leaves):
        raise DataError(
            f"leaf ids differ: tree has {sorted(tree.leaves)}, estimates have {sorted(estimates)}"
        )
    x = read_covariates(args.data, tree.feature_names, tree.n_features)
    leaves, tau, lo, hi = predict_arrays(tree, estimates, x)
    rows = ["row,leaf_id,tau_hat,ci_lo,ci_hi"]
    rows += [f"{i + 1},{l},{t!r},{a!r},{b!r}" for i, (l, t, a, b) in
             enumerate(zip(leaves.tolist(), tau.tolist(), lo.tolist(), hi.tolist()))]
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def read_sim_config(path) -> Dict[str, object]:
    """Parse ``key = value`` lines (``#`` starts a comment) into SimConfig fields."""
    fields = {f.name: f for f in dataclasses.fields(SimConfig)}
    out: Dict[str, object] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        key = key.replace("-", "_")
        if not sep or key not in fields:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value' with key in {sorted(fields)}")
        try:
            if key == "estimators":
                out[key] = tuple(v.strip().upper() for v in value.split(",") if v.strip())
            elif key == "adaptive_sample":
                out[key] = value
            elif key in ("level", "p"):
                out[key] = float(value)
            elif key == "folds":
                out[key] = None if value.lower() in ("", "none", "auto") else int(value)
            else:
                out[key] = int(value)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return out


def cmd_simulate(args) -> int:
    values = read_sim_config(args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        config = SimConfig(**values)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid simulation config: {exc}") from None
    for name in config.estimators:
        parse_estimator(name)
    report = simulate(config, workers=args.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table1.txt").write_text(report.table1_text(), encoding="utf-8")
    (out / "table_a1.txt").write_text(report.table_a1_text(), encoding="utf-8")
    (out / "results.csv").write_text(report.to_csv(), encoding="utf-8")
    if not args.quiet:
        print(report.to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="causaltree", description="Honest causal trees for treatment effects.")
    sub = ap.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="build a tree on a CSV and report leaf effects")
    fit.add_argument("data", help="input CSV")
    fit.add_argument("--out-dir", default=".", help="where tree.json, estimates.csv, report.txt go")
    fit.add_argument("--outcome", default="y")
    fit.add_argument("--treatment", default="w")
    fit.add_argument("--covariates", default="", help="comma-separated; default all other columns")
    fit.add_argument("--propensity", default=None)
    fit.add_argument("--true-cate", default=None)
    fit.add_argument("--est-data", default=None, help="separate estimation-sample CSV (honest only)")
    fit.add_argument("--estimator", default="ct", choices=sorted(FAMILIES))
    hon = fit.add_mutually_exclusive_group()
    hon.add_argument("--honest", dest="honest", action="store_true", default=True)
    hon.add_argument("--adaptive", dest="honest", action="store_false")
    fit.add_argument("--n-min", type=int, default=25)
    fit.add_argument("--buckets", type=int, default=4)
    fit.add_argument("--folds", type=int, default=None)
    fit.add_argument("--level", type=float, default=0.9)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--threads", type=int, default=1, help="accepted for symmetry; fitting is serial")
    fit.add_argument("--weighted", action="store_true", help="inverse-propensity weighted leaf estimates")
    fit.add_argument("--trim", type=_trim, default=(0.05, 0.95), help="propensity trim bounds LOW,HIGH")
    fit.add_argument("--train-frac", type=float, default=0.5)
    fit.add_argument("--quiet", action="store_true")
    fit.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="per-row effect predictions from a fitted tree")
    pr.add_argument("--tree", required=True)
    pr.add_argument("--estimates", required=True)
    pr.add_argument("data", help="CSV holding the tree's covariate columns")
    pr.add_argument("--out", default=None, help="output CSV (default stdout)")
    pr.set_defaults(func=cmd_predict)

    sm = sub.add_parser("simulate", help="Monte Carlo study from a key = value config file")
    sm.add_argument("config")
    sm.add_argument("--out-dir", default=".")
    sm.add_argument("--seed", type=int, default=None, help="overrides the config file")
    sm.add_argument("--threads", type=int, default=1)
    sm.add_argument("--quiet", action="store_true")
    sm.set_defaults(func=cmd_simulate)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CriterionError, FloatingPointError, EstimateUnavailable) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ConfigError, GrowError, ValueError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
