"""Simulation designs and the Monte Carlo harness for comparing estimators."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from causaltree.criteria import CriterionError, parse_estimator
from causaltree.data import CausalDataset
from causaltree.evaluation import EvalResult, evaluate
from causaltree.honest import EstimateUnavailable, estimate_leaves
from causaltree.prune import CvConfig, fit_tree
from causaltree.tree import GrowError, GrowParams

ALL_ESTIMATORS = ("TOT-A", "F-A", "TS-A", "CT-A", "TOT-H", "F-H", "TS-H", "CT-H")
ADAPTIVE_SAMPLES = ("train", "union", "both")
UNION_SUFFIX = "/U"


def _pos(x):
    return np.where(x > 0, x, 0.0)


@dataclass(frozen=True)
class DesignSpec:
    """Y(w) = eta(X) + (w - 1/2) kappa(X) + eps with X ~ N(0, I_K)."""

    id: int
    k: int
    eta: Callable[[np.ndarray], np.ndarray]
    kappa: Callable[[np.ndarray], np.ndarray]
    noise_sd: float = 0.1
    p: float = 0.5


DESIGNS: Dict[int, DesignSpec] = {
    1: DesignSpec(1, 2, lambda x: 0.5 * x[:, 0] + x[:, 1], lambda x: 0.5 * x[:, 0]),
    2: DesignSpec(
        2, 10,
        lambda x: 0.5 * x[:, :2].sum(1) + x[:, 2:6].sum(1),
        lambda x: _pos(x[:, :2]).sum(1),
    ),
    3: DesignSpec(
        3, 20,
        lambda x: 0.5 * x[:, :4].sum(1) + x[:, 4:8].sum(1),
        lambda x: _pos(x[:, :4]).sum(1),
    ),
}


def get_design(design) -> DesignSpec:
    if isinstance(design, DesignSpec):
        return design
    try:
        return DESIGNS[int(design)]
    except (KeyError, ValueError):
        raise ValueError(f"unknown design {design!r}; choose from {sorted(DESIGNS)}") from None


def generate(design, n: int, seed) -> CausalDataset:
    """Draw ``n`` units from a design; ``true_cate`` holds kappa(X)."""
    d = get_design(design)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d.k))
    w = (rng.random(n) < d.p).astype(np.int8)
    eps = rng.normal(0.0, d.noise_sd, n)
    kappa = d.kappa(x)
    y = d.eta(x) + 0.5 * (2 * w - 1) * kappa + eps
    return CausalDataset(y, w, x, true_cate=kappa, marginal_p=d.p)


@dataclass(frozen=True)
class SimConfig:
    design: int = 1
    n_train: int = 500
    n_est: int = 500
    n_test: int = 6000
    replications: int = 200
    estimators: Tuple[str, ...] = ALL_ESTIMATORS
    seed: int = 0
    n_min: int = 25
    bucket_size: int = 4
    tot_min_leaf: int = 50
    folds: Optional[int] = None
    level: float = 0.9
    adaptive_sample: str = "both"

    def __post_init__(self):
        get_design(self.design)
        if self.adaptive_sample not in ADAPTIVE_SAMPLES:
            raise ValueError(f"adaptive_sample must be one of {ADAPTIVE_SAMPLES}")
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if min(self.n_train, self.n_est, self.n_test) < 1:
            raise ValueError("sample sizes must be positive")
        object.__setattr__(self, "estimators", tuple(parse_estimator(e).name for e in self.estimators))

    @property
    def grow_params(self) -> GrowParams:
        return GrowParams(n_min=self.n_min, bucket_size=self.bucket_size, min_leaf_pooled=self.tot_min_leaf)


@dataclass(frozen=True)
class EstimatorOutcome:
    leaves: int
    result: Optional[EvalResult]
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.result is not None


@dataclass(frozen=True)
class Replication:
    rep: int
    outcomes: Dict[str, EstimatorOutcome]


def _streams(seed: int, rep: int):
    train, est, test, cv = np.random.SeedSequence([seed, rep]).spawn(4)
    return train, est, test, int(cv.generate_state(1)[0])


def run_replication(config: SimConfig, rep: int) -> Replication:
    """One draw of train / estimation / test data shared by every estimator.

    Honest estimators build and cross-validate on the training sample and
    estimate on the estimation sample. Adaptive estimators build, validate
    and estimate on one sample: the training sample alone (``"train"``),
    the union of training and estimation samples (``"union"``), or both, in
    which case union fits are reported under ``name + "/U"``.
    """
    design = get_design(config.design)
    s_train, s_est, s_test, cv_seed = _streams(config.seed, rep)
    train = generate(design, config.n_train, s_train)
    est = generate(design, config.n_est, s_est)
    test = generate(design, config.n_test, s_test)
    both = CausalDataset.concat([train, est])
    cv = CvConfig(config.folds, cv_seed)
    params = config.grow_params

    jobs = []
    for name in config.estimators:
        spec = parse_estimator(name, p=design.p)
        if spec.honest:
            jobs.append((name, spec.with_n_est(config.n_est), train, est))
            continue
        if config.adaptive_sample in ("train", "both"):
            jobs.append((name, spec, train, train))
        if config.adaptive_sample in ("union", "both"):
            label = name + UNION_SUFFIX if config.adaptive_sample == "both" else name
            jobs.append((label, spec, both, both))

    out = {}
    for label, spec, build, estimate in jobs:
        method = "transformed" if spec.family == "TOT" else "difference"
        source = "honest" if spec.honest else "adaptive"
        leaves = 0
        try:
            fit = fit_tree(build, None, spec, params, cv)
            leaves = fit.tree.n_leaves
            est_map = estimate_leaves(fit.tree, estimate, level=config.level, method=method, source=source)
            out[label] = EstimatorOutcome(leaves, evaluate(test, fit.tree, est_map))
        except (EstimateUnavailable, CriterionError, GrowError) as exc:
            out[label] = EstimatorOutcome(leaves, None, f"{type(exc).__name__}: {exc}")
    return Replication(rep, out)


def run_simulation(config: SimConfig, workers: int = 1, progress: Optional[Callable[[int], None]] = None):
    """All replications, in order; ``workers > 1`` runs them in processes."""
    reps = range(config.replications)
    if workers <= 1:
        results = []
        for r in reps:
            results.append(run_replication(config, r))
            if progress:
                progress(r)
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_replication, [config] * config.replications, reps))


@dataclass(frozen=True)
class Stat:
    mean: float
    se: float
    n: int

    @classmethod
    def of(cls, values) -> "Stat":
        v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=float)
        if v.size == 0:
            return cls(math.nan, math.nan, 0)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
        return cls(float(v.mean()), se, int(v.size))


@dataclass(frozen=True)
class SimReport:
    """Per-estimator aggregates over replications.

    ``rows[name][metric]`` is a :class:`Stat`. Ratio metrics are means of
    per-replication ratios; ``*_ratio_of_means`` divide the averaged levels.
    """

    config: SimConfig
    rows: Dict[str, Dict[str, Stat]]
    failures: Dict[str, int] = field(default_factory=dict)

    def get(self, estimator: str, metric: str) -> Stat:
        return self.rows[estimator][metric]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["design", "n_train", "n_est", "estimator", "metric", "mean", "se", "n"])
        c = self.config
        for name, metrics in self.rows.items():
            for metric, st in metrics.items():
                wr.writerow([c.design, c.n_train, c.n_est, name, metric, repr(st.mean), repr(st.se), st.n])
        return buf.getvalue()

    def _panels(self, which: str) -> str:
        c = self.config
        lines = [f"Design {c.design}, N_train = {c.n_train}, N_est = {c.n_est}, "
                 f"N_test = {c.n_test}, R = {c.replications}, seed = {c.seed}"]

        def panel(title, metric, names, fmt="{:.3f}"):
            rows = [(n, self.rows[n][metric]) for n in names if n in self.rows and metric in self.rows[n]]
            if not rows:
                return
            lines.append("")
            lines.append(title)
            for n, st in rows:
                lines.append(f"  {n:<12}" + fmt.format(st.mean) + (f"  (se {st.se:.3f})" if math.isfinite(st.se) else ""))

        order = [n for n in ALL_ESTIMATORS if n in self.rows]
        order += [n + UNION_SUFFIX for n in ALL_ESTIMATORS if n + UNION_SUFFIX in self.rows]
        honest = [n for n in order if n.endswith("-H")]
        adaptive = [n for n in order if not n.endswith("-H")]
        pct = f"{100 * c.level:g}%"
        if which in ("1", "all"):
            panel("Number of leaves", "leaves", order, "{:.1f}")
            panel("Infeasible MSE divided by infeasible MSE for CT-H", "mse_ratio_ct_h",
                  honest + [n for n in ("F-A",) if n in self.rows])
            panel("Ratio of infeasible MSE: adaptive to honest", "adaptive_to_honest", honest)
            panel(f"Coverage of {pct} confidence intervals - adaptive", "coverage", adaptive)
            panel(f"Coverage of {pct} confidence intervals - honest", "coverage", honest)
        if which in ("A1", "all"):
            panel("Infeasible MSE", "mse_tau", order)
            panel("Infeasible MSE, net of the mean squared CATE", "mse_tau_adjusted", order)
            panel("Feasible MSE^TOT", "mse_tot", order)
            panel("MSE^TOT divided by MSE^TOT for CT-H", "mse_tot_ratio_ct_h", honest)
        if any(self.failures.values()):
            lines.append("")
            lines.append("Failed replications: " + ", ".join(f"{k}={v}" for k, v in self.failures.items() if v))
        return "\n".join(lines) + "\n"

    def table1_text(self) -> str:
        """Leaf counts, MSE ratios and coverage."""
        return self._panels("1")

    def table_a1_text(self) -> str:
        """Infeasible and feasible MSE levels."""
        return self._panels("A1")

    def to_text(self) -> str:
        return self._panels("all")


def _ratio(a: Optional[EstimatorOutcome], b: Optional[EstimatorOutcome], attr: str):
    if a is None or b is None or not a.ok or not b.ok:
        return None
    den = getattr(b.result, attr)
    return getattr(a.result, attr) / den if den != 0 else None


def aggregate(results: Sequence[Replication], config: Optional[SimConfig] = None) -> SimReport:
    """Means and Monte Carlo standard errors of every reported quantity."""
    if not results:
        raise ValueError("need at least one replication")
    config = config or SimConfig()
    names = list(results[0].outcomes)
    rows: Dict[str, Dict[str, Stat]] = {}
    failures = {}
    for name in names:
        outs = [r.outcomes.get(name) for r in results]
        good = [o for o in outs if o is not None and o.ok]
        failures[name] = len(outs) - len(good)
        m: Dict[str, Stat] = {
            "leaves": Stat.of([o.leaves for o in outs if o is not None and o.leaves]),
            "mse_tau": Stat.of([o.result.mse_tau for o in good]),
            "mse_tau_adjusted": Stat.of([o.result.mse_tau_infeasible for o in good]),
            "mse_tot": Stat.of([o.result.mse_tot for o in good]),
            "coverage": Stat.of([o.result.coverage for o in good]),
            "coverage_leaf_weighted": Stat.of([o.result.coverage_leaf_weighted for o in good]),
        }
        if "CT-H" in names:
            ref = [r.outcomes.get("CT-H") for r in results]
            m["mse_ratio_ct_h"] = Stat.of([_ratio(a, b, "mse_tau") for a, b in zip(outs, ref)])
            m["mse_tot_ratio_ct_h"] = Stat.of([_ratio(a, b, "mse_tot") for a, b in zip(outs, ref)])
            ref_mse = Stat.of([o.result.mse_tau for o in ref if o is not None and o.ok]).mean
            ref_tot = Stat.of([o.result.mse_tot for o in ref if o is not None and o.ok]).mean
            m["mse_ratio_of_means_ct_h"] = Stat(m["mse_tau"].mean / ref_mse, math.nan, m["mse_tau"].n)
            m["mse_tot_ratio_of_means_ct_h"] = Stat(m["mse_tot"].mean / ref_tot, math.nan, m["mse_tot"].n)
        if name.endswith("-H"):
            partner = name[:-1] + "A"
            if partner + UNION_SUFFIX in names:
                partner += UNION_SUFFIX
            if partner in names:
                adapt = [r.outcomes.get(partner) for r in results]
                m["adaptive_to_honest"] = Stat.of([_ratio(a, h, "mse_tau") for a, h in zip(adapt, outs)])
        rows[name] = m
    return SimReport(config, rows, failures)


def simulate(config: SimConfig, workers: int = 1) -> SimReport:
    return aggregate(run_simulation(config, workers), config)
