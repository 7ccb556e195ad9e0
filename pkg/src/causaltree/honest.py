"""Leaf-level treatment-effect estimates and confidence intervals."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Dict, Optional, Tuple, Union

import numpy as np

from causaltree.data import CausalDataset, DataError
from causaltree.tree import Tree, apply

MIN_ARM = 2


class EstimateUnavailable(LookupError):
    """A leaf has no usable estimate."""


@dataclass(frozen=True)
class LeafEstimate:
    leaf_id: int
    tau_hat: float
    se: float
    ci: Tuple[float, float]
    n_treat: int
    n_control: int
    source: str = "honest"
    level: float = 0.9
    available: bool = True
    reason: str = ""

    @property
    def ci_lo(self) -> float:
        return self.ci[0]

    @property
    def ci_hi(self) -> float:
        return self.ci[1]


@dataclass(frozen=True)
class WeightingConfig:
    """Propensity weighting for observational data.

    Units with a propensity outside ``trim`` are dropped. With
    ``renormalize`` the inverse-propensity weights are rescaled to sum to one
    within each leaf and arm.
    """

    trim: Tuple[float, float] = (0.05, 0.95)
    renormalize: bool = True

    def __post_init__(self):
        lo, hi = self.trim
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"trim bounds must satisfy 0 <= low < high <= 1, got {self.trim}")


def critical_value(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    return NormalDist().inv_cdf(0.5 + level / 2.0)


def _unavailable(leaf, n1, n0, source, level, reason):
    nan = math.nan
    return LeafEstimate(leaf, nan, nan, (nan, nan), n1, n0, source, level, False, reason)


def _estimate(leaf, y, treated, e, level, source, weighting, method, p):
    z = critical_value(level)
    n1 = int(treated.sum())
    n0 = int(treated.size - n1)
    if method == "transformed":
        if y.size < MIN_ARM:
            return _unavailable(leaf, n1, n0, source, level, f"{y.size} units, need {MIN_ARM}")
        ystar = y * (treated - p) / (p * (1 - p))
        tau = float(ystar.mean())
        se = float(ystar.std(ddof=1) / math.sqrt(ystar.size))
        return LeafEstimate(leaf, tau, se, (tau - z * se, tau + z * se), n1, n0, source, level)
    if n1 < MIN_ARM or n0 < MIN_ARM:
        return _unavailable(
            leaf, n1, n0, source, level, f"{n1} treated / {n0} control units, need {MIN_ARM} of each"
        )
    y1, y0 = y[treated], y[~treated]
    if weighting is None:
        tau = float(y1.mean() - y0.mean())
        se = math.sqrt(y1.var(ddof=1) / n1 + y0.var(ddof=1) / n0)
    elif weighting.renormalize:
        w1 = 1.0 / e[treated]
        w0 = 1.0 / (1.0 - e[~treated])
        w1 /= w1.sum()
        w0 /= w0.sum()
        m1, m0 = float(np.dot(w1, y1)), float(np.dot(w0, y0))
        tau = m1 - m0
        se = math.sqrt(float(np.dot(w1**2, (y1 - m1) ** 2) + np.dot(w0**2, (y0 - m0) ** 2)))
    else:
        contrib = np.where(treated, y / e, -y / (1.0 - e))
        tau = float(contrib.mean())
        se = float(contrib.std(ddof=1) / math.sqrt(contrib.size))
    return LeafEstimate(leaf, tau, se, (tau - z * se, tau + z * se), n1, n0, source, level)


def estimate_leaves(
    tree: Tree,
    dataset: CausalDataset,
    indices=None,
    level: float = 0.9,
    weighting: Optional[WeightingConfig] = None,
    method: str = "difference",
    source: str = "honest",
) -> Dict[int, LeafEstimate]:
    """Treatment effect, standard error and normal CI for every leaf.

    Parameters
    ----------
    method : {"difference", "transformed"}
        Difference of arm means, or the mean of the transformed outcome
        (what transformed-outcome trees report).
    weighting : WeightingConfig, optional
        Requires ``dataset.propensity``; treated units get weight 1/e(x),
        controls 1/(1 - e(x)).

    Leaves whose units cannot support an estimate are returned with
    ``available=False`` and the reason.
    """
    if method not in ("difference", "transformed"):
        raise ValueError(f"unknown method {method!r}")
    if indices is None:
        indices = np.arange(dataset.n)
    idx = np.asarray(indices, dtype=np.intp)
    e = None
    if weighting is not None:
        if dataset.propensity is None:
            raise DataError("weighted estimation needs propensity scores")
        e = dataset.propensity[idx]
        lo, hi = weighting.trim
        keep = (e >= lo) & (e <= hi)
        idx, e = idx[keep], e[keep]
    leaf_of = tree.apply(dataset.covariates[idx])
    y = dataset.outcomes[idx]
    treated = dataset.treatments[idx] == 1
    out = {}
    for leaf in tree.leaves:
        m = leaf_of == leaf
        out[leaf] = _estimate(
            leaf, y[m], treated[m], None if e is None else e[m], level, source, weighting, method,
            dataset.marginal_p,
        )
    return out


def adaptive_estimate_leaves(
    tree: Tree,
    dataset: CausalDataset,
    indices=None,
    level: float = 0.9,
    weighting: Optional[WeightingConfig] = None,
    method: str = "difference",
) -> Dict[int, LeafEstimate]:
    """Leaf estimates on the same units that built the tree."""
    return estimate_leaves(tree, dataset, indices, level, weighting, method, source="adaptive")


def predict(tree: Tree, estimates: Dict[int, LeafEstimate], x) -> LeafEstimate:
    """Estimate of the leaf that ``x`` falls in (possibly an unavailable one)."""
    leaf = apply(tree, x)
    if leaf not in estimates:
        raise EstimateUnavailable(f"no estimate for leaf {leaf}")
    return estimates[leaf]


def predict_arrays(tree: Tree, estimates: Dict[int, LeafEstimate], X):
    """Vectorised prediction: (leaf ids, tau, ci_lo, ci_hi); nan where unavailable."""
    leaves = tree.apply(X)
    missing = set(np.unique(leaves).tolist()) - set(estimates)
    if missing:
        raise EstimateUnavailable(f"no estimate for leaves {sorted(missing)}")
    ids = sorted(estimates)
    pos = {l: j for j, l in enumerate(ids)}
    tab = np.asarray([[estimates[l].tau_hat, estimates[l].ci_lo, estimates[l].ci_hi] for l in ids])
    j = np.asarray([pos[l] for l in leaves.tolist()], dtype=np.intp)
    return leaves, tab[j, 0], tab[j, 1], tab[j, 2]


CSV_FIELDS = ["leaf_id", "region", "tau_hat", "se", "ci_lo", "ci_hi", "n_treat", "n_control",
              "source", "level", "available", "reason"]


def estimates_to_csv(tree: Tree, estimates: Dict[int, LeafEstimate], path: Union[str, Path, None] = None) -> str:
    """Write (or return) the estimate table, one row per leaf."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_FIELDS)
    for leaf in sorted(estimates):
        e = estimates[leaf]
        wr.writerow([leaf, tree.describe_region(leaf), repr(e.tau_hat), repr(e.se), repr(e.ci_lo),
                     repr(e.ci_hi), e.n_treat, e.n_control, e.source, repr(e.level),
                     int(e.available), e.reason])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def estimates_from_csv(path: Union[str, Path]) -> Dict[int, LeafEstimate]:
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            leaf = int(r["leaf_id"])
            out[leaf] = LeafEstimate(
                leaf_id=leaf,
                tau_hat=float(r["tau_hat"]),
                se=float(r["se"]),
                ci=(float(r["ci_lo"]), float(r["ci_hi"])),
                n_treat=int(r["n_treat"]),
                n_control=int(r["n_control"]),
                source=r["source"],
                level=float(r["level"]),
                available=bool(int(r["available"])),
                reason=r["reason"],
            )
    return out
