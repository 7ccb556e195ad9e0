"""Splitting and cross-validation objectives for the eight tree estimators.

Every objective is oriented so that larger is better (a negated mean
squared error). Apart from the squared t-statistic, each objective is a sum
of per-leaf contributions, which is what makes split gains and weakest-link
pruning expressible in terms of individual nodes.

The vectorised helpers at the bottom of the module work on arrays of
sufficient statistics (counts, sums, sums of squares per arm) and are what
the tree grower and the pruner call; the leaf-level functions above them
take :class:`~causaltree.tree.LeafStats` objects and exist for direct use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

FAMILIES = ("CT", "TOT", "F", "TS")
MODES = ("treatment", "prediction")


class CriterionError(ValueError):
    """A criterion is undefined for the supplied leaf statistics."""


@dataclass(frozen=True)
class CriterionSpec:
    """Which estimator governs splitting and cross-validation.

    Parameters
    ----------
    family : {"CT", "TOT", "F", "TS"}
    honest : bool
        Honest variants penalise leaf-estimate variance and evaluate
        cross-validation folds on the held-out fold alone.
    mode : {"treatment", "prediction"}
        Prediction mode is plain regression on the outcome (CT family only).
    p : float
        Treated share used in the variance penalty and the transformed outcome.
    n_est : int, optional
        Size of the estimation sample; defaults to the training size.
    """

    family: str = "CT"
    honest: bool = True
    mode: str = "treatment"
    p: float = 0.5
    n_est: Optional[int] = None

    def __post_init__(self):
        fam = self.family.upper()
        object.__setattr__(self, "family", fam)
        if fam not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "prediction" and fam not in ("CT", "TOT"):
            raise ValueError(f"{fam} requires treatment mode")
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        if self.n_est is not None and self.n_est < 1:
            raise ValueError("n_est must be at least 1")

    @property
    def name(self) -> str:
        if self.family == "TOT" and self.mode == "prediction":
            return "TOT"
        if self.mode == "prediction":
            return "PRED-" + ("H" if self.honest else "A")
        return f"{self.family}-{'H' if self.honest else 'A'}"

    @property
    def pooled(self) -> bool:
        """True when leaves are summarised without separating the arms."""
        return self.family == "TOT" or self.mode == "prediction"

    @property
    def penalised(self) -> bool:
        """True when node values carry the honest variance penalty."""
        return self.honest and self.family != "TOT"

    def with_n_est(self, n_est: Optional[int]) -> "CriterionSpec":
        return CriterionSpec(self.family, self.honest, self.mode, self.p, n_est)


def parse_estimator(name: str, p: float = 0.5, n_est: Optional[int] = None) -> CriterionSpec:
    """Build a spec from names such as ``"CT-H"``, ``"ts-a"`` or ``"fit-honest"``."""
    raw = name.strip().upper().replace("_", "-")
    fam, _, hon = raw.partition("-")
    fam = {"FIT": "F"}.get(fam, fam)
    honest = {"H": True, "HONEST": True, "A": False, "ADAPTIVE": False, "": True}.get(hon)
    if honest is None or fam not in FAMILIES:
        raise ValueError(f"unrecognised estimator {name!r}")
    return CriterionSpec(family=fam, honest=honest, p=p, n_est=n_est)


# ---------------------------------------------------------------------------
# leaf-level functions


def _require_arms(s, k: int = 1):
    if s.n_treat < k or s.n_control < k:
        raise CriterionError(
            f"leaf needs >= {k} treated and control units, has {s.n_treat} treated / {s.n_control} control"
        )


def tau_hat(stats) -> float:
    """Difference of arm means within a leaf."""
    _require_arms(stats)
    return stats.mean_treat - stats.mean_control


def adaptive_ct_value(leaves: Sequence, n_total: int) -> float:
    """In-sample goodness of fit for treatment effects: sum n_l tau_l^2 / N."""
    return sum((s.n_treat + s.n_control) * tau_hat(s) ** 2 for s in leaves) / n_total


def _arm_var(s, arm: str) -> float:
    v = getattr(s, f"var_{arm}")
    if v is None:
        raise CriterionError(f"leaf variance for the {arm} arm is undefined (fewer than 2 units)")
    return v


def honest_ct_value(leaves: Sequence, n_train: int, n_est: Optional[int] = None, p: float = 0.5) -> float:
    """Unbiased estimate of the negated expected treatment-effect MSE.

    ``sum n_l tau_l^2 / N - (1/N + 1/N_est) sum (S2_treat / p + S2_control / (1 - p))``
    """
    n_est = n_train if n_est is None else n_est
    fit = adaptive_ct_value(leaves, n_train)
    pen = sum(_arm_var(s, "treat") / p + _arm_var(s, "control") / (1 - p) for s in leaves)
    return fit - (1.0 / n_train + 1.0 / n_est) * pen


def prediction_value(leaves: Sequence, n_total: int, honest: bool = False, n_est: Optional[int] = None) -> float:
    """Regression-tree objective on the pooled outcome, adaptive or honest."""
    fit = sum(s.n * s.mean_all**2 for s in leaves) / n_total
    if not honest:
        return fit
    n_est = n_total if n_est is None else n_est
    pen = 0.0
    for s in leaves:
        if s.var_all is None:
            raise CriterionError("pooled leaf variance undefined (fewer than 2 units)")
        pen += s.var_all
    return fit - (1.0 / n_total + 1.0 / n_est) * pen


def tot_value(leaves: Sequence, n_total: int) -> float:
    """CART anova objective on the transformed outcome (leaf stats built on Y*)."""
    return sum(s.n * s.mean_all**2 for s in leaves) / n_total


def fit_value(leaves: Sequence, honest: bool, n_total: int, n_est: Optional[int] = None) -> float:
    """Objective of the within-leaf model intercept + treatment indicator."""
    fit = 0.0
    for s in leaves:
        _require_arms(s)
        fit += s.n_treat * s.mean_treat**2 + s.n_control * s.mean_control**2
    fit /= n_total
    if not honest:
        return fit
    n_est = n_total if n_est is None else n_est
    pen = sum(_arm_var(s, "treat") + _arm_var(s, "control") for s in leaves)
    return fit - (1.0 / n_total + 1.0 / n_est) * pen


def ts_split_stat(left, right, pooled_var: Optional[float] = None) -> float:
    """Squared t-statistic for equal treatment effects in two child leaves.

    ``T^2 = (tau_L - tau_R)^2 / (S^2 (1/N_L1 + 1/N_L0 + 1/N_R1 + 1/N_R0))``
    where ``S^2`` defaults to the within-cell variance pooled over the four
    (leaf, arm) cells with divisor ``n - 4``.
    """
    cells = [(left, "treat"), (left, "control"), (right, "treat"), (right, "control")]
    counts = [getattr(s, f"n_{a}") for s, a in cells]
    if min(counts) < 1:
        raise CriterionError("every (leaf, arm) cell needs at least one unit")
    if pooled_var is None:
        if sum(counts) <= 4:
            raise CriterionError("pooled variance needs more than four units")
        ssd = sum((c - 1) * (getattr(s, f"var_{a}") or 0.0) for (s, a), c in zip(cells, counts))
        pooled_var = ssd / (sum(counts) - 4)
    v = pooled_var * sum(1.0 / c for c in counts)
    if v <= 0:
        raise CriterionError("zero variance in the t-statistic denominator")
    return (tau_hat(left) - tau_hat(right)) ** 2 / v


def cv_value(
    spec: CriterionSpec,
    cv_leaves: Sequence,
    train_leaves: Sequence,
    n_cv: Optional[int] = None,
    support: Optional[Sequence] = None,
) -> float:
    """Cross-validation objective of a fixed tree.

    Parameters
    ----------
    cv_leaves : LeafStats of the held-out fold, one per leaf.
    train_leaves : LeafStats of the fold used to build the tree, same order.
    n_cv : size of the held-out fold (defaults to the sum of leaf counts).
    support : optional LeafStats used in place of ``cv_leaves`` for means and
        variances, e.g. an ancestor's when a leaf lacks an arm in the fold.
        Leaf counts always come from ``cv_leaves``.
    """
    support = cv_leaves if support is None else support
    cv = _stack(cv_leaves)
    sup = _stack(support)
    tr = _stack(train_leaves)
    n_cv = int(cv.n.sum()) if n_cv is None else n_cv
    vals = cv_leaf_values(spec, cv, sup, tr, n_cv)
    if not np.all(np.isfinite(vals)):
        raise CriterionError("a leaf lacks the arm support the cross-validation criterion needs")
    return float(vals.sum())


@dataclass(frozen=True)
class ComparisonTerms:
    """Closed-form quantities for a single split on a binary covariate."""

    t0_sq: float
    t1_sq: float
    ts_sq: float
    s2_split: float
    s2_nosplit: float
    f_gain: float
    ct_h_gain: float
    n: int
    p: float


def comparison_identities(y, w, in_left) -> ComparisonTerms:
    """Closed-form F gain and honest causal-tree gain for one binary split.

    Follows the degrees-of-freedom-free algebra: the design must be
    balanced (equal counts in all four leaf x arm cells, so p = 1/2),
    variances are pooled within-cell sums of squares divided by the per-arm
    size N/2, and both gains are on the scale of 2N times the per-unit
    criterion change.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w).astype(bool)
    left = np.asarray(in_left).astype(bool)
    cells = [left & w, left & ~w, ~left & w, ~left & ~w]
    counts = [int(c.sum()) for c in cells]
    if min(counts) < 1:
        raise CriterionError("all four cells must be populated")
    if len(set(counts)) != 1:
        raise CriterionError(f"design must be balanced across cells, got counts {counts}")
    n = y.size
    p = float(w.mean())
    means = [y[c].mean() for c in cells]
    ssr_split = sum(((y[c] - m) ** 2).sum() for c, m in zip(cells, means))
    ssr_nosplit = sum(((y[a] - y[a].mean()) ** 2).sum() for a in (w, ~w))
    s2 = ssr_split / (n / 2)
    s2_tilde = ssr_nosplit / (n / 2)
    if s2 <= 0:
        raise CriterionError("zero within-cell variance")
    n_l1, n_l0, n_r1, n_r0 = counts
    m_l1, m_l0, m_r1, m_r0 = means
    t1 = (m_l1 - m_r1) ** 2 / (s2 / n_l1 + s2 / n_r1)
    t0 = (m_l0 - m_r0) ** 2 / (s2 / n_l0 + s2 / n_r0)
    pooled = ssr_split / n
    ts = ((m_l1 - m_l0) - (m_r1 - m_r0)) ** 2 / (pooled * sum(1.0 / c for c in counts))
    tsum = t0 + t1
    f = s2_tilde * 2 * tsum / (1 + 2 * tsum / n)
    gain = ((ts - 4) * (s2_tilde - f / n) + 2 * s2_tilde) / (p * (1 - p))
    return ComparisonTerms(t0, t1, ts, s2, s2_tilde, f, gain, n, p)


# ---------------------------------------------------------------------------
# vectorised sufficient-statistic machinery


@dataclass
class Suff:
    """Arrays of per-node sufficient statistics.

    ``n``/``s``/``ss`` are pooled count, sum and sum of squares; the ``1`` and
    ``0`` suffixes are the treated and control arms.
    """

    n1: np.ndarray
    s1: np.ndarray
    ss1: np.ndarray
    n0: np.ndarray
    s0: np.ndarray
    ss0: np.ndarray

    @property
    def n(self):
        return self.n1 + self.n0

    @property
    def s(self):
        return self.s1 + self.s0

    @property
    def ss(self):
        return self.ss1 + self.ss0


def _stack(leaves: Sequence) -> Suff:
    """Recover sufficient statistics from LeafStats objects."""

    def arm(s, a):
        n = getattr(s, f"n_{a}")
        m = getattr(s, f"mean_{a}")
        v = getattr(s, f"var_{a}")
        if n == 0:
            return 0.0, 0.0, 0.0
        m = 0.0 if m is None else m
        v = 0.0 if v is None else v
        return float(n), n * m, (n - 1) * v + n * m * m

    rows = [arm(s, "treat") + arm(s, "control") for s in leaves]
    a = np.asarray(rows, dtype=float).reshape(-1, 6)
    return Suff(*(a[:, j] for j in range(6)))


def moments(n, s, ss):
    """Means (nan when empty) and unbiased variances (nan when n < 2)."""
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s / n
        ssd = np.maximum(ss - s * mean, 0.0)
        var = ssd / (n - 1)
    mean = np.where(n > 0, mean, np.nan)
    var = np.where(n > 1, var, np.nan)
    return mean, var


def node_values(spec: CriterionSpec, st: Suff, n_total: int) -> np.ndarray:
    """Per-node contribution to the (additive) objective of ``spec``.

    The squared t-statistic family is valued with the causal-tree objective
    of the same honesty, which is what it is pruned and cross-validated on.
    """
    n_est = spec.n_est or n_total
    pen = 1.0 / n_total + 1.0 / n_est
    if spec.pooled:
        m, v = moments(st.n, st.s, st.ss)
        val = st.n * np.nan_to_num(m) ** 2 / n_total
        if spec.penalised:
            val = val - pen * v
        return val
    m1, v1 = moments(st.n1, st.s1, st.ss1)
    m0, v0 = moments(st.n0, st.s0, st.ss0)
    if spec.family == "F":
        val = (st.n1 * m1**2 + st.n0 * m0**2) / n_total
        if spec.penalised:
            val = val - pen * (v1 + v0)
        return val
    val = st.n * (m1 - m0) ** 2 / n_total
    if spec.penalised:
        val = val - pen * (v1 / spec.p + v0 / (1 - spec.p))
    return val


def ts_gain(left: Suff, right: Suff) -> np.ndarray:
    """Squared t-statistic for each candidate (left, right) pair; nan if undefined."""
    cells = [(left.n1, left.s1, left.ss1), (left.n0, left.s0, left.ss0),
             (right.n1, right.s1, right.ss1), (right.n0, right.s0, right.ss0)]
    means = []
    ssd = 0.0
    inv = 0.0
    ntot = 0.0
    for n, s, ss in cells:
        with np.errstate(invalid="ignore", divide="ignore"):
            m = s / n
            ssd = ssd + np.maximum(ss - s * m, 0.0)
            inv = inv + 1.0 / n
        means.append(m)
        ntot = ntot + n
    with np.errstate(invalid="ignore", divide="ignore"):
        s2 = ssd / (ntot - 4)
        diff = (means[0] - means[1]) - (means[2] - means[3])
        t2 = diff**2 / (s2 * inv)
    return np.where(s2 * inv > 0, t2, np.nan)


def required_cv_support(spec: CriterionSpec) -> tuple:
    """Minimum (per-arm, pooled) cv counts a leaf needs to be self-supporting."""
    if spec.pooled:
        return (0, 2 if spec.penalised else 0)
    if spec.penalised:
        return (2, 0)
    if spec.family == "F":
        return (0, 0)
    return (1, 0)


def cv_leaf_values(spec: CriterionSpec, cv: Suff, support: Suff, train: Suff, n_cv: int) -> np.ndarray:
    """Per-leaf cross-validation contributions.

    Honest families re-evaluate their splitting objective on the held-out
    fold alone (``support`` supplies means and variances, ``cv`` the leaf
    weights). Adaptive families use the cross-sample form
    ``(1/N_cv) sum_i (2 est_cv(i) est_tr(i) - est_tr(i)^2)``, which equals the
    negated held-out MSE up to a term that does not depend on the tree.
    """
    n_est = spec.n_est or n_cv
    pen = 1.0 / n_cv + 1.0 / n_est
    if spec.pooled:
        if spec.penalised:
            m, v = moments(support.n, support.s, support.ss)
            return cv.n * m**2 / n_cv - pen * v
        mt, _ = moments(train.n, train.s, train.ss)
        return (2 * cv.s * mt - cv.n * mt**2) / n_cv
    if spec.family == "F":
        if spec.penalised:
            m1, v1 = moments(support.n1, support.s1, support.ss1)
            m0, v0 = moments(support.n0, support.s0, support.ss0)
            return (cv.n1 * m1**2 + cv.n0 * m0**2) / n_cv - pen * (v1 + v0)
        mt1, _ = moments(train.n1, train.s1, train.ss1)
        mt0, _ = moments(train.n0, train.s0, train.ss0)
        return (2 * cv.s1 * mt1 - cv.n1 * mt1**2 + 2 * cv.s0 * mt0 - cv.n0 * mt0**2) / n_cv
    m1, v1 = moments(support.n1, support.s1, support.ss1)
    m0, v0 = moments(support.n0, support.s0, support.ss0)
    tau_cv = m1 - m0
    if spec.penalised:
        return cv.n * tau_cv**2 / n_cv - pen * (v1 / spec.p + v0 / (1 - spec.p))
    mt1, _ = moments(train.n1, train.s1, train.ss1)
    mt0, _ = moments(train.n0, train.s0, train.ss0)
    tau_tr = mt1 - mt0
    return cv.n * (2 * tau_cv * tau_tr - tau_tr**2) / n_cv
