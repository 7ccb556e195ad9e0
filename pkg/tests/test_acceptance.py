"""End-to-end acceptance checks, one test per criterion.

The Monte Carlo studies are shared through the ``study`` fixture, so the
first test touching a design pays for its 200 replications. Each test
records a PASS/FAIL line that is echoed in the terminal summary.
"""

import itertools
import math

import numpy as np

from causaltree.cli import main
from causaltree.criteria import (
    adaptive_ct_value,
    comparison_identities,
    fit_value,
    honest_ct_value,
    parse_estimator,
    prediction_value,
)
from causaltree.data import CausalDataset, write_csv
from causaltree.evaluation import mse_tau_infeasible
from causaltree.prune import prune
from causaltree.sim import DESIGNS, SimConfig, generate, simulate
from causaltree.tree import GrowParams, grow_tree, leaf_stats

HONEST = ("CT-H", "TS-H", "F-H", "TOT-H")


def _fmt(report, names, metric):
    return ", ".join(f"{n} {report.get(n, metric).mean:.3f}" for n in names)


def test_criterion_01_honest_coverage(study, verdict):
    parts, ok = [], True
    for key in ("d1", "d2", "d3"):
        rep = study(key)
        cov = {n: rep.get(n, "coverage").mean for n in HONEST}
        ok &= all(0.87 <= c <= 0.93 for c in cov.values())
        parts.append(f"{key}: " + _fmt(rep, HONEST, "coverage"))
    verdict(1, ok, "honest coverage in [0.87, 0.93]; " + "; ".join(parts))


def test_criterion_02_adaptive_undercoverage(study, verdict):
    rep = study("d3")
    adaptive, honest = rep.get("CT-A", "coverage").mean, rep.get("CT-H", "coverage").mean
    ok = adaptive <= 0.85 and adaptive <= honest - 0.04
    verdict(2, ok, f"design 3 CT-A {adaptive:.3f} vs CT-H {honest:.3f}")


def test_criterion_03_fit_ordering(study, verdict):
    d1, d3 = study("d1"), study("d3_1000")
    fa = d1.get("F-A", "mse_ratio_ct_h").mean
    tot = d1.get("TOT-H", "mse_ratio_ct_h").mean
    ts = d3.get("TS-H", "mse_ratio_ct_h").mean
    ok = fa > 1.3 and tot > 1.3 and ts > 1.15
    verdict(3, ok, f"design 1 F-A/CT-H {fa:.3f}, TOT-H/CT-H {tot:.3f}; design 3 N=1000 TS-H/CT-H {ts:.3f}")


def test_criterion_04_tree_sizes(study, verdict):
    rep = study("d2")
    tot, cta, cth = (rep.get(n, "leaves") for n in ("TOT-H", "CT-A", "CT-H"))

    def separated(a, b):
        return b.mean - a.mean >= 2 * math.hypot(a.se, b.se)

    ok = separated(tot, cta) and separated(cta, cth)
    verdict(4, ok, f"design 2 leaves TOT {tot.mean:.2f} ({tot.se:.2f}) < CT-A {cta.mean:.2f} ({cta.se:.2f}) "
                   f"< CT-H {cth.mean:.2f} ({cth.se:.2f})")


def _quadrants(X):
    return (X[:, 0] > 0).astype(int) * 2 + (X[:, 1] > 0).astype(int)


def _leaf_sets(ds):
    q = _quadrants(ds.covariates)
    return q, [leaf_stats(ds, np.flatnonzero(q == j)) for j in range(4)]


def test_criterion_05_unbiased_criterion(verdict):
    rng = np.random.default_rng(55)
    n, draws = 500, 2000
    est_tau, neg_emse_tau, est_mu, neg_emse_mu = [], [], [], []
    for _ in range(draws):
        _, stats = _leaf_sets(generate(1, n, rng))
        est_tau.append(honest_ct_value(stats, n, n, 0.5))
        est_mu.append(prediction_value(stats, n, honest=True, n_est=n))
        # independent estimation and test samples for the target
        _, est_stats = _leaf_sets(generate(1, n, rng))
        tau_leaf = np.array([s.mean_treat - s.mean_control for s in est_stats])
        mu_leaf = np.array([s.mean_all for s in est_stats])
        test = generate(1, 2000, rng)
        q = _quadrants(test.covariates)
        neg_emse_tau.append(-mse_tau_infeasible(test, tau_leaf[q]))
        neg_emse_mu.append(-np.mean((test.outcomes - mu_leaf[q]) ** 2 - test.outcomes**2))

    def gap(a, b):
        a, b = np.asarray(a), np.asarray(b)
        se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
        return (a.mean() - b.mean()) / se, a.mean(), b.mean()

    z_tau, a_tau, b_tau = gap(est_tau, neg_emse_tau)
    z_mu, a_mu, b_mu = gap(est_mu, neg_emse_mu)
    ok = abs(z_tau) <= 4 and abs(z_mu) <= 4
    verdict(5, ok, f"treatment {a_tau:.4f} vs {b_tau:.4f} ({z_tau:+.2f} se); "
                   f"prediction {a_mu:.4f} vs {b_mu:.4f} ({z_mu:+.2f} se)")


def _direct_gains(y, w, left):
    """2N times the split change of the adaptive fit and honest causal criteria.

    Cell variances divide by the cell size and the honest penalty uses an
    estimation sample as large as the training sample.
    """
    n = y.size

    def cells(mask):
        return [(int((mask & a).sum()), y[mask & a].mean(), y[mask & a].var()) for a in (w, ~w)]

    def f_value(parts):
        return sum(n1 * m1**2 + n0 * m0**2 for (n1, m1, _), (n0, m0, _) in parts) / n

    def ct_h_value(parts):
        fit = sum((n1 + n0) * (m1 - m0) ** 2 for (n1, m1, _), (n0, m0, _) in parts) / n
        pen = sum(v1 / 0.5 + v0 / 0.5 for (_, _, v1), (_, _, v0) in parts)
        return fit - (2 / n) * pen

    root = [cells(np.ones(n, dtype=bool))]
    kids = [cells(left), cells(~left)]
    return 2 * n * (f_value(kids) - f_value(root)), 2 * n * (ct_h_value(kids) - ct_h_value(root))


def test_criterion_06_comparison_identities(verdict):
    rng = np.random.default_rng(66)
    worst = 0.0
    for _ in range(1000):
        m = int(rng.integers(2, 21))
        w = np.tile([True, False], 2 * m)
        left = np.repeat([True, False], 2 * m)
        perm = rng.permutation(4 * m)
        w, left = w[perm], left[perm]
        y = rng.normal(size=4 * m) * rng.uniform(0.1, 3) + rng.normal(size=4) @ np.array(
            [w & left, w & ~left, ~w & left, ~w & ~left], dtype=float)
        terms = comparison_identities(y, w, left)
        f, ct = _direct_gains(y, w, left)
        worst = max(worst, abs(terms.f_gain - f), abs(terms.ct_h_gain - ct))
    verdict(6, worst <= 1e-8, f"largest deviation over 1000 instances {worst:.2e}")


def test_criterion_07_transformed_outcome_mean(verdict):
    rng = np.random.default_rng(77)
    n = 100_000
    cells = [(1, [2.0, 0.0], 0.5), (1, [-1.0, 1.0], 0.3), (2, [1.0, -0.5] + [0.3] * 8, 0.5),
             (3, [0.5, 0.5, -1.0, 2.0] + [0.0] * 16, 0.7)]
    worst, ok = 0.0, True
    for design, x, p in cells:
        d = DESIGNS[design]
        xx = np.asarray([x])
        tau = float(d.kappa(xx)[0])
        w = rng.random(n) < p
        y = d.eta(xx)[0] + 0.5 * (2 * w - 1) * tau + rng.normal(0, d.noise_sd, n)
        ystar = y * (w - p) / (p * (1 - p))
        z = (ystar.mean() - tau) / (ystar.std(ddof=1) / math.sqrt(n))
        worst = max(worst, abs(z))
        ok &= abs(z) <= 4
    verdict(7, ok, f"{len(cells)} cells, largest |mean(Y*) - tau| = {worst:.2f} se")


def _subtrees(tree, nid):
    """Every pruned subtree below ``nid``, as a frozenset of leaf ids."""
    nd = tree.nodes[nid]
    out = [frozenset([nid])]
    if not nd.is_leaf:
        for a, b in itertools.product(_subtrees(tree, nd.left), _subtrees(tree, nd.right)):
            out.append(a | b)
    return out


def _leaf_value(spec, stats, n):
    if spec.family == "CT":
        return honest_ct_value([stats], n, spec.n_est, spec.p) if spec.honest else adaptive_ct_value([stats], n)
    return fit_value([stats], spec.honest, n, spec.n_est)


def test_criterion_08_pruning_brute_force(verdict):
    rng = np.random.default_rng(88)
    names = ("CT-A", "CT-H", "F-A", "F-H")
    checked = mismatches = 0
    while checked < 50:
        n = int(rng.integers(24, 41))
        X = rng.normal(size=(n, 2))
        w = rng.permutation(np.arange(n) % 2)
        y = X[:, 0] + w * (X[:, 1] > 0) * rng.uniform(0.5, 3) + rng.normal(size=n)
        ds = CausalDataset(y, w, X)
        spec = parse_estimator(names[checked % 4], p=ds.marginal_p, n_est=n)
        tree = grow_tree(ds, None, spec, GrowParams(n_min=3, bucket_size=1, max_depth=2))
        if not 2 <= tree.n_leaves <= 4:
            continue
        leaf_of = tree.apply(ds.covariates)
        units = {nid: [] for nid in tree.nodes}
        for i, leaf in enumerate(leaf_of.tolist()):
            for nid in tree.path(leaf):
                units[nid].append(i)
        value = {nid: _leaf_value(spec, leaf_stats(ds, np.asarray(u)), n) for nid, u in units.items()}
        span = max(abs(sum(value[l] for l in tree.leaves) - value[tree.root]), 1e-3)
        alpha = float(rng.uniform(0, 1.5 * span))
        best = max(_subtrees(tree, tree.root),
                   key=lambda s: (round(sum(value[l] for l in s) - alpha * len(s), 12), -len(s)))
        got = frozenset(prune(tree, alpha, spec).leaves)
        mismatches += got != best
        checked += 1
    verdict(8, mismatches == 0, f"{checked} (dataset, alpha) pairs, {mismatches} mismatches")


def _ranking(report, metric):
    return tuple(sorted(HONEST, key=lambda n: report.get(n, metric).mean))


def test_criterion_09_feasible_ranking(study, verdict):
    parts, ok = [], True
    for key in ("d1", "d2"):
        rep = study(key)
        infeasible = _ranking(rep, "mse_ratio_ct_h")
        feasible = _ranking(rep, "mse_tot_ratio_ct_h")
        ok &= infeasible == feasible
        parts.append(f"{key}: MSE_tau {' < '.join(infeasible)}, MSE^TOT {' < '.join(feasible)}")
    verdict(9, ok, "; ".join(parts))


def test_criterion_10_determinism(tmp_path, verdict):
    cfg = SimConfig(design=2, replications=3, n_test=1000, estimators=("CT-H", "TOT-A", "TS-H"), seed=10)
    sims = [simulate(cfg).to_csv(), simulate(cfg).to_csv(), simulate(cfg, workers=2).to_csv()]
    same_sim = len(set(sims)) == 1

    data = tmp_path / "d.csv"
    write_csv(generate(1, 800, 10), data)
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["fit", str(data), "--out-dir", str(out), "--seed", "4", "--quiet", "--true-cate", "tau"]) == 0
        outputs.append(tuple((out / f).read_bytes() for f in ("tree.json", "estimates.csv", "report.txt")))
    same_fit = outputs[0] == outputs[1]
    verdict(10, same_sim and same_fit, f"simulate identical: {same_sim}; fit identical: {same_fit}")
