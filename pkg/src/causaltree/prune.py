"""Cost-complexity pruning and cross-validated choice of the leaf penalty."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from causaltree.criteria import (
    CriterionError,
    CriterionSpec,
    Suff,
    _stack,
    cv_leaf_values,
    node_values,
    required_cv_support,
)
from causaltree.data import CausalDataset, transformed_outcome
from causaltree.tree import GrowParams, Tree, grow_tree


@dataclass(frozen=True)
class PruneSequence:
    """Nested subtrees with the penalty at which each becomes optimal.

    ``alphas[k]`` is the smallest penalty for which ``trees[k]`` is the
    smallest maximiser of ``objective - alpha * n_leaves``; that tree stays
    optimal up to (not including) ``alphas[k + 1]``.
    """

    alphas: Tuple[float, ...]
    trees: Tuple[Tree, ...]
    values: Dict[int, float]

    @property
    def entries(self) -> List[Tuple[float, Tree]]:
        return list(zip(self.alphas, self.trees))

    def __len__(self):
        return len(self.alphas)

    def index_for(self, alpha: float) -> int:
        if alpha < 0:
            raise ValueError("alpha must be non-negative")
        return int(np.searchsorted(np.asarray(self.alphas), alpha, side="right")) - 1

    def tree_for(self, alpha: float) -> Tree:
        return self.trees[self.index_for(alpha)]


@dataclass(frozen=True)
class CvConfig:
    """K-fold settings; ``folds=None`` means 10 for TOT and 5 otherwise."""

    folds: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.folds is not None and self.folds < 2:
            raise ValueError("need at least 2 folds")

    def k_for(self, spec: CriterionSpec) -> int:
        if self.folds is not None:
            return self.folds
        return 10 if spec.family == "TOT" else 5


def _value_spec(spec: CriterionSpec) -> CriterionSpec:
    # squared t-statistic trees are pruned and cross-validated as causal trees
    if spec.family == "TS":
        return CriterionSpec("CT", spec.honest, spec.mode, spec.p, spec.n_est)
    return spec


def _node_suff(tree: Tree) -> Suff:
    ids = sorted(tree.nodes)
    rows = []
    for i in ids:
        nd = tree.nodes[i]
        if nd.suff is not None:
            rows.append(nd.suff)
        else:
            s = _stack([nd.stats])
            rows.append(tuple(float(getattr(s, a)[0]) for a in ("n1", "s1", "ss1", "n0", "s0", "ss0")))
    a = np.asarray(rows, dtype=float).reshape(-1, 6)
    return Suff(*(a[:, j] for j in range(6)))


def node_value_map(tree: Tree, spec: CriterionSpec) -> Dict[int, float]:
    """Objective contribution of every node were it a leaf."""
    ids = sorted(tree.nodes)
    vals = node_values(_value_spec(spec), _node_suff(tree), tree.n_train or 1)
    return dict(zip(ids, vals.tolist()))


def _optimal_at_zero(tree: Tree, v: Dict[int, float]) -> List[int]:
    """Nodes to collapse for the smallest maximiser of the unpenalised objective."""
    best: Dict[int, float] = {}
    collapse = []
    for nid in sorted(tree.nodes, key=lambda i: -tree.nodes[i].depth):
        nd = tree.nodes[nid]
        if nd.is_leaf:
            best[nid] = v[nid]
            continue
        below = best[nd.left] + best[nd.right]
        if v[nid] >= below:
            best[nid] = v[nid]
            collapse.append(nid)
        else:
            best[nid] = below
    return collapse


def cost_complexity_sequence(tree: Tree, spec: CriterionSpec) -> PruneSequence:
    """Weakest-link pruning sequence of ``tree`` under ``spec``'s objective.

    Node values are computed from the training statistics stored on the
    tree, normalised by its training size.
    """
    v = node_value_map(tree, spec)
    current = tree.collapse(_optimal_at_zero(tree, v))
    alphas = [0.0]
    trees = [current]
    while not current.nodes[current.root].is_leaf:
        total: Dict[int, float] = {}
        count: Dict[int, int] = {}
        for nid in sorted(current.nodes, key=lambda i: -current.nodes[i].depth):
            nd = current.nodes[nid]
            if nd.is_leaf:
                total[nid], count[nid] = v[nid], 1
            else:
                total[nid] = total[nd.left] + total[nd.right]
                count[nid] = count[nd.left] + count[nd.right]
        g = {nid: (total[nid] - v[nid]) / (count[nid] - 1) for nid in current.internal}
        a = min(g.values())
        current = current.collapse([nid for nid, gv in g.items() if gv <= a])
        if a <= alphas[-1]:
            trees[-1] = current
        else:
            alphas.append(a)
            trees.append(current)
    return PruneSequence(tuple(alphas), tuple(trees), v)


def prune(tree: Tree, alpha: float, spec: Optional[CriterionSpec] = None,
          sequence: Optional[PruneSequence] = None) -> Tree:
    """Subtree of ``tree`` that is optimal for leaf penalty ``alpha``."""
    if sequence is None:
        if spec is None:
            raise ValueError("prune needs either a criterion spec or a precomputed sequence")
        sequence = cost_complexity_sequence(tree, spec)
    return sequence.tree_for(alpha)


# ---------------------------------------------------------------------------
# cross-validation


def make_folds(treatments: np.ndarray, k: int, seed) -> List[np.ndarray]:
    """Positions 0..n-1 split into ``k`` folds, stratified by treatment arm."""
    rng = np.random.default_rng(seed)
    treated = np.flatnonzero(treatments == 1)
    control = np.flatnonzero(treatments != 1)
    if treated.size < k or control.size < k:
        raise ValueError(f"cannot form {k} folds that each hold both arms")
    order = np.concatenate([rng.permutation(treated), rng.permutation(control)])
    labels = np.empty(order.size, dtype=np.intp)
    labels[order] = np.arange(order.size) % k
    return [np.flatnonzero(labels == j) for j in range(k)]


def _route_suff(tree: Tree, X: np.ndarray, y: np.ndarray, treated: np.ndarray) -> Dict[int, Suff]:
    out = {}
    stack = [(tree.root, np.arange(X.shape[0]))]
    while stack:
        nid, rows = stack.pop()
        yy, tt = y[rows], treated[rows]
        y1, y0 = yy[tt], yy[~tt]
        out[nid] = (y1.size, y1.sum(), np.dot(y1, y1), y0.size, y0.sum(), np.dot(y0, y0))
        nd = tree.nodes[nid]
        if not nd.is_leaf:
            left = X[rows, nd.feature] <= nd.threshold
            stack.append((nd.left, rows[left]))
            stack.append((nd.right, rows[~left]))
    return out


def _to_suff(rows: Sequence[tuple]) -> Suff:
    a = np.asarray(rows, dtype=float).reshape(-1, 6)
    return Suff(*(a[:, j] for j in range(6)))


def cv_contributions(tree: Tree, spec: CriterionSpec, X, y, treated) -> Dict[int, float]:
    """Held-out objective contribution of each node were it a leaf.

    A node whose held-out units lack the arm support the criterion needs
    borrows means and variances from its nearest supported ancestor.
    """
    spec = _value_spec(spec)
    n_cv = X.shape[0]
    cv = _route_suff(tree, X, y, treated)
    arm_min, pool_min = required_cv_support(spec)

    def supported(t):
        return t[0] >= arm_min and t[3] >= arm_min and t[0] + t[3] >= pool_min

    eff: Dict[int, Optional[int]] = {}
    stack = [tree.root]
    while stack:
        nid = stack.pop()
        nd = tree.nodes[nid]
        eff[nid] = nid if supported(cv[nid]) else (eff[nd.parent] if nd.parent is not None else None)
        if not nd.is_leaf:
            stack += [nd.left, nd.right]
    if eff[tree.root] is None:
        raise CriterionError(
            f"held-out fold lacks {arm_min} units per arm / {pool_min} in total even at the root"
        )
    ids = sorted(tree.nodes)
    train = _node_suff(tree)
    vals = cv_leaf_values(
        spec,
        _to_suff([cv[i] for i in ids]),
        _to_suff([cv[eff[i]] for i in ids]),
        train,
        n_cv,
    )
    return dict(zip(ids, vals.tolist()))


def _grid(alphas: Sequence[float]) -> List[float]:
    a = list(alphas)
    pts = [0.0]
    pts += [math.sqrt(a[j] * a[j + 1]) for j in range(1, len(a) - 1)]
    if len(a) > 1:
        pts.append(math.inf)
    return pts


@dataclass(frozen=True)
class CvResult:
    alpha: float
    grid: Tuple[float, ...]
    scores: Tuple[float, ...]


def select_alpha(
    dataset: CausalDataset,
    indices,
    spec: CriterionSpec,
    params: Optional[GrowParams] = None,
    cv: Optional[CvConfig] = None,
    detail: bool = False,
):
    """Leaf penalty maximising the average held-out objective over folds.

    Each fold regrows a tree on the retained folds and builds its pruning
    sequence. The penalty grid is the union over folds of the geometric
    midpoints of adjacent breakpoints (plus zero and infinity); ties go to
    the larger penalty.
    """
    params = params or GrowParams()
    cv = cv or CvConfig()
    idx = np.sort(np.asarray(indices, dtype=np.intp))
    k = cv.k_for(spec)
    y = transformed_outcome(dataset, spec.p) if spec.family == "TOT" else dataset.outcomes
    treated = dataset.treatments == 1
    folds = make_folds(dataset.treatments[idx], k, cv.seed)

    per_fold = []
    grid = {0.0}
    for held in folds:
        keep = np.ones(idx.size, dtype=bool)
        keep[held] = False
        tree = grow_tree(dataset, idx[keep], spec, params)
        seq = cost_complexity_sequence(tree, spec)
        rows = idx[held]
        contrib = cv_contributions(tree, spec, dataset.covariates[rows], y[rows], treated[rows])
        scores = [sum(contrib[l] for l in t.leaves) for t in seq.trees]
        per_fold.append((seq, scores))
        grid.update(_grid(seq.alphas))

    grid = sorted(grid)
    avg = np.zeros(len(grid))
    for seq, scores in per_fold:
        avg += np.asarray([scores[seq.index_for(a)] for a in grid])
    avg /= len(per_fold)
    best = int(np.flatnonzero(avg == avg.max())[-1])
    if detail:
        return CvResult(grid[best], tuple(grid), tuple(avg.tolist()))
    return grid[best]


@dataclass(frozen=True)
class FitResult:
    """A pruned tree together with the objects that produced it."""

    tree: Tree
    full_tree: Tree
    alpha: float
    sequence: PruneSequence
    spec: CriterionSpec


def fit_tree(
    dataset: CausalDataset,
    indices=None,
    spec: Optional[CriterionSpec] = None,
    params: Optional[GrowParams] = None,
    cv: Optional[CvConfig] = None,
) -> FitResult:
    """Grow a deep tree on ``indices``, choose the penalty by CV and prune.

    For honest specs without ``n_est`` the estimation sample is assumed to
    be the same size as the training sample.
    """
    spec = spec or CriterionSpec()
    if indices is None:
        indices = np.arange(dataset.n)
    indices = np.asarray(indices, dtype=np.intp)
    if spec.n_est is None:
        spec = spec.with_n_est(indices.size)
    full = grow_tree(dataset, indices, spec, params)
    seq = cost_complexity_sequence(full, spec)
    alpha = select_alpha(dataset, indices, spec, params, cv)
    return FitResult(seq.tree_for(alpha), full, alpha, seq, spec)
