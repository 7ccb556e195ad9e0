"""Binary partitions of covariate space and greedy recursive growth."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from causaltree.criteria import CriterionSpec, Suff, node_values, ts_gain
from causaltree.data import CausalDataset, transformed_outcome


class GrowError(ValueError):
    """The training sample cannot support even a root leaf."""


@dataclass(frozen=True)
class LeafStats:
    """Per-arm counts, means and unbiased variances for the units in a node.

    Means are ``None`` for an empty arm and variances are ``None`` when the
    arm has fewer than two units. In weighted mode means are weighted and
    ``sum_weights_*`` hold the arm weight totals.
    """

    n_treat: int
    n_control: int
    mean_treat: Optional[float]
    mean_control: Optional[float]
    var_treat: Optional[float]
    var_control: Optional[float]
    mean_all: Optional[float]
    var_all: Optional[float]
    sum_weights_treat: float = 0.0
    sum_weights_control: float = 0.0

    @property
    def n(self) -> int:
        return self.n_treat + self.n_control

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _moments(y: np.ndarray, wt: Optional[np.ndarray]):
    n = y.size
    if n == 0:
        return None, None, 0.0
    if wt is None:
        mean = float(y.mean())
        var = float(y.var(ddof=1)) if n >= 2 else None
        return mean, var, float(n)
    sw = float(wt.sum())
    mean = float(np.dot(wt, y) / sw)
    var = None
    if n >= 2:
        var = float(np.dot(wt, (y - mean) ** 2) / sw * n / (n - 1))
    return mean, var, sw


def leaf_stats(dataset: CausalDataset, indices, weights=None, outcomes=None) -> LeafStats:
    """Summarise ``indices`` of ``dataset``.

    ``outcomes`` replaces the dataset outcomes (used for the transformed
    outcome); ``weights`` gives per-row weights aligned with ``indices``.
    """
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("leaf_stats needs at least one index")
    y = (dataset.outcomes if outcomes is None else np.asarray(outcomes, dtype=float))[idx]
    treated = dataset.treatments[idx] == 1
    wt = None if weights is None else np.asarray(weights, dtype=float)
    m1, v1, sw1 = _moments(y[treated], None if wt is None else wt[treated])
    m0, v0, sw0 = _moments(y[~treated], None if wt is None else wt[~treated])
    ma, va, _ = _moments(y, wt)
    return LeafStats(
        n_treat=int(treated.sum()),
        n_control=int((~treated).sum()),
        mean_treat=m1,
        mean_control=m0,
        var_treat=v1,
        var_control=v0,
        mean_all=ma,
        var_all=va,
        sum_weights_treat=sw1,
        sum_weights_control=sw0,
    )


@dataclass(frozen=True)
class GrowParams:
    """Growth controls.

    Parameters
    ----------
    n_min : int
        Minimum treated and minimum control units per leaf.
    bucket_size : int
        Target observations per bucket when discretising candidate splits.
    max_depth : int, optional
    min_leaf_pooled : int, optional
        Minimum total leaf size for pooled (transformed-outcome and
        prediction) trees; defaults to ``2 * n_min``.
    """

    n_min: int = 25
    bucket_size: int = 4
    max_depth: Optional[int] = None
    min_leaf_pooled: Optional[int] = None

    def __post_init__(self):
        if self.n_min < 2:
            raise ValueError("n_min must be at least 2")
        if self.bucket_size < 1:
            raise ValueError("bucket_size must be at least 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")

    @property
    def pooled_min(self) -> int:
        return self.min_leaf_pooled if self.min_leaf_pooled is not None else 2 * self.n_min


@dataclass(frozen=True)
class Node:
    id: int
    depth: int
    parent: Optional[int] = None
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional[int] = None
    right: Optional[int] = None
    stats: Optional[LeafStats] = None
    suff: Optional[tuple] = None
    indices: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass(frozen=True)
class Tree:
    """An axis-aligned binary partition; ``x[feature] <= threshold`` goes left.

    ``nodes`` maps node id to :class:`Node`. Pruned trees keep the ids of the
    tree they were pruned from, so leaves of nested trees can be compared
    directly.
    """

    nodes: Dict[int, Node]
    n_features: int
    n_train: int = 0
    root: int = 0
    feature_names: tuple = ()

    @property
    def leaves(self) -> List[int]:
        return sorted(i for i, nd in self.nodes.items() if nd.is_leaf)

    @property
    def internal(self) -> List[int]:
        return sorted(i for i, nd in self.nodes.items() if not nd.is_leaf)

    @property
    def n_leaves(self) -> int:
        return sum(nd.is_leaf for nd in self.nodes.values())

    def apply(self, X) -> np.ndarray:
        """Leaf id for each row of ``X``."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} covariates, got {X.shape[1]}")
        out = np.full(X.shape[0], self.root, dtype=np.intp)
        stack = [(self.root, np.arange(X.shape[0]))]
        while stack:
            nid, rows = stack.pop()
            nd = self.nodes[nid]
            if nd.is_leaf:
                out[rows] = nid
                continue
            go_left = X[rows, nd.feature] <= nd.threshold
            stack.append((nd.left, rows[go_left]))
            stack.append((nd.right, rows[~go_left]))
        return out

    def path(self, node_id: int) -> List[int]:
        """Node ids from the root down to ``node_id``."""
        out = [node_id]
        while self.nodes[out[-1]].parent is not None:
            out.append(self.nodes[out[-1]].parent)
        return out[::-1]

    def region(self, node_id: int) -> Dict[int, tuple]:
        """Per-feature ``(lo, hi]`` bounds of the box a node covers."""
        box: Dict[int, list] = {}
        p = self.path(node_id)
        for parent, child in zip(p, p[1:]):
            nd = self.nodes[parent]
            lo, hi = box.setdefault(nd.feature, [-math.inf, math.inf])
            if child == nd.left:
                box[nd.feature][1] = min(hi, nd.threshold)
            else:
                box[nd.feature][0] = max(lo, nd.threshold)
        return {f: tuple(b) for f, b in sorted(box.items())}

    def describe_region(self, node_id: int) -> str:
        parts = []
        for f, (lo, hi) in self.region(node_id).items():
            name = self._name(f)
            if lo > -math.inf and hi < math.inf:
                parts.append(f"{lo:.6g} < {name} <= {hi:.6g}")
            elif hi < math.inf:
                parts.append(f"{name} <= {hi:.6g}")
            else:
                parts.append(f"{name} > {lo:.6g}")
        return " & ".join(parts) if parts else "all"

    def _name(self, f: int) -> str:
        return self.feature_names[f] if self.feature_names else f"x{f + 1}"

    def descendants(self, node_id: int) -> List[int]:
        out, stack = [], [node_id]
        while stack:
            nd = self.nodes[stack.pop()]
            if not nd.is_leaf:
                out += [nd.left, nd.right]
                stack += [nd.left, nd.right]
        return out

    def subtree_leaves(self, node_id: int) -> List[int]:
        return sorted(i for i in [node_id, *self.descendants(node_id)] if self.nodes[i].is_leaf)

    def collapse(self, node_ids) -> "Tree":
        """A copy in which each node in ``node_ids`` becomes a leaf."""
        nodes = dict(self.nodes)
        for nid in node_ids:
            if nid not in nodes or nodes[nid].is_leaf:
                continue
            for d in self.descendants(nid):
                nodes.pop(d, None)
            nodes[nid] = dataclasses.replace(nodes[nid], feature=None, threshold=None, left=None, right=None)
        return dataclasses.replace(self, nodes=nodes)

    # serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        rows = []
        for nid in sorted(self.nodes):
            nd = self.nodes[nid]
            rows.append(
                {
                    "id": nd.id,
                    "parent": nd.parent,
                    "depth": nd.depth,
                    "split": None if nd.is_leaf else {"feature": nd.feature, "threshold": nd.threshold},
                    "children": None if nd.is_leaf else [nd.left, nd.right],
                    "leaf": nd.stats.to_dict() if (nd.is_leaf and nd.stats is not None) else None,
                    "stats": nd.stats.to_dict() if nd.stats is not None else None,
                }
            )
        return {
            "n_features": self.n_features,
            "n_train": self.n_train,
            "root": self.root,
            "feature_names": list(self.feature_names),
            "nodes": rows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        nodes = {}
        for r in d["nodes"]:
            split = r.get("split")
            kids = r.get("children")
            st = r.get("stats") or r.get("leaf")
            nodes[r["id"]] = Node(
                id=r["id"],
                depth=r.get("depth", 0),
                parent=r.get("parent"),
                feature=None if split is None else int(split["feature"]),
                threshold=None if split is None else float(split["threshold"]),
                left=None if kids is None else kids[0],
                right=None if kids is None else kids[1],
                stats=None if st is None else LeafStats(**st),
            )
        tree = cls(
            nodes=nodes,
            n_features=d["n_features"],
            n_train=d.get("n_train", 0),
            root=d.get("root", 0),
            feature_names=tuple(d.get("feature_names", ())),
        )
        _check_structure(tree)
        return tree

    def to_text(self) -> str:
        lines: List[str] = []

        def walk(nid, indent):
            nd = self.nodes[nid]
            pad = "  " * indent
            st = nd.stats
            count = f"n={st.n} (treated {st.n_treat}, control {st.n_control})" if st else ""
            if nd.is_leaf:
                tau = ""
                if st and st.mean_treat is not None and st.mean_control is not None:
                    tau = f" tau={st.mean_treat - st.mean_control:.6g}"
                lines.append(f"{pad}leaf {nid}: {count}{tau}")
                return
            name = self._name(nd.feature)
            lines.append(f"{pad}node {nid}: {count}")
            lines.append(f"{pad}  {name} <= {nd.threshold:.6g}:")
            walk(nd.left, indent + 2)
            lines.append(f"{pad}  {name} > {nd.threshold:.6g}:")
            walk(nd.right, indent + 2)

        walk(self.root, 0)
        return "\n".join(lines) + "\n"


def _check_structure(tree: Tree):
    seen = set()
    stack = [tree.root]
    while stack:
        nid = stack.pop()
        if nid in seen:
            raise ValueError(f"node {nid} reachable twice")
        seen.add(nid)
        nd = tree.nodes[nid]
        if (nd.left is None) != (nd.right is None) or (nd.left is None) != (nd.feature is None):
            raise ValueError(f"node {nid} must be either a split or a leaf")
        if not nd.is_leaf:
            for c in (nd.left, nd.right):
                if c not in tree.nodes or tree.nodes[c].parent != nid:
                    raise ValueError(f"child {c} of node {nid} does not name it as parent")
            stack += [nd.left, nd.right]
    if seen != set(tree.nodes):
        raise ValueError("tree contains unreachable nodes")


def apply(tree: Tree, x) -> int:
    """Leaf id reached by a single covariate vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (tree.n_features,):
        raise ValueError(f"expected {tree.n_features} covariates, got shape {x.shape}")
    nid = tree.root
    while not tree.nodes[nid].is_leaf:
        nd = tree.nodes[nid]
        nid = nd.left if x[nd.feature] <= nd.threshold else nd.right
    return nid


# ---------------------------------------------------------------------------
# candidate splits


def _bucket_ends(n: int, b: int, n_min: int) -> np.ndarray:
    """Exclusive end positions of the buckets of one sorted arm.

    Buckets hold ``b`` units; if that gives fewer than ``n_min`` buckets the
    bucket size shrinks so that ``n_min`` buckets exist (never below one).
    Remainder units join the last bucket.
    """
    if n // b < n_min:
        b = max(1, n // n_min)
    nb = max(1, n // b)
    ends = b * np.arange(1, nb + 1)
    ends[-1] = n
    return ends


def bucket_splits(xt: np.ndarray, xc: np.ndarray, b: int, n_min: int):
    """Bucket split points of one node on one feature.

    ``xt`` and ``xc`` are the sorted treated and control covariate values.
    Split ``k`` puts the first ``k`` buckets of each arm on the left. Returns
    ``(thresholds, n_left_treat, n_left_control)``, where the counts are the
    bucket sizes (not the counts routed by the threshold) and the threshold
    averages the largest value in the k-th treated and control buckets.
    Splits leaving fewer than ``n_min`` units of an arm on a side, counted
    either way, are dropped.
    """
    et = _bucket_ends(xt.size, b, n_min)
    ec = _bucket_ends(xc.size, b, n_min)
    k = min(et.size, ec.size) - 1
    if k < 1:
        empty = np.empty(0, dtype=np.intp)
        return np.empty(0), empty, empty
    nl1, nl0 = et[:k], ec[:k]
    thr = 0.5 * (xt[nl1 - 1] + xc[nl0 - 1])
    r1 = np.searchsorted(xt, thr, side="right")
    r0 = np.searchsorted(xc, thr, side="right")
    n1, n0 = xt.size, xc.size
    ok = (nl1 >= n_min) & (n1 - nl1 >= n_min) & (nl0 >= n_min) & (n0 - nl0 >= n_min)
    ok &= (r1 >= n_min) & (n1 - r1 >= n_min) & (r0 >= n_min) & (n0 - r0 >= n_min)
    return thr[ok], nl1[ok], nl0[ok]


def _midpoints(xs: np.ndarray) -> np.ndarray:
    lo, hi = xs[:-1], xs[1:]
    mid = 0.5 * (lo + hi)
    mid = np.where(mid >= hi, lo, mid)
    return mid[lo < hi]


def _is_pooled(criterion: Optional[CriterionSpec]) -> bool:
    return criterion is not None and criterion.pooled


def candidate_splits(
    dataset: CausalDataset,
    indices,
    feature: int,
    params: GrowParams,
    criterion: Optional[CriterionSpec] = None,
) -> np.ndarray:
    """Admissible thresholds for splitting ``indices`` on ``feature``.

    Arm-aware trees use the bucket scheme: each arm is sorted and bucketed
    separately and the threshold after bucket ``k`` is the average of the
    largest covariate value in the k-th treated and control buckets.
    Pooled trees use every midpoint between distinct values. Thresholds that
    leave a child below the leaf-size minimum are dropped; see
    :func:`bucket_splits` for the arm-aware rule.
    """
    idx = np.asarray(indices, dtype=np.intp)
    x = dataset.covariates[idx, feature]
    if _is_pooled(criterion):
        xs = np.sort(x)
        m = params.pooled_min
        if xs.size < 2 * m:
            return np.empty(0)
        thr = _midpoints(xs)
        nl = np.searchsorted(xs, thr, side="right")
        return thr[(nl >= m) & (xs.size - nl >= m)]
    w = dataset.treatments[idx] == 1
    xt, xc = np.sort(x[w]), np.sort(x[~w])
    m = params.n_min
    if xt.size < 2 * m or xc.size < 2 * m:
        return np.empty(0)
    return bucket_splits(xt, xc, params.bucket_size, m)[0]


# ---------------------------------------------------------------------------
# growth


def _suff_of(y: np.ndarray, treated: np.ndarray) -> tuple:
    y1, y0 = y[treated], y[~treated]
    return (float(y1.size), float(y1.sum()), float(np.dot(y1, y1)),
            float(y0.size), float(y0.sum()), float(np.dot(y0, y0)))


def _as_suff(t: tuple) -> Suff:
    return Suff(*(np.asarray([v], dtype=float) for v in t))


def _cum(y: np.ndarray):
    c = np.concatenate(([0.0], np.cumsum(y)))
    cc = np.concatenate(([0.0], np.cumsum(y * y)))
    return c, cc


class _Grower:
    def __init__(self, dataset, indices, criterion, params):
        self.X = dataset.covariates
        self.w = dataset.treatments == 1
        if criterion.family == "TOT":
            self.y = transformed_outcome(dataset, criterion.p)
        else:
            self.y = dataset.outcomes
        self.dataset = dataset
        self.criterion = criterion
        self.params = params
        self.idx = np.sort(np.asarray(indices, dtype=np.intp))
        self.n_total = self.idx.size
        self.pooled = criterion.pooled
        self.order = [self.idx[np.argsort(self.X[self.idx, f], kind="stable")] for f in range(self.X.shape[1])]
        self.member = np.zeros(dataset.n, dtype=bool)

    def stats(self, idx):
        return leaf_stats(self.dataset, idx, outcomes=self.y)

    def best_split(self, idx, parent: tuple):
        """(gain, feature, threshold, n_left) of the best admissible split, or None."""
        self.member[:] = False
        self.member[idx] = True
        centre = parent[1] / parent[0] if self.pooled else None
        best = None
        for f, order in enumerate(self.order):
            srt = order[self.member[order]]
            res = self._pooled_feature(srt, f, parent, centre) if self.pooled else self._arm_feature(srt, f)
            if res is None:
                continue
            gain, thr = res
            if best is None or gain > best[0]:
                best = (gain, f, thr)
        return best

    def _pooled_feature(self, srt, f, parent, centre):
        m = self.params.pooled_min
        n = srt.size
        if n < 2 * m:
            return None
        xs = self.X[srt, f]
        ys = self.y[srt] - centre
        thr = _midpoints(xs)
        if thr.size == 0:
            return None
        nl = np.searchsorted(xs, thr, side="right")
        ok = (nl >= m) & (n - nl >= m)
        thr, nl = thr[ok], nl[ok]
        if thr.size == 0:
            return None
        c, cc = _cum(ys)
        zero = np.zeros_like(thr)
        nlf = nl.astype(float)
        left = Suff(nlf, c[nl], cc[nl], zero, zero, zero)
        right = Suff(n - nlf, c[-1] - c[nl], cc[-1] - cc[nl], zero, zero, zero)
        par = Suff(np.array([float(n)]), np.array([c[-1]]), np.array([cc[-1]]), *(np.zeros(1),) * 3)
        return self._pick(left, right, par, thr)

    def _arm_feature(self, srt, f):
        m = self.params.n_min
        tr = self.w[srt]
        st, sc = srt[tr], srt[~tr]
        if st.size < 2 * m or sc.size < 2 * m:
            return None
        xt, xc = self.X[st, f], self.X[sc, f]
        thr, nl1, nl0 = bucket_splits(xt, xc, self.params.bucket_size, m)
        if thr.size == 0:
            return None
        n1, n0 = st.size, sc.size
        yt, yc = self.y[st], self.y[sc]
        centre = (yt.sum() + yc.sum()) / (n1 + n0)
        c1, cc1 = _cum(yt - centre)
        c0, cc0 = _cum(yc - centre)
        a1, a0 = nl1.astype(float), nl0.astype(float)
        left = Suff(a1, c1[nl1], cc1[nl1], a0, c0[nl0], cc0[nl0])
        right = Suff(n1 - a1, c1[-1] - c1[nl1], cc1[-1] - cc1[nl1], n0 - a0, c0[-1] - c0[nl0], cc0[-1] - cc0[nl0])
        par = Suff(*(np.array([v]) for v in (float(n1), c1[-1], cc1[-1], float(n0), c0[-1], cc0[-1])))
        return self._pick(left, right, par, thr)

    def _pick(self, left, right, par, thr):
        if self.criterion.family == "TS" and not self.pooled:
            gain = ts_gain(left, right)
        else:
            v = node_values(self.criterion, left, self.n_total) + node_values(self.criterion, right, self.n_total)
            gain = v - node_values(self.criterion, par, self.n_total)
        gain = np.where(np.isfinite(gain), gain, -np.inf)
        j = int(np.argmax(gain))
        if not np.isfinite(gain[j]):
            return None
        return float(gain[j]), float(thr[j])


def grow_tree(
    dataset: CausalDataset,
    indices=None,
    criterion: Optional[CriterionSpec] = None,
    params: Optional[GrowParams] = None,
) -> Tree:
    """Grow a deep tree greedily on ``dataset[indices]``.

    At each node every admissible (feature, threshold) pair is scored by the
    split gain of ``criterion`` (the squared t-statistic for the TS family,
    otherwise the change in the additive objective). Arm-aware splits are
    scored on their bucket partition and then applied through their
    threshold. The best split is taken
    when its gain is strictly positive; ties go to the lowest feature index,
    then the lowest threshold.
    """
    criterion = criterion or CriterionSpec()
    params = params or GrowParams()
    if indices is None:
        indices = np.arange(dataset.n)
    g = _Grower(dataset, indices, criterion, params)
    root_idx = g.idx
    treated = g.w[root_idx]
    if g.pooled:
        if root_idx.size < params.pooled_min:
            raise GrowError(f"root has {root_idx.size} units, needs at least {params.pooled_min}")
    elif treated.sum() < params.n_min or (~treated).sum() < params.n_min:
        raise GrowError(
            f"root has {int(treated.sum())} treated / {int((~treated).sum())} control units, "
            f"needs at least {params.n_min} of each"
        )

    nodes: Dict[int, Node] = {}
    next_id = 1
    stack = [(0, None, 0, root_idx)]
    while stack:
        nid, parent, depth, idx = stack.pop()
        suff = _suff_of(g.y[idx], g.w[idx])
        node = Node(id=nid, depth=depth, parent=parent, stats=g.stats(idx), suff=suff, indices=idx)
        best = None
        if params.max_depth is None or depth < params.max_depth:
            best = g.best_split(idx, suff)
        if best is None or not best[0] > 0:
            nodes[nid] = node
            continue
        _, f, thr = best
        go_left = g.X[idx, f] <= thr
        lid, rid = next_id, next_id + 1
        next_id += 2
        nodes[nid] = dataclasses.replace(node, feature=f, threshold=thr, left=lid, right=rid)
        stack.append((rid, nid, depth + 1, idx[~go_left]))
        stack.append((lid, nid, depth + 1, idx[go_left]))

    return Tree(nodes=nodes, n_features=dataset.k, n_train=int(root_idx.size), feature_names=dataset.feature_names)
