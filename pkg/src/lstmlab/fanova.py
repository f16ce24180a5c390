"""Hyperparameter importance via functional ANOVA over a regression forest.

Each tree is a piecewise-constant function on an axis-aligned box. For any
subset ``U`` of dimensions the marginal (the tree averaged over the other
dimensions under a uniform measure) is again piecewise constant on the grid
spanned by the tree's split thresholds in ``U``. We evaluate it exactly on
that grid, which makes every variance component an exact finite sum.

Components follow the usual functional ANOVA recursion::

    f_0        = mean of the tree over the box
    f_i(x_i)   = m_i(x_i) - f_0
    f_ij       = m_ij(x_i, x_j) - f_i - f_j - f_0

and ``V_u`` is the integral of ``f_u ** 2``. Fractions are ``V_u / V`` per
tree, averaged over trees with non-zero variance.
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import make_rng
from .search import STUDY_SPACE

log = logging.getLogger(__name__)

HYPERPARAMETERS = ("learning_rate", "momentum", "n_blocks", "input_noise_std")


# ---------------------------------------------------------------- trees

@dataclass
class RegressionTree:
    feature: np.ndarray      # split dimension per node, -1 for leaves
    threshold: np.ndarray    # go left when x[feature] <= threshold
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray        # mean response of the node's samples
    bounds: np.ndarray       # (D, 2) box the tree lives on
    leaf_lo: np.ndarray = field(init=False, repr=False)
    leaf_hi: np.ndarray = field(init=False, repr=False)
    leaf_value: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        leaves, lo, hi = [], [], []
        stack = [(0, self.bounds[:, 0].copy(), self.bounds[:, 1].copy())]
        while stack:
            node, l, h = stack.pop()
            d = self.feature[node]
            if d < 0:
                leaves.append(node)
                lo.append(l)
                hi.append(h)
                continue
            thr = self.threshold[node]
            lh = h.copy()
            lh[d] = min(thr, h[d])
            rl = l.copy()
            rl[d] = max(thr, l[d])
            stack.append((self.left[node], l, lh))
            stack.append((self.right[node], rl, h))
        self.leaf_lo = np.array(lo)
        self.leaf_hi = np.array(hi)
        self.leaf_value = self.value[leaves]

    @property
    def n_leaves(self):
        return self.leaf_value.size

    @property
    def width(self):
        return self.bounds[:, 1] - self.bounds[:, 0]

    def leaf_volumes(self, dims=None):
        """Volume fraction of each leaf within the box, restricted to ``dims``."""
        frac = (self.leaf_hi - self.leaf_lo) / self.width
        if dims is not None:
            frac = frac[:, list(dims)]
        return frac.prod(axis=1)

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            d = self.feature[node]
            inner = d >= 0
            if not inner.any():
                return self.value[node]
            idx = np.flatnonzero(inner)
            go_left = X[idx, d[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])

    def grand_mean(self):
        return float(np.dot(self.leaf_volumes(), self.leaf_value))

    def total_variance(self):
        w = self.leaf_volumes()
        mu = np.dot(w, self.leaf_value)
        return float(np.dot(w, (self.leaf_value - mu) ** 2))

    def edges(self, d):
        """Cell boundaries along ``d``: box ends plus every split threshold on ``d``."""
        return np.unique(np.concatenate([self.leaf_lo[:, d], self.leaf_hi[:, d]]))

    def marginal_cells(self, dims):
        """Exact marginal over the cell grid of ``dims``.

        Returns ``(edges, values, weights)``; ``values`` has one axis per
        dimension in ``dims`` and ``weights`` are the cells' volume fractions.
        """
        dims = list(dims)
        edges = [self.edges(d) for d in dims]
        shape = tuple(len(e) - 1 for e in edges)
        others = [d for d in range(self.bounds.shape[0]) if d not in dims]
        contrib = self.leaf_value * self.leaf_volumes(others)
        acc = np.zeros(tuple(s + 1 for s in shape))
        lo_idx = [np.searchsorted(e, self.leaf_lo[:, d]) for e, d in zip(edges, dims)]
        hi_idx = [np.searchsorted(e, self.leaf_hi[:, d]) for e, d in zip(edges, dims)]
        # n-d difference array: +/- contrib at the 2^|U| corners of each leaf block
        for corner in itertools.product((0, 1), repeat=len(dims)):
            sign = -1.0 if sum(corner) % 2 else 1.0
            idx = tuple(hi_idx[k] if c else lo_idx[k] for k, c in enumerate(corner))
            np.add.at(acc, idx, sign * contrib)
        for axis in range(len(dims)):
            acc = np.cumsum(acc, axis=axis)
        values = acc[tuple(slice(0, s) for s in shape)]
        widths = [np.diff(e) / self.width[d] for e, d in zip(edges, dims)]
        weights = widths[0]
        for w in widths[1:]:
            weights = np.multiply.outer(weights, w)
        return edges, values, weights

    def marginal_at(self, dims, points):
        """Marginal over ``dims`` evaluated at ``points`` of shape ``(P, len(dims))``."""
        edges, values, _ = self.marginal_cells(dims)
        points = np.atleast_2d(points)
        idx = tuple(
            np.clip(np.searchsorted(e, points[:, k], side="left") - 1, 0, len(e) - 2)
            for k, e in enumerate(edges))
        return values[idx]


def _level_splits(X, yc, sample_node, nodes, features, min_leaf):
    """Best split of every open node at once.

    ``sample_node`` gives each active sample's node; ``features`` is a boolean
    ``(len(nodes), D)`` mask of the dimensions each node may split on.
    Returns per-node ``(gain, dim, threshold)`` with ``dim = -1`` when no
    split is admissible.
    """
    K = nodes.size
    slot = np.searchsorted(nodes, sample_node)
    best_gain = np.zeros(K)
    best_dim = np.full(K, -1)
    best_thr = np.full(K, np.nan)
    for d in range(X.shape[1]):
        order = np.lexsort((X[:, d], slot))
        xs, ys, seg = X[order, d], yc[order], slot[order]
        starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
        counts = np.diff(np.r_[starts, seg.size])
        cs = np.cumsum(ys)
        offset = np.r_[0.0, cs][starts]
        seg_total = np.add.reduceat(ys, starts)
        pos = np.arange(seg.size) - np.repeat(starts, counts)
        n_left = pos + 1
        n_seg = np.repeat(counts, counts)
        left_sum = cs - np.repeat(offset, counts)
        total = np.repeat(seg_total, counts)
        valid = np.r_[(seg[1:] == seg[:-1]) & (xs[:-1] < xs[1:]), False]
        valid &= (n_left >= min_leaf) & (n_seg - n_left >= min_leaf) & features[seg, d]
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = (left_sum ** 2 / n_left + (total - left_sum) ** 2 / (n_seg - n_left)
                    - total ** 2 / n_seg)
        gain = np.where(valid, gain, -np.inf)
        seg_max = np.maximum.reduceat(gain, starts)
        # first position attaining each segment's maximum
        hit = np.flatnonzero(gain == np.repeat(seg_max, counts))
        segs, first = np.unique(seg[hit], return_index=True)
        k = hit[first]
        better = gain[k] > best_gain[segs]
        segs, k = segs[better], k[better]
        best_gain[segs] = gain[k]
        best_dim[segs] = d
        best_thr[segs] = 0.5 * (xs[k] + xs[k + 1])
    return best_gain, best_dim, best_thr


def fit_tree(X, y, bounds, min_leaf=3, max_features=None, rng=None):
    """Grow a CART regression tree until no leaf can be split further.

    Nodes are expanded one depth level at a time, each with its own greedy
    squared-error split; the result matches node-by-node growth.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, D = X.shape
    scale = max(1.0, float(np.abs(y).max()) if n else 1.0)
    yc = y - y.mean()  # shift-invariant gains, smaller cumulative sums
    feature, threshold, left, right, value = [-1], [np.nan], [-1], [-1], []

    def node_values(sample_node, ids, ys):
        lo = np.full(ids.size, np.inf)
        hi = np.full(ids.size, -np.inf)
        slot = np.searchsorted(ids, sample_node)
        np.minimum.at(lo, slot, ys)
        np.maximum.at(hi, slot, ys)
        cnt = np.bincount(slot, minlength=ids.size)
        mean = np.bincount(slot, weights=ys, minlength=ids.size) / cnt
        # identical responses keep their exact value rather than a rounded mean
        return np.where(lo == hi, lo, mean), cnt, hi - lo

    idx = np.arange(n)
    sample_node = np.zeros(n, dtype=np.int64)
    vals, cnt, spread = node_values(sample_node, np.array([0]), y)
    value.append(float(vals[0]))
    open_nodes, open_cnt, open_spread = np.array([0]), cnt, spread
    while open_nodes.size:
        ok = (open_cnt >= 2 * min_leaf) & (open_spread > 1e-14 * scale)
        nodes = open_nodes[ok]
        if not nodes.size:
            break
        active = np.isin(sample_node, nodes)
        idx, sample_node = idx[active], sample_node[active]
        mask = np.ones((nodes.size, D), dtype=bool)
        if max_features is not None and max_features < D:
            mask[:] = False
            for r in range(nodes.size):
                mask[r, rng.choice(D, size=max_features, replace=False)] = True
        gain, dim, thr = _level_splits(X[idx], yc[idx], sample_node, nodes, mask, min_leaf)
        split = (dim >= 0) & (gain > 1e-12 * scale * scale)
        if not split.any():
            break
        nodes, dim, thr = nodes[split], dim[split], thr[split]
        first_child = len(value) + 2 * np.arange(nodes.size)
        for node, d, t, c in zip(nodes, dim, thr, first_child):
            feature[node], threshold[node] = int(d), float(t)
            left[node], right[node] = int(c), int(c) + 1
        feature += [-1] * (2 * nodes.size)
        threshold += [np.nan] * (2 * nodes.size)
        left += [-1] * (2 * nodes.size)
        right += [-1] * (2 * nodes.size)
        keep = np.isin(sample_node, nodes)
        idx, sample_node = idx[keep], sample_node[keep]
        slot = np.searchsorted(nodes, sample_node)
        go_right = X[idx, dim[slot]] > thr[slot]
        sample_node = first_child[slot] + go_right
        children = np.sort(np.concatenate([first_child, first_child + 1]))
        vals, open_cnt, open_spread = node_values(sample_node, children, y[idx])
        value += [float(v) for v in vals]
        open_nodes = children
    return RegressionTree(np.array(feature), np.array(threshold), np.array(left),
                          np.array(right), np.array(value), np.asarray(bounds, dtype=np.float64))


@dataclass
class ForestConfig:
    n_trees: int = 100
    min_leaf: int = 3
    bootstrap: bool = True
    max_features: int = None
    seed: int = 0


@dataclass
class Forest:
    trees: list
    bounds: np.ndarray
    names: tuple
    config: ForestConfig
    transforms: dict = field(default_factory=dict)

    @property
    def n_dims(self):
        return self.bounds.shape[0]

    def predict(self, X):
        return np.mean([t.predict(X) for t in self.trees], axis=0)


def fit_forest(X, y, bounds, config=None, names=None):
    """Fit a forest of CART trees on points inside ``bounds`` (shape ``(D, 2)``)."""
    config = config or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    bounds = np.asarray(bounds, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.size or X.shape[1] != bounds.shape[0]:
        raise ValueError("X must be (n, D) matching y and bounds")
    if X.shape[0] < 2:
        raise ValueError("need at least two observations")
    if np.any(X < bounds[:, 0] - 1e-12) or np.any(X > bounds[:, 1] + 1e-12):
        raise ValueError("observations outside the box")
    rng = make_rng(config.seed)
    n = y.size
    trees = []
    for _ in range(config.n_trees):
        idx = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
        trees.append(fit_tree(X[idx], y[idx], bounds, config.min_leaf, config.max_features, rng))
    names = tuple(names) if names is not None else tuple(f"x{d}" for d in range(X.shape[1]))
    return Forest(trees, bounds, names, config)


# ------------------------------------------------------------ marginals

@dataclass
class MarginalCurve:
    dims: tuple
    grid: np.ndarray     # (P, len(dims))
    mean: np.ndarray     # (P,)
    std: np.ndarray      # (P,) across trees


def _as_grid(forest, dims, grid):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.shape[1] != len(dims):
        raise ValueError("grid columns must match dims")
    lo, hi = forest.bounds[list(dims), 0], forest.bounds[list(dims), 1]
    if np.any(grid < lo - 1e-12) or np.any(grid > hi + 1e-12):
        raise ValueError("grid points outside the box")
    return grid


def marginal(forest, dims, grid):
    """Forest-averaged marginal prediction over ``dims`` at ``grid`` points."""
    dims = tuple(dims)
    if not dims:
        raise ValueError("dims must be non-empty")
    grid = _as_grid(forest, dims, grid)
    per_tree = np.array([t.marginal_at(dims, grid) for t in forest.trees])
    return MarginalCurve(dims, grid, per_tree.mean(axis=0), per_tree.std(axis=0))


def default_grid(forest, dim, n=50):
    lo, hi = forest.bounds[dim]
    return np.linspace(lo, hi, n)


# ------------------------------------------------------- decomposition

def tree_components(tree, max_order=2):
    """Exact variance components of one tree: ``(total, singles, pairs)``."""
    D = tree.bounds.shape[0]
    f0 = tree.grand_mean()
    total = tree.total_variance()
    singles = np.zeros(D)
    for d in range(D):
        _, m, w = tree.marginal_cells([d])
        singles[d] = np.sum(w * (m - f0) ** 2)
    pairs = {}
    if max_order >= 2:
        for a, b in itertools.combinations(range(D), 2):
            _, m, w = tree.marginal_cells([a, b])
            # non-negative in exact arithmetic; drop round-off below zero
            pairs[(a, b)] = max(0.0, np.sum(w * (m - f0) ** 2) - singles[a] - singles[b])
    return total, singles, pairs


def interaction_cells(tree, pair):
    """Pure interaction ``f_ij`` on the tree's cell grid: ``(edges, values, weights)``."""
    a, b = pair
    f0 = tree.grand_mean()
    edges, m_ab, w = tree.marginal_cells([a, b])
    m_a = tree.marginal_at([a], _mid(edges[0])[:, None])
    m_b = tree.marginal_at([b], _mid(edges[1])[:, None])
    f_ab = m_ab - (m_a - f0)[:, None] - (m_b - f0)[None, :] - f0
    return edges, f_ab, w


def _mid(e):
    return 0.5 * (e[:-1] + e[1:])


@dataclass
class VarianceDecomposition:
    names: tuple
    total_variance: float
    singles: dict           # name -> mean fraction
    pairs: dict             # (name, name) -> mean fraction
    higher_order: float
    singles_std: dict = field(default_factory=dict)
    pairs_std: dict = field(default_factory=dict)
    zero_variance: bool = False
    n_trees_used: int = 0

    def ranked(self):
        return sorted(self.singles.items(), key=lambda kv: -kv[1])

    def to_dict(self):
        return {
            "names": list(self.names),
            "total_variance": self.total_variance,
            "singles": dict(self.singles),
            "singles_std": dict(self.singles_std),
            "pairs": {f"{a}|{b}": v for (a, b), v in self.pairs.items()},
            "pairs_std": {f"{a}|{b}": v for (a, b), v in self.pairs_std.items()},
            "higher_order": self.higher_order,
            "zero_variance": self.zero_variance,
            "n_trees_used": self.n_trees_used,
        }


def decompose_variance(forest):
    names = forest.names
    D = forest.n_dims
    pair_keys = list(itertools.combinations(range(D), 2))
    totals, single_fr, pair_fr = [], [], []
    for tree in forest.trees:
        total, singles, pairs = tree_components(tree)
        totals.append(total)
        if total <= 0.0:
            continue
        single_fr.append(singles / total)
        pair_fr.append([pairs[k] / total for k in pair_keys])
    mean_total = float(np.mean(totals))
    if not single_fr:
        zeros = {n: 0.0 for n in names}
        pz = {(names[a], names[b]): 0.0 for a, b in pair_keys}
        return VarianceDecomposition(names, mean_total, zeros, pz, 0.0, dict(zeros), dict(pz),
                                     zero_variance=True, n_trees_used=0)
    S = np.array(single_fr)
    P = np.array(pair_fr).reshape(len(single_fr), len(pair_keys))
    singles = {n: float(S[:, d].mean()) for d, n in enumerate(names)}
    singles_std = {n: float(S[:, d].std()) for d, n in enumerate(names)}
    pairs = {(names[a], names[b]): float(P[:, k].mean()) for k, (a, b) in enumerate(pair_keys)}
    pairs_std = {(names[a], names[b]): float(P[:, k].std()) for k, (a, b) in enumerate(pair_keys)}
    higher = float(1.0 - S.sum(axis=1).mean() - P.sum(axis=1).mean())
    return VarianceDecomposition(names, mean_total, singles, pairs, higher, singles_std, pairs_std,
                                 n_trees_used=len(single_fr))


@dataclass
class InteractionMap:
    pair: tuple
    grid_a: np.ndarray
    grid_b: np.ndarray
    marginal: np.ndarray     # forest mean of m_ab on the grid
    residual: np.ndarray     # forest mean of f_ab on the grid
    residual_std: np.ndarray


def interaction_component(forest, pair, grid_a, grid_b):
    """Joint marginal and its pure-interaction residual for two dimensions on a grid."""
    a, b = pair
    if a == b:
        raise ValueError("pair must name two distinct dimensions")
    grid_a = _as_grid(forest, (a,), grid_a)[:, 0]
    grid_b = _as_grid(forest, (b,), grid_b)[:, 0]
    A, B = np.meshgrid(grid_a, grid_b, indexing="ij")
    pts = np.column_stack([A.ravel(), B.ravel()])
    joint, resid = [], []
    for tree in forest.trees:
        f0 = tree.grand_mean()
        m_ab = tree.marginal_at([a, b], pts).reshape(A.shape)
        m_a = tree.marginal_at([a], grid_a[:, None])
        m_b = tree.marginal_at([b], grid_b[:, None])
        joint.append(m_ab)
        resid.append(m_ab - m_a[:, None] - m_b[None, :] + f0)
    joint, resid = np.array(joint), np.array(resid)
    return InteractionMap((a, b), grid_a, grid_b, joint.mean(axis=0), resid.mean(axis=0),
                          resid.std(axis=0))


# ---------------------------------------------------------- trial logs

def search_box(space=STUDY_SPACE):
    """Transformed-coordinate bounds of the sampling space, in HYPERPARAMETERS order."""
    return np.array([
        np.log10(space.learning_rate),
        np.log(space.momentum_complement),
        np.log(space.n_blocks),
        space.input_noise_std,
    ], dtype=np.float64)


TRANSFORMS = {
    "learning_rate": "log10(learning_rate)",
    "momentum": "ln(1 - momentum)",
    "n_blocks": "ln(n_blocks)",
    "input_noise_std": "identity",
}


def transform_trials(records):
    X = np.array([[np.log10(r.learning_rate), np.log(1.0 - r.momentum), np.log(r.n_blocks),
                   r.input_noise_std] for r in records], dtype=np.float64)
    return X


def trials_to_xy(records, drop_diverged=False, top_fraction=None, space=STUDY_SPACE):
    """Design matrix (transformed coordinates) and test-metric responses."""
    from .search import select_top_fraction
    records = [r for r in records if not (drop_diverged and r.diverged)]
    if top_fraction is not None:
        records = select_top_fraction(records, top_fraction)
    X = transform_trials(records)
    box = search_box(space)
    X = np.clip(X, box[:, 0], box[:, 1])   # rounding at the range ends
    y = np.array([r.test_metric for r in records], dtype=np.float64)
    return X, y, box


def fit_trials(records, config=None, drop_diverged=False, top_fraction=None, space=STUDY_SPACE):
    X, y, box = trials_to_xy(records, drop_diverged, top_fraction, space)
    forest = fit_forest(X, y, box, config, names=HYPERPARAMETERS)
    forest.transforms = dict(TRANSFORMS)
    return forest
