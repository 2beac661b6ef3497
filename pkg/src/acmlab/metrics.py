"""Homophily, post-aggregation similarity and diversification metrics.

The similarity-based scores never build the N x N matrix ``S = (FX)(FX)^T``.
The mean of ``S[v, u]`` over the nodes ``u`` of class ``c`` equals
``<(FX)[v], centroid_c>`` where ``centroid_c`` is the mean row of ``FX`` over
class ``c``, so every score costs O(N F C).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import FilterKind, FilterOperator, Graph, HighPassOf, Kind, degree_vector, make_filter, spmm

# Relative slack for the >= / <= comparisons, so that ties which hold in exact
# arithmetic are not lost to rounding.
TIE_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class LabelEncoding:
    classes: np.ndarray
    num_classes: int

    def __post_init__(self):
        c = np.asarray(self.classes)
        if c.ndim != 1:
            raise ValueError("classes must be a vector")
        if len(c) and (c.min() < 0 or c.max() >= self.num_classes):
            raise ValueError(f"class ids must lie in [0, {self.num_classes})")

    @classmethod
    def from_classes(cls, classes, num_classes: int | None = None) -> "LabelEncoding":
        classes = np.asarray(classes, dtype=np.int64)
        if num_classes is None:
            num_classes = int(classes.max()) + 1 if len(classes) else 0
        return cls(classes, num_classes)

    @property
    def num_nodes(self) -> int:
        return len(self.classes)

    @property
    def one_hot(self) -> np.ndarray:
        z = np.zeros((len(self.classes), self.num_classes))
        z[np.arange(len(self.classes)), self.classes] = 1.0
        return z

    @property
    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.classes, minlength=self.num_classes)


def load_labels(path) -> LabelEncoding:
    with open(path) as fh:
        values = [int(line) for line in fh if line.strip() and not line.lstrip().startswith("#")]
    return LabelEncoding.from_classes(values)


def write_labels(path, z: LabelEncoding) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{c}\n" for c in z.classes)


def _check(g: Graph, z: LabelEncoding) -> None:
    if g.num_nodes != z.num_nodes:
        raise ValueError(f"graph has {g.num_nodes} nodes but {z.num_nodes} labels")


def _edge_endpoints(g: Graph):
    src = np.repeat(np.arange(g.num_nodes), degree_vector(g))
    return src, g.col_indices


# ---------------------------------------------------------------------------
# Graph-label consistency metrics


def edge_homophily(g: Graph, z: LabelEncoding) -> float:
    """Fraction of edges joining two nodes of the same class."""
    _check(g, z)
    e = g.edges()
    if len(e) == 0:
        raise ValueError("edge homophily needs at least one edge")
    return float(np.mean(z.classes[e[:, 0]] == z.classes[e[:, 1]]))


def node_homophily(g: Graph, z: LabelEncoding, skip_isolated: bool = False) -> tuple[float, np.ndarray]:
    """Mean over nodes of the same-label share of each node's neighbors.

    Returns the scalar and the per-node values. Isolated nodes raise unless
    ``skip_isolated``, in which case they get NaN and are left out of the mean.
    """
    _check(g, z)
    deg = degree_vector(g)
    isolated = deg == 0
    if np.any(isolated) and not skip_isolated:
        raise ValueError(f"node homophily is undefined for isolated node {int(np.flatnonzero(isolated)[0])}")
    if np.all(isolated):
        raise ValueError("node homophily needs at least one edge")
    src, dst = _edge_endpoints(g)
    same = np.bincount(src, weights=z.classes[src] == z.classes[dst], minlength=g.num_nodes)
    per_node = np.full(g.num_nodes, np.nan)
    per_node[~isolated] = same[~isolated] / deg[~isolated]
    return float(np.nanmean(per_node)), per_node


def class_homophily(g: Graph, z: LabelEncoding) -> float:
    """Class-insensitive homophily: ``sum_k [h_k - N_k/N]_+ / (C-1)``."""
    _check(g, z)
    if z.num_classes < 2:
        raise ValueError("class homophily needs at least two classes")
    if g.num_edges == 0:
        raise ValueError("class homophily needs at least one edge")
    sizes = z.class_sizes
    if np.any(sizes == 0):
        raise ValueError(f"class {int(np.flatnonzero(sizes == 0)[0])} is empty")
    src, dst = _edge_endpoints(g)
    ys, yd = z.classes[src], z.classes[dst]
    same = np.bincount(ys[ys == yd], minlength=z.num_classes)
    total = np.bincount(ys, minlength=z.num_classes)
    if np.any(total == 0):
        raise ValueError(f"class {int(np.flatnonzero(total == 0)[0])} has zero total degree")
    h_k = same / total
    return float(np.maximum(h_k - sizes / z.num_nodes, 0.0).sum() / (z.num_classes - 1))


# ---------------------------------------------------------------------------
# Post-aggregation similarity


def similarity_matrix(f: FilterOperator, x: np.ndarray) -> np.ndarray:
    """Dense ``S = (F X)(F X)^T``; only for small graphs."""
    fx = spmm(f, x)
    return fx @ fx.T


def _class_means(fx: np.ndarray, classes: np.ndarray, nodes: np.ndarray, num_classes: int):
    """Same-class and other-class mean similarity for every node in ``nodes``.

    Means range over ``nodes`` only (the same-class one includes ``v``).
    Returns ``(same, other, scale)`` where ``scale`` bounds the magnitude of
    the individual similarity values entering each mean.
    """
    if fx.shape[1] == 0:
        raise ValueError("feature matrix has no columns")
    y = classes[nodes]
    sizes = np.bincount(y, minlength=num_classes).astype(np.float64)
    if np.count_nonzero(sizes) < 2:
        raise ValueError("similarity scores need at least two classes among the evaluated nodes")
    sums = np.zeros((num_classes, fx.shape[1]))
    np.add.at(sums, y, fx[nodes])
    present = sizes > 0
    centroids = np.zeros_like(sums)
    centroids[present] = sums[present] / sizes[present, None]

    rows = fx[nodes]
    proj = rows @ centroids.T  # proj[i, c] = mean_{u in c} S[v_i, u]
    idx = np.arange(len(nodes))
    same = proj[idx, y]
    weighted = proj * sizes[None, :]
    weighted[idx, y] = 0.0
    other = weighted.sum(axis=1) / (len(nodes) - sizes[y])

    row_norm = np.linalg.norm(rows, axis=1)
    max_norm = np.linalg.norm(fx[nodes], axis=1).max()
    return same, other, row_norm * max_norm


def _resolve_nodes(n: int, nodes) -> np.ndarray:
    if nodes is None:
        return np.arange(n)
    nodes = np.asarray(nodes)
    if nodes.dtype == bool:
        nodes = np.flatnonzero(nodes)
    return np.sort(nodes.astype(np.int64))


def _require_nonempty_classes(z: LabelEncoding) -> None:
    sizes = z.class_sizes
    if z.num_classes < 2:
        raise ValueError("similarity scores need C >= 2")
    if np.any(sizes == 0):
        raise ValueError(f"class {int(np.flatnonzero(sizes == 0)[0])} is empty")


def agg_similarity_flags(f: FilterOperator, x: np.ndarray, z: LabelEncoding, nodes=None) -> np.ndarray:
    """Per-node indicator of ``mean same-class S >= mean other-class S``."""
    if nodes is None:
        _require_nonempty_classes(z)
    fx = spmm(f, x)
    nodes = _resolve_nodes(z.num_nodes, nodes)
    same, other, scale = _class_means(fx, z.classes, nodes, z.num_classes)
    return same - other >= -TIE_RTOL * scale


def agg_similarity_score(f: FilterOperator, x: np.ndarray, z: LabelEncoding, nodes=None) -> float:
    """Share of nodes whose same-class mean similarity is at least the other-class mean.

    ``nodes`` restricts both the evaluated nodes and the means to a subset.
    """
    return float(agg_similarity_flags(f, x, z, nodes).mean())


def modified_score(s: float) -> float:
    """Rescale a similarity score from [0.5, 1] to [0, 1], clamping below."""
    return max(2.0 * s - 1.0, 0.0)


def aggregation_homophily(g: Graph, z: LabelEncoding, kind: Kind = FilterKind.ARW_HAT) -> tuple[float, float]:
    """Aggregation homophily and its modified version, using ``X = Z``."""
    _check(g, z)
    s = agg_similarity_score(make_filter(g, kind), z.one_hot, z)
    return s, modified_score(s)


def diversification_distinguishability(
    g: Graph, x: np.ndarray, z: LabelEncoding, kind: Kind = FilterKind.ARW_HAT, nodes=None
) -> tuple[float, np.ndarray]:
    """Share of nodes with non-negative same-class and non-positive other-class
    mean similarity after the high-pass filter ``I - F``.

    Returns the value and the per-node flags (over ``nodes`` when given).
    """
    _check(g, z)
    if nodes is None:
        _require_nonempty_classes(z)
    hx = spmm(make_filter(g, HighPassOf(kind)), x)
    nodes = _resolve_nodes(z.num_nodes, nodes)
    same, other, scale = _class_means(hx, z.classes, nodes, z.num_classes)
    tol = TIE_RTOL * scale
    flags = (same >= -tol) & (other <= tol)
    return float(flags.mean()), flags


# ---------------------------------------------------------------------------
# Regular random-graph model


def g_of_h(h: float, d: float, c: int) -> float:
    """Expected same-class minus other-class similarity gap on a ``d``-regular
    random graph with ``c`` classes and edge homophily ``h``."""
    return ((c - 1) * (h * d + 1) - (1 - h) * d) ** 2 / ((c - 1) * (d + 1)) ** 2


def _random_aggregated_rows(cls: int, h: float, d: int, c: int, samples: int, rng) -> np.ndarray:
    """Rows of ``Arw_hat Z`` for nodes of class ``cls`` whose ``d`` edges each hit
    the own class with probability ``h`` and a uniform other class otherwise."""
    same = rng.binomial(d, h, size=samples)
    others = rng.multinomial(d - same, np.full(c - 1, 1.0 / (c - 1)))
    counts = np.insert(others, cls, same + 1, axis=1)
    return counts / (d + 1)


def simulate_similarity_gap(h: float, d: int, c: int, samples: int = 10_000, rng=None) -> tuple[float, float]:
    """Monte Carlo estimate of ``E[S_{v,u1}] - E[S_{v,u2}]`` with ``u1`` in the
    class of ``v`` and ``u2`` outside it, all neighborhoods drawn
    independently. Returns the mean and its standard error."""
    if c < 2 or samples < 2:
        raise ValueError("need c >= 2 and samples >= 2")
    rng = np.random.default_rng(rng)
    v = _random_aggregated_rows(0, h, d, c, samples, rng)
    u1 = _random_aggregated_rows(0, h, d, c, samples, rng)
    u2 = _random_aggregated_rows(1, h, d, c, samples, rng)
    diff = np.sum(v * u1, axis=1) - np.sum(v * u2, axis=1)
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(samples))


def optimal_h(d_intra: float, c: int) -> float:
    """Edge homophily at which ``g_of_h`` vanishes when ``d = d_intra / h``."""
    return d_intra / (c * d_intra + c - 1)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricReport:
    h_edge: float
    h_node: float
    h_class: float | None
    h_agg: float | None
    h_agg_mod: float | None
    s_agg_features: float | None = None
    s_agg_features_mod: float | None = None
    dd_value: float | None = None
    h_node_per_node: list = field(default_factory=list)
    dd_flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["h_node_per_node"] = [None if (v is None or math.isnan(v)) else float(v) for v in self.h_node_per_node]
        d["dd_flags"] = [None if v is None else bool(v) for v in self.dd_flags]
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)


def metric_report(g: Graph, z: LabelEncoding, x: np.ndarray | None = None,
                  kind: Kind = FilterKind.ARW_HAT) -> MetricReport:
    """All metrics over the full label set; feature scores only when ``x`` is given.

    With a single class the class-contrast metrics are undefined and left as None.
    """
    h_node, per_node = node_homophily(g, z)
    multi = z.num_classes >= 2
    h_agg, h_agg_mod = aggregation_homophily(g, z, kind) if multi else (None, None)
    report = MetricReport(
        h_edge=edge_homophily(g, z),
        h_node=h_node,
        h_class=class_homophily(g, z) if multi else None,
        h_agg=h_agg,
        h_agg_mod=h_agg_mod,
        h_node_per_node=per_node.tolist(),
    )
    if x is not None and multi:
        s = agg_similarity_score(make_filter(g, kind), x, z)
        dd, flags = diversification_distinguishability(g, x, z, kind)
        report.s_agg_features = s
        report.s_agg_features_mod = modified_score(s)
        report.dd_value = dd
        report.dd_flags = flags.tolist()
    return report


def estimate_metrics_masked(g: Graph, z: LabelEncoding, x: np.ndarray | None, mask,
                            kind: Kind = FilterKind.ARW_HAT) -> MetricReport:
    """Metrics estimated from the labels of the nodes in ``mask`` only.

    Edges count when both endpoints are labeled; per-node and class shares use
    labeled neighbors; similarity scores aggregate the label matrix with the
    unlabeled rows zeroed and average over labeled nodes. Features, which are
    known everywhere, are filtered in full.
    """
    _check(g, z)
    n = g.num_nodes
    mask = np.asarray(mask)
    labeled = np.zeros(n, dtype=bool)
    labeled[mask if mask.dtype != bool else np.flatnonzero(mask)] = True
    nodes = np.flatnonzero(labeled)
    y = z.classes
    if len(np.unique(y[nodes])) < 2:
        raise ValueError("mask must cover at least two classes")

    src, dst = _edge_endpoints(g)
    keep = labeled[src] & labeled[dst]
    src, dst = src[keep], dst[keep]
    if len(src) == 0:
        raise ValueError("no edge has both endpoints in the mask")
    same_edge = y[src] == y[dst]
    h_edge = float(same_edge.mean())

    deg_l = np.bincount(src, minlength=n)
    same_l = np.bincount(src, weights=same_edge, minlength=n)
    per_node = np.full(n, np.nan)
    has = labeled & (deg_l > 0)
    per_node[has] = same_l[has] / deg_l[has]
    h_node = float(per_node[has].mean())

    sizes = np.bincount(y[nodes], minlength=z.num_classes)
    total = np.bincount(y[src], minlength=z.num_classes)
    same_k = np.bincount(y[src][same_edge], minlength=z.num_classes)
    h_k = np.divide(same_k, total, out=np.zeros(z.num_classes), where=total > 0)
    active = sizes > 0
    h_class = float(
        np.maximum(h_k[active] - sizes[active] / len(nodes), 0.0).sum() / (int(active.sum()) - 1)
    )

    f = make_filter(g, kind)
    z_masked = z.one_hot * labeled[:, None]
    h_agg = agg_similarity_score(f, z_masked, z, nodes)
    report = MetricReport(
        h_edge=h_edge, h_node=h_node, h_class=h_class,
        h_agg=h_agg, h_agg_mod=modified_score(h_agg),
        h_node_per_node=per_node.tolist(),
    )
    if x is not None:
        s = agg_similarity_score(f, x, z, nodes)
        dd, flags = diversification_distinguishability(g, x, z, kind, nodes)
        full_flags = [None] * n
        for v, fl in zip(nodes, flags):
            full_flags[v] = bool(fl)
        report.s_agg_features = s
        report.s_agg_features_mod = modified_score(s)
        report.dd_value = dd
        report.dd_flags = full_flags
    return report
