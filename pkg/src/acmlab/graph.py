"""Sparse undirected graphs and the low-/high-pass filter operators built on them."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable simple undirected graph in row-compressed form.

    Both directions of every edge are stored, columns sorted within each row.
    """

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray

    def __post_init__(self):
        self.row_offsets.setflags(write=False)
        self.col_indices.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return len(self.col_indices) // 2

    def neighbors(self, v: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[v]:self.row_offsets[v + 1]]

    def edges(self) -> np.ndarray:
        """Each undirected edge once, as an (E, 2) array with u < v."""
        src = np.repeat(np.arange(self.num_nodes), np.diff(self.row_offsets))
        keep = src < self.col_indices
        return np.column_stack([src[keep], self.col_indices[keep]])

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.col_indices))
        return sp.csr_matrix(
            (data, self.col_indices, self.row_offsets),
            shape=(self.num_nodes, self.num_nodes),
        )

    def permute(self, perm: np.ndarray) -> "Graph":
        """Relabel node ``v`` as ``perm[v]``."""
        return build_graph(np.asarray(perm)[self.edges()], self.num_nodes)

    def __eq__(self, other):
        return (
            isinstance(other, Graph)
            and self.num_nodes == other.num_nodes
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
        )

    __hash__ = None


def build_graph(edge_list: Iterable, num_nodes: int) -> Graph:
    """Build a simple undirected graph from ``(u, v)`` pairs.

    Edges are symmetrized; duplicates and self-loops are dropped with a
    logged count.
    """
    if num_nodes <= 0:
        raise ValueError("num_nodes must be positive")
    pairs = np.asarray(list(edge_list) if not isinstance(edge_list, np.ndarray) else edge_list,
                       dtype=np.int64).reshape(-1, 2)
    if len(pairs) and (pairs.min() < 0 or pairs.max() >= num_nodes):
        raise ValueError(f"node id out of range [0, {num_nodes})")
    loops = pairs[:, 0] == pairs[:, 1]
    pairs = pairs[~loops]
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    keys = np.unique(lo * num_nodes + hi)
    dropped = int(loops.sum()) + len(pairs) - len(keys)
    if dropped:
        logger.warning("build_graph: dropped %d self-loop/duplicate entries", dropped)
    lo, hi = keys // num_nodes, keys % num_nodes
    rows = np.concatenate([lo, hi])
    cols = np.concatenate([hi, lo])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=num_nodes), out=offsets[1:])
    return Graph(num_nodes, offsets, cols.astype(np.int64))


def load_edge_list(path) -> list[tuple[int, int]]:
    """Read ``u v`` integer pairs, one per line; ``#`` starts a comment."""
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'u v', got {line!r}")
            pairs.append((int(parts[0]), int(parts[1])))
    return pairs


def write_edge_list(path, g: Graph) -> None:
    with open(path, "w") as fh:
        for u, v in g.edges():
            fh.write(f"{u} {v}\n")


def degree_vector(g: Graph) -> np.ndarray:
    return np.diff(g.row_offsets)


class FilterKind(enum.Enum):
    IDENTITY = "identity"
    ARW = "arw"
    ASYM = "asym"
    ARW_HAT = "arw_hat"
    ASYM_HAT = "asym_hat"
    LRW = "lrw"
    LSYM = "lsym"
    LRW_HAT = "lrw_hat"
    LSYM_HAT = "lsym_hat"


@dataclass(frozen=True)
class HighPassOf:
    """``I - operator(base)``."""

    base: "Kind"

    @property
    def value(self) -> str:
        return "hp:" + self.base.value


Kind = Union[FilterKind, HighPassOf]

# Laplacian kinds are the high-pass complements of these affinity kinds.
_LAPLACIAN_BASE = {
    FilterKind.LRW: FilterKind.ARW,
    FilterKind.LSYM: FilterKind.ASYM,
    FilterKind.LRW_HAT: FilterKind.ARW_HAT,
    FilterKind.LSYM_HAT: FilterKind.ASYM_HAT,
}


def parse_kind(text: str) -> Kind:
    """Parse ``"arw_hat"`` or ``"hp:arw_hat"`` (nesting allowed)."""
    if text.startswith("hp:"):
        return HighPassOf(parse_kind(text[3:]))
    try:
        return FilterKind(text)
    except ValueError:
        names = ", ".join(k.value for k in FilterKind)
        raise ValueError(f"unknown filter kind {text!r}; expected one of {names} or hp:<kind>") from None


@dataclass(frozen=True, eq=False)
class FilterOperator:
    """Sparse N x N operator tagged with its kind.

    Random-walk kinds keep the unnormalized numerator and the degree
    denominators so that ``spmm`` divides last: with one-hot inputs every
    entry is then a correctly rounded ``count / degree`` and never exceeds 1.
    High-pass kinds evaluate as ``m - base(m)``.
    """

    kind: Kind
    matrix: sp.csr_matrix
    _numerator: sp.csr_matrix | None = field(default=None, repr=False)
    _denominator: np.ndarray | None = field(default=None, repr=False)
    _base: "FilterOperator | None" = field(default=None, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def _identity(n: int) -> sp.csr_matrix:
    return sp.identity(n, format="csr", dtype=np.float64)


def make_filter(g: Graph, kind: Kind = FilterKind.ARW_HAT) -> FilterOperator:
    n = g.num_nodes
    if isinstance(kind, HighPassOf) or kind in _LAPLACIAN_BASE:
        base = make_filter(g, kind.base if isinstance(kind, HighPassOf) else _LAPLACIAN_BASE[kind])
        # Same sparsity as base plus the diagonal (explicit zeros kept), so
        # base + hp == I entry-wise.
        b = base.matrix.tocoo()
        diag = np.arange(n)
        hp = sp.coo_matrix(
            (np.concatenate([np.ones(n), -b.data]),
             (np.concatenate([diag, b.row]), np.concatenate([diag, b.col]))),
            shape=(n, n),
        ).tocsr()
        hp.sort_indices()
        return FilterOperator(kind, hp, _base=base)

    if kind is FilterKind.IDENTITY:
        return FilterOperator(kind, _identity(n))

    adj = g.adjacency()
    deg = degree_vector(g).astype(np.float64)
    if kind in (FilterKind.ARW_HAT, FilterKind.ASYM_HAT):
        adj = (adj + _identity(n)).tocsr()
        deg = deg + 1.0
    elif np.any(deg == 0):
        bad = int(np.flatnonzero(deg == 0)[0])
        raise ValueError(f"{kind.value} is undefined for isolated node {bad}; use a renormalized kind")
    adj.sort_indices()

    if kind in (FilterKind.ARW, FilterKind.ARW_HAT):
        rows = np.repeat(np.arange(n), np.diff(adj.indptr))
        mat = adj.copy()
        mat.data = adj.data / deg[rows]
        return FilterOperator(kind, mat, _numerator=adj, _denominator=deg)

    inv_sqrt = 1.0 / np.sqrt(deg)
    mat = sp.diags(inv_sqrt) @ adj @ sp.diags(inv_sqrt)
    mat = sp.csr_matrix(mat)
    mat.sort_indices()
    return FilterOperator(kind, mat)


def spmm(f: FilterOperator, m: np.ndarray) -> np.ndarray:
    """Product ``f @ m`` for a dense ``m`` with ``f.num_nodes`` rows."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != f.num_nodes:
        raise ValueError(f"spmm: operator is {f.num_nodes}x{f.num_nodes}, matrix has shape {m.shape}")
    if f._base is not None:
        return m - spmm(f._base, m)
    if f._numerator is not None:
        return np.asarray(f._numerator @ m) / f._denominator[:, None]
    return np.asarray(f.matrix @ m)


def spmm_transpose(f: FilterOperator, m: np.ndarray) -> np.ndarray:
    """Product ``f.T @ m``."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[0] != f.num_nodes:
        raise ValueError(f"spmm_transpose: operator is {f.num_nodes}x{f.num_nodes}, matrix has shape {m.shape}")
    if f._base is not None:
        return m - spmm_transpose(f._base, m)
    if f._numerator is not None:
        return np.asarray(f._numerator.T @ (m / f._denominator[:, None]))
    return np.asarray(f.matrix.T @ m)
