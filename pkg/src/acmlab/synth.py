"""Synthetic labeled graphs with a prescribed edge homophily, plus feature
sampling and random splits."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np

from .graph import Graph, build_graph
from .metrics import LabelEncoding

logger = logging.getLogger(__name__)

MAX_RESAMPLE = 100


@dataclass
class SynthSpec:
    mode: Literal["general", "regular"] = "general"
    h_edge_target: float = 0.5
    num_classes: int = 5
    nodes_per_class: int = 400
    intra_edges_per_class: int = 800
    d_intra: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("general", "regular"):
            raise ValueError(f"mode must be 'general' or 'regular', got {self.mode!r}")
        if not 0.0 < self.h_edge_target <= 1.0:
            raise ValueError("h_edge_target must lie in (0, 1]")
        for name in ("num_classes", "nodes_per_class", "intra_edges_per_class", "d_intra"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def num_nodes(self) -> int:
        return self.num_classes * self.nodes_per_class

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def class_labels(spec: SynthSpec) -> LabelEncoding:
    """Contiguous blocks: node ``i`` belongs to class ``i // nodes_per_class``."""
    return LabelEncoding.from_classes(np.arange(spec.num_nodes) // spec.nodes_per_class, spec.num_classes)


def _rng(spec: SynthSpec, rng) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(spec.seed)


# ---------------------------------------------------------------------------
# General mode: multinomial degree budgets


def _draw_targets(src: np.ndarray, intra: np.ndarray, npc: int, n: int, rng) -> np.ndarray:
    """Uniform target per draw: another node of the source's class, or any
    node outside it."""
    cls = src // npc
    t = np.empty_like(src)
    k = rng.integers(npc - 1, size=int(intra.sum())) if npc > 1 else np.zeros(0, dtype=np.int64)
    local = src[intra] - cls[intra] * npc
    t[intra] = cls[intra] * npc + k + (k >= local)
    m = rng.integers(n - npc, size=int((~intra).sum())) if n > npc else np.zeros(0, dtype=np.int64)
    t[~intra] = m + npc * (m >= cls[~intra] * npc)
    return t


def generate_general(spec: SynthSpec, rng=None) -> Graph:
    """Each class gets a degree budget of ``intra_edges / h`` spread over its
    nodes by a multinomial draw; every unit of a node's budget becomes an edge
    to a uniformly chosen same-class node with probability ``h`` and to a
    uniformly chosen node of another class otherwise.

    Colliding draws (repeated or reversed pairs) are resampled up to
    ``MAX_RESAMPLE`` times and then dropped.
    """
    if spec.mode != "general":
        raise ValueError("generate_general needs mode='general'")
    rng = _rng(spec, rng)
    h, npc, C = spec.h_edge_target, spec.nodes_per_class, spec.num_classes
    n = spec.num_nodes
    budget = int(round(spec.intra_edges_per_class / h))
    n_intra_expected = C * spec.intra_edges_per_class
    n_inter_expected = C * (budget - spec.intra_edges_per_class)
    if n_intra_expected > C * npc * (npc - 1) // 2:
        raise ValueError("intra_edges_per_class exceeds the number of same-class node pairs")
    inter_capacity = (n * (n - 1) - C * npc * (npc - 1)) // 2
    if n_inter_expected > inter_capacity:
        raise ValueError(
            f"h={h} asks for ~{n_inter_expected} inter-class edges but only {inter_capacity} "
            "distinct inter-class pairs exist"
        )

    srcs, intras = [], []
    for c in range(C):
        deg = rng.multinomial(budget, np.full(npc, 1.0 / npc))
        n_in = rng.binomial(deg, h)
        nodes = np.arange(c * npc, (c + 1) * npc)
        srcs.append(np.concatenate([np.repeat(nodes, n_in), np.repeat(nodes, deg - n_in)]))
        intras.append(np.concatenate([np.ones(n_in.sum(), bool), np.zeros((deg - n_in).sum(), bool)]))
    src = np.concatenate(srcs)
    intra = np.concatenate(intras)

    accepted = np.zeros(0, dtype=np.int64)
    pending = np.arange(len(src))
    for _ in range(MAX_RESAMPLE + 1):
        if len(pending) == 0:
            break
        tgt = _draw_targets(src[pending], intra[pending], npc, n, rng)
        key = np.minimum(src[pending], tgt) * n + np.maximum(src[pending], tgt)
        _, first = np.unique(key, return_index=True)
        fresh = np.zeros(len(pending), bool)
        fresh[first] = True
        fresh &= ~np.isin(key, accepted)
        accepted = np.concatenate([accepted, key[fresh]])
        pending = pending[~fresh]
    if len(pending):
        logger.warning("generate_general: dropped %d draws after %d resamples", len(pending), MAX_RESAMPLE)
    edges = np.column_stack([accepted // n, accepted % n])
    return build_graph(edges, n)


# ---------------------------------------------------------------------------
# Regular mode: stub matching


def _match_stubs(need: np.ndarray, labels: np.ndarray, same_class: bool, rng,
                 max_repairs: int = 20000) -> list[tuple[int, int]]:
    """Simple graph in which node ``v`` has ``need[v]`` neighbors, all of its own
    class (``same_class``) or all outside it.

    Nodes are visited in random order and pick partners with probability
    proportional to their unfilled stubs; stubs left over at dead ends are then
    placed by rewiring an existing edge ``(a, b)`` into ``(x, a), (y, b)``.
    """
    n = len(need)
    remaining = need.astype(np.int64).copy()
    adj = np.zeros((n, n), dtype=bool)
    eligible = labels[:, None] == labels[None, :]
    if not same_class:
        eligible = ~eligible
    np.fill_diagonal(eligible, False)

    for v in rng.permutation(n):
        r = remaining[v]
        if r <= 0:
            continue
        cand = np.flatnonzero(eligible[v] & ~adj[v] & (remaining > 0))
        k = min(r, len(cand))
        if k == 0:
            continue
        w = remaining[cand].astype(np.float64)
        chosen = rng.choice(cand, size=k, replace=False, p=w / w.sum())
        adj[v, chosen] = adj[chosen, v] = True
        remaining[v] -= k
        remaining[chosen] -= 1

    def valid(x, a):
        return eligible[x, a] and not adj[x, a]

    repairs = 0
    while remaining.sum() >= 2 and repairs < max_repairs:
        deficient = np.flatnonzero(remaining > 0)
        x = int(rng.choice(deficient))
        others = deficient[deficient != x]
        if remaining[x] >= 2 and (len(others) == 0 or rng.random() < 0.5):
            y = x
        elif len(others):
            y = int(rng.choice(others))
        else:
            break
        repairs += 1
        a_cands = np.flatnonzero(eligible[x] & ~adj[x])
        if len(a_cands) == 0:
            continue
        a = int(rng.choice(a_cands))
        b_cands = np.flatnonzero(adj[a])
        if len(b_cands) == 0:
            continue
        b = int(rng.choice(b_cands))
        if b == x or b == y or a == y or not valid(y, b):
            continue
        adj[a, b] = adj[b, a] = False
        adj[x, a] = adj[a, x] = True
        adj[y, b] = adj[b, y] = True
        remaining[x] -= 1
        remaining[y] -= 1

    short = remaining[remaining > 0]
    if short.sum() > 1:
        raise RuntimeError(f"stub matching left {int(short.sum())} stubs unplaced after {repairs} repairs")
    iu, ju = np.nonzero(np.triu(adj))
    return list(zip(iu.tolist(), ju.tolist()))


def inter_stubs(d_intra: int, h: float) -> int:
    """``[d_intra / h - d_intra]`` with round-half-to-even."""
    return int(round(d_intra / h - d_intra))


def generate_regular(spec: SynthSpec, rng=None) -> Graph:
    """Every node gets ``d_intra`` same-class neighbors and
    ``round(d_intra / h - d_intra)`` neighbors in other classes."""
    if spec.mode != "regular":
        raise ValueError("generate_regular needs mode='regular'")
    rng = _rng(spec, rng)
    labels = class_labels(spec).classes
    n, npc = spec.num_nodes, spec.nodes_per_class
    k_inter = inter_stubs(spec.d_intra, spec.h_edge_target)
    if spec.d_intra > npc - 1:
        raise ValueError(f"d_intra={spec.d_intra} exceeds class size - 1 = {npc - 1}")
    if k_inter > n - npc:
        raise ValueError(f"{k_inter} inter-class stubs per node exceed the {n - npc} nodes outside a class")
    edges = _match_stubs(np.full(n, spec.d_intra), labels, True, rng)
    if k_inter:
        edges += _match_stubs(np.full(n, k_inter), labels, False, rng)
    return build_graph(edges, n)


def generate(spec: SynthSpec, rng=None) -> tuple[Graph, LabelEncoding]:
    rng = _rng(spec, rng)
    gen = generate_general if spec.mode == "general" else generate_regular
    return gen(spec, rng), class_labels(spec)


# ---------------------------------------------------------------------------
# Features and splits


def synthetic_base_features(num_classes: int, dim: int = 64, rows_per_class: int = 50,
                            sigma: float = 0.1, rng=None) -> tuple[np.ndarray, LabelEncoding]:
    """Offline stand-in for a real feature corpus: class ``c`` rows are the
    ``c``-th unit vector plus Gaussian noise."""
    if num_classes > dim:
        raise ValueError("need dim >= num_classes for one-hot prototypes")
    rng = rng if rng is not None else np.random.default_rng(0)
    classes = np.repeat(np.arange(num_classes), rows_per_class)
    x = np.eye(dim)[classes] + sigma * rng.standard_normal((len(classes), dim))
    return x, LabelEncoding.from_classes(classes, num_classes)


def sample_features(base_x: np.ndarray, base_labels: LabelEncoding, target_labels: LabelEncoding,
                    rng) -> np.ndarray:
    """Draw each target row uniformly, with replacement, from the base rows of
    the same class index."""
    out = np.empty((target_labels.num_nodes, base_x.shape[1]))
    for c in np.unique(target_labels.classes):
        pool = np.flatnonzero(base_labels.classes == c)
        if len(pool) == 0:
            raise ValueError(f"base features have no rows for class {c}")
        dest = np.flatnonzero(target_labels.classes == c)
        out[dest] = base_x[pool[rng.integers(len(pool), size=len(dest))]]
    return out


def generate_dataset(spec: SynthSpec, base_x=None, base_labels=None):
    """Graph, labels and sampled features for ``spec``; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    g, z = generate(spec, rng)
    if base_x is None:
        base_x, base_labels = synthetic_base_features(spec.num_classes, rng=rng)
    x = sample_features(base_x, base_labels, z, rng)
    return g, z, x


@dataclass(frozen=True, eq=False)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("train", "val", "test")}


def random_split(n: int, fractions=(0.6, 0.2, 0.2), rng=None) -> SplitMasks:
    """Uniformly random train/val/test partition of ``range(n)``."""
    if n < 3:
        raise ValueError("need at least 3 nodes to split")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return SplitMasks(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                      np.sort(perm[n_train + n_val:]))


def write_dataset(out_dir, spec: SynthSpec, g: Graph, z: LabelEncoding, x: np.ndarray) -> None:
    from pathlib import Path

    from .graph import write_edge_list
    from .metrics import write_labels

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_edge_list(out / "edges.txt", g)
    write_labels(out / "labels.txt", z)
    np.savetxt(out / "features.csv", x, delimiter=",", fmt="%.17g")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
