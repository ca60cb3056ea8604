"""CSR graph storage, induced subgraph views, node partitions and k-hop layering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ContractError, GraphTooSmallError


def _as_index_array(nodes: Iterable[int] | np.ndarray) -> np.ndarray:
    arr = np.asarray(list(nodes) if not isinstance(nodes, np.ndarray) else nodes, dtype=np.int64)
    return arr.reshape(-1)


def _gather_rows(offsets: np.ndarray, targets: np.ndarray, rows: np.ndarray):
    """Concatenate CSR rows ``rows``; returns (row position per entry, targets)."""
    starts = offsets[rows]
    lens = offsets[rows + 1] - starts
    total = int(lens.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    row_pos = np.repeat(np.arange(len(rows), dtype=np.int64), lens)
    within = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(lens) - lens, lens)
    return row_pos, targets[np.repeat(starts, lens) + within]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph in CSR form.

    Edges are stored in both directions, without self-loops or duplicates,
    and targets are sorted within each row.
    """

    num_nodes: int
    csr_offsets: np.ndarray
    csr_targets: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    node_names: tuple[str, ...] = ()
    class_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.num_nodes
        off, tgt = self.csr_offsets, self.csr_targets
        if off.shape != (n + 1,) or off[0] != 0 or off[-1] != len(tgt):
            raise ContractError("csr_offsets inconsistent with csr_targets")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ContractError("features must be a [num_nodes x feature_dim] matrix")
        if self.labels.shape != (n,):
            raise ContractError("labels must have one entry per node")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError("labels out of [0, num_classes)")
        rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(off))
        if len(tgt):
            if tgt.min() < 0 or tgt.max() >= n:
                raise ContractError("edge target out of range")
            if np.any(rows == tgt):
                raise ContractError("self-loops are not stored")
            same_row = rows[1:] == rows[:-1]
            if np.any(tgt[1:][same_row] <= tgt[:-1][same_row]):
                raise ContractError("targets must be strictly increasing within a row")
            fwd = rows * n + tgt
            rev = np.sort(tgt * n + rows)
            if not np.array_equal(fwd, rev):
                raise ContractError("adjacency is not symmetric")
        for a in (off, tgt, self.features, self.labels):
            _frozen(a)

    @classmethod
    def from_edges(cls, num_nodes, src, dst, features, labels, num_classes, **kw) -> "Graph":
        """Build a graph from an arbitrary edge list.

        Edges are symmetrized, self-loops dropped and duplicates merged; the
        counts of removed entries end up in ``meta``.
        """
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        loops = src == dst
        s = np.concatenate([src[~loops], dst[~loops]])
        d = np.concatenate([dst[~loops], src[~loops]])
        keys = np.unique(s * num_nodes + d)
        rows, cols = np.divmod(keys, num_nodes) if num_nodes else (keys, keys)
        offsets = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=num_nodes), out=offsets[1:])
        meta = dict(kw.pop("meta", {}))
        meta.setdefault("self_loops_removed", int(loops.sum()))
        meta.setdefault("duplicate_edges_removed", int((~loops).sum() * 2 - len(keys)))
        return cls(
            num_nodes=int(num_nodes),
            csr_offsets=offsets,
            csr_targets=cols.astype(np.int64),
            features=np.ascontiguousarray(features, dtype=np.float64),
            labels=np.asarray(labels, dtype=np.int64),
            num_classes=int(num_classes),
            meta=meta,
            **kw,
        )

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edge_entries(self) -> int:
        """Directed entries; twice the number of undirected edges."""
        return len(self.csr_targets)

    @cached_property
    def degrees(self) -> np.ndarray:
        return _frozen(np.diff(self.csr_offsets))

    @cached_property
    def sparse_features(self) -> sp.csr_matrix:
        return sp.csr_matrix(self.features)

    def neighbors(self, u: int) -> np.ndarray:
        return self.csr_targets[self.csr_offsets[u]:self.csr_offsets[u + 1]]

    def edge_list(self) -> tuple[np.ndarray, np.ndarray]:
        rows = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees)
        return rows, self.csr_targets.copy()

    @cached_property
    def full_view(self) -> "GraphView":
        return GraphView(self, np.arange(self.num_nodes, dtype=np.int64))

    def same_as(self, other: "Graph") -> bool:
        return (
            self.num_nodes == other.num_nodes
            and self.num_classes == other.num_classes
            and np.array_equal(self.csr_offsets, other.csr_offsets)
            and np.array_equal(self.csr_targets, other.csr_targets)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and tuple(self.node_names) == tuple(other.node_names)
            and tuple(self.class_names) == tuple(other.class_names)
        )


class GraphView:
    """Induced subgraph of a root graph with local<->global index maps.

    Local ids follow ascending global id. ``parent_degree`` keeps the root
    graph's degrees so that degree-normalized aggregation of a node whose
    whole receptive field is inside the view matches the full graph.
    """

    def __init__(self, root: Graph, global_ids: np.ndarray):
        ids = np.unique(_as_index_array(global_ids))
        if len(ids) and (ids[0] < 0 or ids[-1] >= root.num_nodes):
            raise IndexError("node index out of range for graph")
        self.root = root
        self.global_ids = _frozen(ids)
        m = len(ids)
        row_pos, tgt = _gather_rows(root.csr_offsets, root.csr_targets, ids)
        loc = np.searchsorted(ids, tgt)
        keep = loc < m
        keep[keep] = ids[loc[keep]] == tgt[keep]
        offsets = np.zeros(m + 1, dtype=np.int64)
        np.cumsum(np.bincount(row_pos[keep], minlength=m), out=offsets[1:])
        self.csr_offsets = _frozen(offsets)
        self.csr_targets = _frozen(loc[keep].astype(np.int64))
        self.cache: dict = {}

    @property
    def num_nodes(self) -> int:
        return len(self.global_ids)

    @property
    def num_edge_entries(self) -> int:
        return len(self.csr_targets)

    @property
    def labels(self) -> np.ndarray:
        return self.root.labels[self.global_ids]

    @property
    def num_classes(self) -> int:
        return self.root.num_classes

    @property
    def parent_degree(self) -> np.ndarray:
        return self.root.degrees[self.global_ids]

    @property
    def local_degree(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    @cached_property
    def sparse_features(self) -> sp.csr_matrix:
        if self.num_nodes == self.root.num_nodes:
            return self.root.sparse_features
        return self.root.sparse_features[self.global_ids]

    @property
    def features(self) -> np.ndarray:
        return self.root.features[self.global_ids]

    def edge_list(self, space: str = "local") -> tuple[np.ndarray, np.ndarray]:
        rows = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.local_degree)
        cols = self.csr_targets
        if space == "global":
            return self.global_ids[rows], self.global_ids[cols]
        return rows, cols.copy()

    def to_global(self, local: Sequence[int] | np.ndarray) -> np.ndarray:
        return self.global_ids[_as_index_array(local)]

    def to_local(self, global_ids: Sequence[int] | np.ndarray) -> np.ndarray:
        g = _as_index_array(global_ids)
        loc = np.searchsorted(self.global_ids, g)
        ok = loc < self.num_nodes
        ok[ok] = self.global_ids[loc[ok]] == g[ok]
        if not ok.all():
            raise IndexError(f"nodes {g[~ok][:5].tolist()} are not in this subgraph")
        return loc

    def to_graph(self) -> Graph:
        """Materialize as a standalone graph (degrees recomputed locally)."""
        r = self.root
        return Graph(
            num_nodes=self.num_nodes,
            csr_offsets=self.csr_offsets.copy(),
            csr_targets=self.csr_targets.copy(),
            features=r.features[self.global_ids],
            labels=r.labels[self.global_ids].copy(),
            num_classes=r.num_classes,
            node_names=tuple(r.node_names[i] for i in self.global_ids) if r.node_names else (),
            class_names=r.class_names,
        )


def induced_subgraph(graph: Graph, nodes) -> GraphView:
    """Subgraph containing exactly the edges with both endpoints in ``nodes``."""
    return GraphView(graph, _as_index_array(nodes))


def hop_distances(graph: Graph, seeds, max_hops: int) -> np.ndarray:
    """Multi-source BFS distances, -1 beyond ``max_hops`` or unreachable."""
    dist = np.full(graph.num_nodes, -1, dtype=np.int64)
    frontier = np.unique(_as_index_array(seeds))
    dist[frontier] = 0
    for hop in range(1, max_hops + 1):
        if not len(frontier):
            break
        _, nbrs = _gather_rows(graph.csr_offsets, graph.csr_targets, frontier)
        nbrs = np.unique(nbrs)
        frontier = nbrs[dist[nbrs] < 0]
        dist[frontier] = hop
    return dist


def k_hop_closure(graph: Graph, nodes, hops: int) -> np.ndarray:
    """All nodes within ``hops`` of ``nodes`` (including them)."""
    return np.flatnonzero(hop_distances(graph, nodes, hops) >= 0)


def khop_view(graph: Graph, nodes, hops: int) -> GraphView:
    """Induced subgraph on the ``hops``-hop closure of ``nodes``."""
    return GraphView(graph, k_hop_closure(graph, nodes, hops))


@dataclass(frozen=True)
class LayeredNeighborhood:
    """Hop layers around a seed set: ``layers[i]`` sits at distance i+1."""

    seeds: np.ndarray
    layers: tuple[np.ndarray, ...]

    def views(self, graph: Graph, depth: int) -> list[GraphView]:
        """Per-layer subgraphs holding each layer plus ``depth`` hops of context."""
        return [khop_view(graph, layer, depth) for layer in self.layers]

    def trimmed(self) -> tuple[np.ndarray, ...]:
        """Layers up to (excluding) the first empty one."""
        out = []
        for layer in self.layers:
            if not len(layer):
                break
            out.append(layer)
        return tuple(out)


def k_hop_layers(graph: Graph, seeds, k: int, exclude=()) -> LayeredNeighborhood:
    """Split the (k+1)-hop neighborhood of ``seeds`` into distance layers.

    Distances are measured in the full graph; ``exclude`` is removed from
    the layers afterwards, it does not block traversal.
    """
    seeds = np.unique(_as_index_array(seeds))
    if not len(seeds):
        raise ContractError("k_hop_layers needs a nonempty seed set")
    if k < 1:
        raise ContractError("k must be >= 1")
    dist = hop_distances(graph, seeds, k + 1)
    excluded = np.zeros(graph.num_nodes, dtype=bool)
    excluded[_as_index_array(exclude)] = True
    layers = tuple(
        _frozen(np.flatnonzero((dist == hop) & ~excluded)) for hop in range(1, k + 2)
    )
    return LayeredNeighborhood(seeds=_frozen(seeds), layers=layers)


@dataclass(frozen=True)
class NodePartition:
    num_nodes: int
    train_nodes: np.ndarray
    test_nodes: np.ndarray
    unlearn_nodes: np.ndarray
    remain_nodes: np.ndarray
    eval_nodes: np.ndarray

    def __post_init__(self):
        for name in ("train_nodes", "test_nodes", "unlearn_nodes", "remain_nodes", "eval_nodes"):
            arr = np.sort(_as_index_array(getattr(self, name)))
            object.__setattr__(self, name, _frozen(arr))
        self.check()

    def check(self) -> None:
        tr, ts = set(self.train_nodes.tolist()), set(self.test_nodes.tolist())
        u, r = set(self.unlearn_nodes.tolist()), set(self.remain_nodes.tolist())
        if tr & ts or len(tr | ts) != self.num_nodes or (tr | ts) != set(range(self.num_nodes)):
            raise ContractError("train/test must partition all nodes")
        if u & r or (u | r) != tr:
            raise ContractError("unlearn/remain must partition the train nodes")
        if not set(self.eval_nodes.tolist()) <= ts:
            raise ContractError("eval nodes must be test nodes")

    def test_mask(self) -> np.ndarray:
        m = np.zeros(self.num_nodes, dtype=bool)
        m[self.test_nodes] = True
        return m

    def known_labels(self, labels: np.ndarray) -> np.ndarray:
        """Labels with every test node masked to -1 (train supervision only)."""
        out = np.asarray(labels, dtype=np.int64).copy()
        out[self.test_nodes] = -1
        return out


def _check_fraction(name: str, value: float) -> None:
    if not (0.0 < value < 1.0):
        raise ConfigError(f"{name} must lie in (0, 1), got {value}")


def split_nodes(
    graph: Graph,
    rng_seed: int,
    test_fraction: float = 0.1,
    unlearn_fraction: float = 0.1,
    eval_fraction: float = 0.5,
) -> NodePartition:
    """Random transductive split.

    Set sizes are floor(fraction * base size). For a fixed seed and test
    fraction, the unlearn sets for growing ``unlearn_fraction`` are nested.
    """
    _check_fraction("test_fraction", test_fraction)
    _check_fraction("unlearn_fraction", unlearn_fraction)
    _check_fraction("eval_fraction", eval_fraction)
    n = graph.num_nodes
    if n < 10:
        raise GraphTooSmallError(f"need at least 10 nodes to split, got {n}")
    rng = np.random.default_rng(rng_seed)
    perm = rng.permutation(n)
    n_test = math.floor(test_fraction * n)
    test, train = perm[:n_test], perm[n_test:]
    train_perm = rng.permutation(train)
    n_unlearn = math.floor(unlearn_fraction * len(train))
    test_perm = rng.permutation(test)
    n_eval = math.floor(eval_fraction * len(test))
    return NodePartition(
        num_nodes=n,
        train_nodes=train,
        test_nodes=test,
        unlearn_nodes=train_perm[:n_unlearn],
        remain_nodes=train_perm[n_unlearn:],
        eval_nodes=test_perm[:n_eval],
    )
