"""Receptive fields, Graclus coarsening and pooling order for graph convolution.

Slot conventions
----------------
Every level of a coarsening hierarchy is laid out as a sequence of *slots*.
Slot ``s`` at level ``j + 1`` owns the two slots ``2s`` and ``2s + 1`` at
level ``j``; slots not backed by a graph node are *fake* and hold zeros. A
pooling layer of size 4 therefore reduces consecutive groups of four rows.
Tables store slot offsets, with ``FAKE`` (-1) for empty entries.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .npzio import save_npz

FAKE = -1


@dataclass
class Graph:
    """Undirected weighted graph on ``n`` nodes with ``edges[i] = (u, v)``, ``u < v``."""

    n: int
    edges: np.ndarray
    weights: np.ndarray

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges.tolist():
            nbrs[u].append(v)
            nbrs[v].append(u)
        for lst in nbrs:
            lst.sort()
        return nbrs

    def weighted_degree(self) -> np.ndarray:
        d = np.zeros(self.n)
        np.add.at(d, self.edges[:, 0], self.weights)
        np.add.at(d, self.edges[:, 1], self.weights)
        return d


@dataclass
class ReceptiveFieldTable:
    """``rows[i]`` lists K node ids: the source first, then its neighbours by similarity."""

    rows: np.ndarray

    @property
    def K(self) -> int:
        return self.rows.shape[1]


@dataclass
class Level:
    n_real: int
    graph: Graph
    order: np.ndarray  # slot -> node id; ids >= n_real are fake
    parent: np.ndarray | None = None  # real node -> real node at next level

    @property
    def n_slots(self) -> int:
        return len(self.order)

    @property
    def fake(self) -> np.ndarray:
        return self.order >= self.n_real

    def slot_of_node(self) -> np.ndarray:
        inv = np.empty(self.n_slots, dtype=np.int64)
        inv[self.order] = np.arange(self.n_slots)
        return inv


@dataclass
class CoarseningHierarchy:
    levels: list[Level]
    coarsenings_per_pool: int = 2

    @property
    def pool_layers(self) -> int:
        return (len(self.levels) - 1) // self.coarsenings_per_pool

    def pool_level(self, p: int) -> Level:
        """Level seen by conv block ``p`` (``p = pool_layers`` is the coarsest)."""
        return self.levels[p * self.coarsenings_per_pool]

    def permutation(self, p: int) -> np.ndarray:
        """Pooling permutation for layer ``p``: slot -> node id, fakes included."""
        return self.pool_level(p).order


# ---------------------------------------------------------------------------
# receptive fields


def _l2(features: np.ndarray, src: int, nodes) -> np.ndarray:
    diff = features[np.asarray(nodes, dtype=np.int64)] - features[src]
    return np.einsum("ij,ij->i", diff, diff)


def _by_similarity(features: np.ndarray, src: int, nodes: list[int]) -> list[int]:
    if not nodes:
        return []
    d = _l2(features, src, nodes)
    order = np.lexsort((np.asarray(nodes), d))
    return [nodes[i] for i in order]


def build_receptive_fields(neighbors: list[list[int]], features: np.ndarray, K: int) -> ReceptiveFieldTable:
    """Source node plus its K-1 BFS-nearest nodes, ordered by feature similarity.

    BFS layers are taken whole while they fit; the last partial layer keeps its
    most similar nodes (squared L2 in feature space, ties by node index). The
    collected neighbours are then sorted by the same key. Rows shorter than K
    are padded with ``FAKE``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    n = len(neighbors)
    features = np.asarray(features, dtype=np.float64).reshape(n, -1)
    rows = np.full((n, K), FAKE, dtype=np.int64)
    need = K - 1
    for s in range(n):
        rows[s, 0] = s
        picked: list[int] = []
        seen = {s}
        frontier = [s]
        while frontier and len(picked) < need:
            layer = sorted({v for u in frontier for v in neighbors[u] if v not in seen})
            seen.update(layer)
            room = need - len(picked)
            if len(layer) > room:
                layer = _by_similarity(features, s, layer)[:room]
            picked.extend(layer)
            frontier = layer
        picked = _by_similarity(features, s, picked)
        rows[s, 1 : 1 + len(picked)] = picked
    return ReceptiveFieldTable(rows)


def edge_weights_from_features(edges: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Gaussian similarity ``exp(-|f_u - f_v|^2 / sigma2)`` with sigma2 the mean over edges."""
    if len(edges) == 0:
        return np.zeros(0)
    f = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    diff = f[edges[:, 0]] - f[edges[:, 1]]
    d2 = np.einsum("ij,ij->i", diff, diff)
    sigma2 = d2.mean()
    if sigma2 == 0:
        return np.ones(len(edges))
    return np.exp(-d2 / sigma2)


# ---------------------------------------------------------------------------
# coarsening


def graclus_coarsen(graph: Graph) -> tuple[np.ndarray, Graph]:
    """One greedy normalized-cut matching pass.

    Nodes are visited in index order; each unmatched node pairs with the
    unmatched neighbour maximizing ``w(u,v) * (1/d(u) + 1/d(v))`` (lower index
    wins ties). Returns the parent map and the coarse graph whose edge weights
    are sums over crossing fine edges.
    """
    n = graph.n
    nbrs = graph.neighbors()
    deg = graph.weighted_degree()
    wmap: dict[tuple[int, int], float] = {}
    for (u, v), w in zip(graph.edges.tolist(), graph.weights.tolist()):
        wmap[(u, v)] = w
    parent = np.full(n, -1, dtype=np.int64)
    n_coarse = 0
    for u in range(n):
        if parent[u] >= 0:
            continue
        parent[u] = n_coarse
        best, best_score = -1, -np.inf
        for v in nbrs[u]:
            if parent[v] >= 0:
                continue
            w = wmap[(u, v) if u < v else (v, u)]
            score = w * (1.0 / deg[u] + 1.0 / deg[v]) if w > 0 else 0.0
            if score > best_score:
                best, best_score = v, score
        if best >= 0:
            parent[best] = n_coarse
        n_coarse += 1

    if len(graph.edges) == 0:
        return parent, Graph(n_coarse, np.zeros((0, 2), dtype=np.int64), np.zeros(0))
    pu, pv = parent[graph.edges[:, 0]], parent[graph.edges[:, 1]]
    keep = pu != pv
    a, b = np.minimum(pu, pv)[keep], np.maximum(pu, pv)[keep]
    key = a * n_coarse + b
    uniq, inv = np.unique(key, return_inverse=True)
    weights = np.bincount(inv, weights=graph.weights[keep], minlength=len(uniq))
    edges = np.stack([uniq // n_coarse, uniq % n_coarse], axis=1)
    return parent, Graph(n_coarse, edges, weights)


def _slot_orders(parents: list[np.ndarray], sizes: list[int]) -> list[np.ndarray]:
    """Propagate the coarsest ascending order down the hierarchy, inserting fakes."""
    orders = [np.arange(sizes[-1], dtype=np.int64)]
    for j in range(len(parents) - 1, -1, -1):
        children: list[list[int]] = [[] for _ in range(sizes[j + 1])]
        for node, p in enumerate(parents[j].tolist()):
            children[p].append(node)
        next_fake = sizes[j]
        order: list[int] = []
        for coarse in orders[0].tolist():
            kids = children[coarse] if coarse < sizes[j + 1] else []
            while len(kids) < 2:
                kids = kids + [next_fake]
                next_fake += 1
            order.extend(kids)
        orders.insert(0, np.array(order, dtype=np.int64))
    return orders


def build_hierarchy(graph: Graph, pool_layers: int, coarsenings_per_pool: int = 2) -> CoarseningHierarchy:
    """Coarsen ``pool_layers * coarsenings_per_pool`` times and fix the slot layout."""
    if pool_layers < 1:
        raise ValueError("pool_layers must be >= 1")
    graphs = [graph]
    parents = []
    for _ in range(pool_layers * coarsenings_per_pool):
        parent, coarse = graclus_coarsen(graphs[-1])
        parents.append(parent)
        graphs.append(coarse)
    orders = _slot_orders(parents, [g.n for g in graphs])
    levels = [
        Level(g.n, g, orders[j], parents[j] if j < len(parents) else None)
        for j, g in enumerate(graphs)
    ]
    return CoarseningHierarchy(levels, coarsenings_per_pool)


def coarse_features(hierarchy: CoarseningHierarchy, features: np.ndarray, areas: np.ndarray):
    """Area-weighted mean input features (and summed areas) at every level."""
    f = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    a = np.asarray(areas, dtype=np.float64)
    out = [(f, a)]
    for lvl in hierarchy.levels[:-1]:
        n_next = int(lvl.parent.max()) + 1 if lvl.n_real else 0
        a_next = np.bincount(lvl.parent, weights=a, minlength=n_next)
        f_next = np.zeros((n_next, f.shape[1]))
        np.add.at(f_next, lvl.parent, f * a[:, None])
        f_next /= a_next[:, None]
        f, a = f_next, a_next
        out.append((f, a))
    return out


def coarse_receptive_fields(hierarchy: CoarseningHierarchy, level: int, features: np.ndarray, K: int):
    """Receptive fields on the coarse graph of ``level`` using proxy input features."""
    lvl = hierarchy.levels[level]
    return build_receptive_fields(lvl.graph.neighbors(), features, K)


def build_generating_table(rf: ReceptiveFieldTable, level: Level) -> np.ndarray:
    """Receptive fields laid out in slot order with entries as slot offsets.

    Row ``r`` is the neighbourhood of the node in slot ``r``; fake slots get
    all-FAKE rows. Convolution then runs by row and pooling by column groups.
    """
    slot = level.slot_of_node()
    table = np.full((level.n_slots, rf.K), FAKE, dtype=np.int64)
    real = ~level.fake
    nodes = level.order[real]
    src = rf.rows[nodes]
    table[real] = np.where(src == FAKE, FAKE, slot[np.where(src == FAKE, 0, src)])
    return table


# ---------------------------------------------------------------------------
# per-shape bundle consumed by the network


@dataclass
class ShapeTables:
    """Static per-shape data for one network: tables and masks per pooling level.

    ``tables[p]`` is the generating table used by conv block ``p``;
    ``masks[p]`` flags real slots at pooling level ``p`` (``p = 0 .. P``);
    ``input_slots[f]`` is the level-0 slot holding face ``f``.
    """

    h: int
    K: int
    tables: list[np.ndarray]
    masks: list[np.ndarray]
    input_slots: np.ndarray
    _scatter: dict = field(default_factory=dict, repr=False)

    @property
    def pool_layers(self) -> int:
        return len(self.tables)

    def scatter_matrix(self, p: int):
        """Sparse (n_slots, n_slots*K) operator adding gathered rows back to their sources."""
        if p not in self._scatter:
            from scipy.sparse import csr_matrix

            t = self.tables[p].ravel()
            n = len(self.tables[p])
            cols = np.flatnonzero(t != FAKE)
            self._scatter[p] = csr_matrix(
                (np.ones(len(cols)), (t[cols], cols)), shape=(n, t.size)
            )
        return self._scatter[p]


def prepare_tables(
    neighbors: list[list[int]],
    edges: np.ndarray,
    features: np.ndarray,
    areas: np.ndarray,
    K: int,
    pool_layers: int,
) -> tuple[ShapeTables, CoarseningHierarchy]:
    """Weights, hierarchy and every generating table for one shape and feature."""
    n = len(neighbors)
    w = edge_weights_from_features(edges, features)
    hier = build_hierarchy(Graph(n, np.asarray(edges, dtype=np.int64).reshape(-1, 2), w), pool_layers)
    proxies = coarse_features(hier, features, areas)
    tables, masks = [], []
    for p in range(pool_layers + 1):
        li = p * hier.coarsenings_per_pool
        lvl = hier.levels[li]
        masks.append(~lvl.fake)
        if p < pool_layers:
            nb = neighbors if li == 0 else lvl.graph.neighbors()
            rf = build_receptive_fields(nb, proxies[li][0], K)
            tables.append(build_generating_table(rf, lvl))
    input_slots = hier.levels[0].slot_of_node()[:n]
    return ShapeTables(n, K, tables, masks, input_slots), hier


def save_tables(path: str | os.PathLike, st: ShapeTables, hierarchy: CoarseningHierarchy | None = None) -> None:
    """Write tables as ``.npz``.

    Arrays: ``header`` = [h, K, pool_layers], ``input_slots``, ``table_<p>``
    (int64, FAKE = -1) and ``mask_<p>`` (uint8, 1 = real slot) per pooling
    level. With ``hierarchy``, also ``order_<j>`` (slot -> node, ids >= n_real
    are fake) and ``parent_<j>`` (node -> coarse node) for every coarsening level.
    """
    arrays = {"header": np.array([st.h, st.K, st.pool_layers], dtype=np.int64), "input_slots": st.input_slots}
    for p, t in enumerate(st.tables):
        arrays[f"table_{p}"] = t
    for p, m in enumerate(st.masks):
        arrays[f"mask_{p}"] = m.astype(np.uint8)
    if hierarchy is not None:
        for j, lvl in enumerate(hierarchy.levels):
            arrays[f"order_{j}"] = lvl.order
            if lvl.parent is not None:
                arrays[f"parent_{j}"] = lvl.parent
    save_npz(path, arrays)


def load_tables(path: str | os.PathLike) -> ShapeTables:
    with np.load(path) as z:
        h, K, P = (int(x) for x in z["header"])
        tables = [z[f"table_{p}"] for p in range(P)]
        masks = [z[f"mask_{p}"].astype(bool) for p in range(P + 1)]
        return ShapeTables(h, K, tables, masks, z["input_slots"])
