"""Fuse per-feature predictions and refine labels with multi-label graph cuts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import maxflow
from .mesh import DualGraph

EPS = 1e-6


@dataclass
class EnergyModel:
    """Potts energy: ``sum_u data[u, l_u] + sum_{(u,v) cut} smooth[e]``."""

    data: np.ndarray  # (h, n)
    edges: np.ndarray  # (m, 2)
    smooth: np.ndarray  # (m,)

    @property
    def n_labels(self) -> int:
        return self.data.shape[1]

    def energy(self, labels: np.ndarray) -> float:
        labels = np.asarray(labels)
        e = self.data[np.arange(len(labels)), labels].sum()
        if len(self.edges):
            cut = labels[self.edges[:, 0]] != labels[self.edges[:, 1]]
            e += self.smooth[cut].sum()
        return float(e)


def vote_probabilities(maps, mode: str = "soft") -> np.ndarray:
    """Combine per-feature probability maps face by face.

    ``soft`` averages the distributions; ``hard`` counts argmax votes.
    Rows are renormalized to sum to one.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise ValueError("no probability maps to vote")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("probability maps differ in shape")
    if mode == "soft":
        out = np.mean(maps, axis=0)
    elif mode == "hard":
        out = np.zeros(shape)
        for m in maps:
            out[np.arange(shape[0]), m.argmax(axis=1)] += 1.0
    else:
        raise ValueError(f"unknown voting mode {mode!r}")
    return out / out.sum(axis=1, keepdims=True)


def crease_factor(dihedrals: np.ndarray) -> np.ndarray:
    """Map interior dihedral angles to [0, 1]: flat -> 1, knife-edge crease -> 0."""
    d = np.asarray(dihedrals, dtype=np.float64)
    return np.minimum(d, 2 * np.pi - d) / np.pi


def build_energy(voted: np.ndarray, graph: DualGraph, lam: float = 1.0,
                 eps: float = EPS, length_scale: float = 1.0) -> EnergyModel:
    """Data cost ``-log(P + eps)`` and pairwise cost ``lam * L * crease_factor``.

    ``length_scale`` divides edge lengths (pass the bounding radius to make
    ``lam`` shape-size independent).
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    data = -np.log(np.asarray(voted, dtype=np.float64) + eps)
    data = np.maximum(data, 0.0)
    smooth = lam * (graph.lengths / length_scale) * crease_factor(graph.dihedrals)
    return EnergyModel(data, graph.edges, smooth)


def expansion_move(model: EnergyModel, labels: np.ndarray, alpha: int) -> np.ndarray:
    """Optimal alpha-expansion of ``labels`` via one min cut.

    Sink side of the cut means "switch to alpha". Neighbours with different
    current labels are joined through an auxiliary node.
    """
    h = len(labels)
    g = maxflow.Graph(h)
    d = model.data
    for u in range(h):
        g.add_tweights(u, float(d[u, alpha]), float(d[u, labels[u]]))
    for (u, v), s in zip(model.edges.tolist(), model.smooth.tolist()):
        lu, lv = labels[u], labels[v]
        if s <= 0:
            continue
        if lu == lv:
            if lu != alpha:
                g.add_edge(u, v, s, s)
            continue
        a = g.add_nodes(1)
        cu = s if lu != alpha else 0.0
        cv = s if lv != alpha else 0.0
        if cu:
            g.add_edge(u, a, cu, cu)
        if cv:
            g.add_edge(a, v, cv, cv)
        g.add_tweights(a, 0.0, s)
    g.maxflow()
    out = labels.copy()
    for u in range(h):
        if g.segment(u) == maxflow.SINK:
            out[u] = alpha
    return out


def alpha_expansion(model: EnergyModel, init=None, history: list | None = None,
                    max_cycles: int = 100) -> np.ndarray:
    """Cycle expansion moves over labels until a full cycle brings no improvement.

    A move is kept only when it strictly lowers the energy. ``history``, if
    given, receives the energy before the first move and after each accepted one.
    """
    labels = (model.data.argmin(axis=1) if init is None else np.asarray(init)).astype(np.int64).copy()
    current = model.energy(labels)
    if history is not None:
        history.append(current)
    if not np.any(model.smooth > 0):
        # without pairwise terms every face is independent
        labels = model.data.argmin(axis=1)
        if history is not None:
            history.append(model.energy(labels))
        return labels
    for _ in range(max_cycles):
        improved = False
        for alpha in range(model.n_labels):
            proposal = expansion_move(model, labels, alpha)
            e = model.energy(proposal)
            if e < current - 1e-12 * max(1.0, abs(current)):
                labels, current = proposal, e
                improved = True
                if history is not None:
                    history.append(current)
        if not improved:
            break
    return labels


def exhaustive_minimum(model: EnergyModel) -> tuple[float, np.ndarray]:
    """Brute force over all labelings; only for tiny instances."""
    import itertools

    h, n = model.data.shape
    best, best_l = np.inf, None
    for combo in itertools.product(range(n), repeat=h):
        lab = np.array(combo)
        e = model.energy(lab)
        if e < best:
            best, best_l = e, lab
    return best, best_l


@dataclass
class SegmentResult:
    labels: np.ndarray
    unrefined: np.ndarray
    voted: np.ndarray
    per_feature: dict


def refine(voted: np.ndarray, graph: DualGraph, lam: float = 1.0, length_scale: float = 1.0) -> np.ndarray:
    model = build_energy(voted, graph, lam, length_scale=length_scale)
    return alpha_expansion(model, voted.argmax(axis=1))


def segment_shape(mesh, graph: DualGraph, inputs: dict, nets: dict, lam: float = 1.0,
                  vote: str = "soft") -> SegmentResult:
    """Predict with each feature network, vote, then refine with graph cuts.

    ``inputs[kind] = (ShapeTables, normalized features)`` and
    ``nets[kind] = (NetworkSpec, ParamStore)``.
    """
    from .net import predict

    maps = {k: predict(*nets[k], *inputs[k]) for k in sorted(nets)}
    voted = vote_probabilities(list(maps.values()), mode=vote)
    argmax = voted.argmax(axis=1)
    labels = refine(voted, graph, lam, mesh.bounding_radius())
    return SegmentResult(labels, argmax, voted, maps)


def save_table(path, values: np.ndarray) -> None:
    """Per-face text table: ``face_index value value ...``."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64).T).T
    with open(path, "w") as fh:
        for i, row in enumerate(values):
            fh.write(f"{i} " + " ".join(f"{x:.17g}" for x in row) + "\n")


def load_table(path) -> np.ndarray:
    rows = np.loadtxt(path, ndmin=2)
    return rows[:, 1:]
