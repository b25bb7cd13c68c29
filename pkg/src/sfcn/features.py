"""Per-face shape descriptors: average geodesic distance, shape context, spin image."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .mesh import DualGraph, TriangleMesh
from .npzio import save_npz

KINDS = ("AGD", "SC", "SI")


@dataclass(frozen=True)
class FeatureConfig:
    sc_radial_bins: int = 5
    sc_angle_bins: int = 6
    sc_inner_radius: float = 0.05  # innermost shell edge, fraction of R
    si_bins: int = 8


@dataclass
class FeatureMatrix:
    kind: str
    values: np.ndarray
    normalized: bool = False
    stats: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


def geodesic_matrix(graph: DualGraph, mesh: TriangleMesh) -> np.ndarray:
    """All-pairs shortest paths over dual edges weighted by centroid distance.

    Entries between different components are ``inf``.
    """
    n = graph.n_nodes
    if len(graph.edges) == 0:
        out = np.full((n, n), np.inf)
        np.fill_diagonal(out, 0.0)
        return out
    u, v = graph.edges.T
    w = np.linalg.norm(mesh.centroids[u] - mesh.centroids[v], axis=1)
    adj = coo_matrix((w, (u, v)), shape=(n, n)).tocsr()
    d = dijkstra(adj, directed=False)
    # runs from either end sum the same path in opposite order; make it exactly symmetric
    return np.minimum(d, d.T)


def compute_agd(geodesics: np.ndarray, areas: np.ndarray) -> FeatureMatrix:
    """Area-weighted mean geodesic distance, rescaled so each component's minimum is 1."""
    # smallest reachable index identifies the component
    comp = np.argmax(np.isfinite(geodesics), axis=1)
    out = np.empty(len(areas))
    for c in np.unique(comp):
        idx = np.flatnonzero(comp == c)
        sub = geodesics[np.ix_(idx, idx)]
        a = areas[idx]
        raw = sub @ a / a.sum()
        lo = raw.min()
        out[idx] = raw / lo if lo > 0 else 1.0
    return FeatureMatrix("AGD", out[:, None])


def compute_shape_context(mesh: TriangleMesh, config: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """Area-weighted log-polar histogram of the other faces around each face.

    Bins: log-spaced radial shells from ``sc_inner_radius * R`` to ``R``
    crossed with uniform bins of the angle to the face normal. Samples outside
    the shell range are clamped into the first/last shell.
    """
    nr, na = config.sc_radial_bins, config.sc_angle_bins
    h = mesh.n_faces
    out = np.zeros((h, nr * na))
    if h == 1:
        return FeatureMatrix("SC", out)
    R = mesh.bounding_radius()
    log_lo = np.log(config.sc_inner_radius * R)
    log_step = (np.log(R) - log_lo) / nr
    areas = mesh.areas
    for f in range(h):
        d = mesh.centroids - mesh.centroids[f]
        dist = np.linalg.norm(d, axis=1)
        mask = np.arange(h) != f
        d, dist, w = d[mask], dist[mask], areas[mask]
        with np.errstate(divide="ignore", invalid="ignore"):
            cosang = np.clip((d @ mesh.normals[f]) / dist, -1.0, 1.0)
            rbin = np.floor((np.log(dist) - log_lo) / log_step)
        ang = np.arccos(np.where(dist > 0, cosang, 1.0))
        rbin = np.clip(np.nan_to_num(rbin, neginf=0.0), 0, nr - 1).astype(np.int64)
        abin = np.minimum(np.floor(ang / (np.pi / na)), na - 1).astype(np.int64)
        hist = np.bincount(rbin * na + abin, weights=w, minlength=nr * na)
        out[f] = hist / w.sum()
    return FeatureMatrix("SC", out)


def compute_spin_image(mesh: TriangleMesh, config: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """Area-weighted 2D histogram over (radial distance to the normal axis, height).

    Flattened row-major as ``alpha_bin * si_bins + beta_bin``; alpha spans
    ``[0, R]`` and beta ``[-R, R]`` with out-of-range samples clamped.
    """
    nb = config.si_bins
    h = mesh.n_faces
    out = np.zeros((h, nb * nb))
    if h == 1:
        return FeatureMatrix("SI", out)
    R = mesh.bounding_radius()
    areas = mesh.areas
    for f in range(h):
        d = mesh.centroids - mesh.centroids[f]
        mask = np.arange(h) != f
        d, w = d[mask], areas[mask]
        n = mesh.normals[f]
        beta = d @ n
        alpha = np.linalg.norm(d - beta[:, None] * n, axis=1)
        ai = np.clip(np.floor(alpha / R * nb), 0, nb - 1).astype(np.int64)
        bi = np.clip(np.floor((beta + R) / (2 * R) * nb), 0, nb - 1).astype(np.int64)
        hist = np.bincount(ai * nb + bi, weights=w, minlength=nb * nb)
        out[f] = hist / w.sum()
    return FeatureMatrix("SI", out)


def compute_features(
    mesh: TriangleMesh, graph: DualGraph, config: FeatureConfig = FeatureConfig(), kinds=KINDS
) -> dict[str, FeatureMatrix]:
    """Raw (unnormalized) descriptor matrices for one shape, AGD, SC and SI by default."""
    unknown = set(kinds) - set(KINDS)
    if unknown:
        raise ValueError(f"unknown feature kinds {sorted(unknown)}")
    out = {}
    for kind in kinds:
        if kind == "AGD":
            out[kind] = compute_agd(geodesic_matrix(graph, mesh), mesh.areas)
        elif kind == "SC":
            out[kind] = compute_shape_context(mesh, config)
        else:
            out[kind] = compute_spin_image(mesh, config)
    return out


def channel_stats(matrices) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel min and max over a collection of feature matrices."""
    stacked = np.vstack([m.values for m in matrices])
    return stacked.min(axis=0), stacked.max(axis=0)


def normalize_features(fm: FeatureMatrix, stats=None) -> FeatureMatrix:
    """Per-channel min-max scaling to [0, 1].

    With ``stats`` (e.g. training-set ranges) values outside the range clamp.
    Constant channels map to 0.
    """
    x = fm.values
    lo, hi = (x.min(axis=0), x.max(axis=0)) if stats is None else (np.asarray(stats[0]), np.asarray(stats[1]))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    y = np.where(span > 0, (x - lo) / safe, 0.0)
    if stats is not None:
        y = np.clip(y, 0.0, 1.0)
    return FeatureMatrix(fm.kind, y, normalized=True, stats=(lo.copy(), hi.copy()))


# ---------------------------------------------------------------------------
# cache files


def save_features(path: str | os.PathLike, fm: FeatureMatrix) -> None:
    """Write a feature table as ``.npz``.

    Keys: ``header`` (JSON string with h, C, kind, normalized), ``values``
    (h x C float64, row-major), and ``stat_min``/``stat_max`` when present.
    """
    header = {"h": fm.n_rows, "C": fm.n_channels, "kind": fm.kind, "normalized": fm.normalized}
    arrays = {"header": np.array(json.dumps(header, sort_keys=True)), "values": fm.values}
    if fm.stats is not None:
        arrays["stat_min"], arrays["stat_max"] = fm.stats
    save_npz(path, arrays)


def load_features(path: str | os.PathLike) -> FeatureMatrix:
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        stats = (z["stat_min"], z["stat_max"]) if "stat_min" in z else None
        values = z["values"]
    if values.shape != (header["h"], header["C"]):
        raise ValueError("feature cache header does not match table shape")
    return FeatureMatrix(header["kind"], values, header["normalized"], stats)


def config_dict(config: FeatureConfig) -> dict:
    return asdict(config)
