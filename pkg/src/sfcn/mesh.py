"""Triangle meshes, manifold diagnostics and the face-adjacency dual graph."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEGENERATE_AREA_RATIO = 1e-12


class MeshError(ValueError):
    """Raised when a mesh file cannot be parsed or violates a precondition."""


@dataclass(frozen=True)
class TriangleMesh:
    """Vertices and triangular faces with per-face geometry caches.

    Parameters
    ----------
    vertices : (nv, 3) float array
    faces : (nf, 3) int array of vertex indices
    """

    vertices: np.ndarray
    faces: np.ndarray
    centroids: np.ndarray = field(init=False, repr=False)
    normals: np.ndarray = field(init=False, repr=False)
    areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError("vertices must be an (n, 3) array")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError("non-triangle face")
        if len(f) == 0:
            raise MeshError("mesh has no faces")
        if f.min() < 0 or f.max() >= len(v):
            raise MeshError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("degenerate face: repeated vertex")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")

        p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        cross = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(cross, axis=1)
        areas = 0.5 * norm
        diag = np.linalg.norm(v.max(axis=0) - v.min(axis=0))
        if np.any(areas <= DEGENERATE_AREA_RATIO * diag**2):
            bad = int(np.argmin(areas))
            raise MeshError(f"degenerate face {bad}: area {areas[bad]:.3g}")

        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "centroids", (p0 + p1 + p2) / 3.0)
        object.__setattr__(self, "normals", cross / norm[:, None])
        object.__setattr__(self, "areas", areas)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def surface_centroid(self) -> np.ndarray:
        return (self.areas[:, None] * self.centroids).sum(axis=0) / self.areas.sum()

    def bounding_radius(self) -> float:
        """Radius of the sphere about the area-weighted centroid enclosing all vertices.

        Unlike a bounding-box centre this is invariant under rotation.
        """
        c = self.surface_centroid()
        return float(np.linalg.norm(self.vertices - c, axis=1).max())


@dataclass(frozen=True)
class DualGraph:
    """Face-adjacency graph: one node per face, one edge per shared mesh edge.

    ``edges[i] = (u, v)`` with ``u < v``. ``lengths[i]`` is the shared edge
    length and ``dihedrals[i]`` the interior dihedral angle (flat = pi).
    """

    n_nodes: int
    edges: np.ndarray
    lengths: np.ndarray
    dihedrals: np.ndarray

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for u, v in self.edges.tolist():
            nbrs[u].append(v)
            nbrs[v].append(u)
        for lst in nbrs:
            lst.sort()
        return nbrs


@dataclass
class ManifoldReport:
    is_manifold: bool
    offending_edges: list[tuple[int, int]]
    n_components: int
    components: np.ndarray  # component id per face


# ---------------------------------------------------------------------------
# readers


def _strip_comment(line: str) -> str:
    return line.split("#", 1)[0].strip()


def _read_off(text: str) -> tuple[np.ndarray, np.ndarray]:
    tokens: list[str] = []
    lines = [_strip_comment(ln) for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise MeshError("parse error: empty file")
    head = lines[0]
    if not head.startswith("OFF"):
        raise MeshError("parse error: missing OFF header")
    rest = head[3:].split()
    for ln in lines[1:]:
        tokens.extend(ln.split())
    tokens = rest + tokens
    try:
        nv, nf = int(tokens[0]), int(tokens[1])
        pos = 3
        verts = np.array(tokens[pos : pos + 3 * nv], dtype=np.float64)
        if verts.size != 3 * nv:
            raise MeshError("parse error: truncated vertex list")
        pos += 3 * nv
        faces = []
        for _ in range(nf):
            k = int(tokens[pos])
            if k != 3:
                raise MeshError("non-triangle face")
            faces.append([int(t) for t in tokens[pos + 1 : pos + 4]])
            pos += 1 + k
            # optional per-face colour values are not supported
    except (IndexError, ValueError) as exc:
        raise MeshError(f"parse error: {exc}") from exc
    if len(faces) != nf or any(len(f) != 3 for f in faces):
        raise MeshError("parse error: truncated face list")
    return verts.reshape(nv, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _read_obj(text: str) -> tuple[np.ndarray, np.ndarray]:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    try:
        for raw in text.splitlines():
            parts = _strip_comment(raw).split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) != 3:
                    raise MeshError("non-triangle face")
                faces.append(idx)
    except ValueError as exc:
        raise MeshError(f"parse error: {exc}") from exc
    if not verts or not faces:
        raise MeshError("parse error: no vertices or faces")
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)


def load_mesh(path: str | os.PathLike, format: str | None = None) -> TriangleMesh:
    """Read an ASCII OFF or OBJ file. Polygon faces are rejected, not split."""
    fmt = (format or os.path.splitext(str(path))[1].lstrip(".")).lower()
    with open(path, "r") as fh:
        text = fh.read()
    if fmt == "off":
        v, f = _read_off(text)
    elif fmt == "obj":
        v, f = _read_obj(text)
    else:
        raise MeshError(f"unsupported mesh format {fmt!r}")
    return TriangleMesh(v, f)


def write_off(path: str | os.PathLike, mesh: TriangleMesh) -> None:
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_faces} 0\n")
        # repr of a Python float round-trips exactly
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")
        for a, b, c in mesh.faces.tolist():
            fh.write(f"3 {a} {b} {c}\n")


def read_labels(path: str | os.PathLike) -> np.ndarray:
    """Read a ``.seg`` file: one integer label per line, line i = face i."""
    with open(path) as fh:
        vals = [int(ln.split()[0]) for ln in fh if ln.strip()]
    return np.array(vals, dtype=np.int64)


def write_labels(path: str | os.PathLike, labels) -> None:
    with open(path, "w") as fh:
        fh.write("".join(f"{int(x)}\n" for x in labels))


# ---------------------------------------------------------------------------
# topology


def _edge_faces(faces: np.ndarray) -> dict[tuple[int, int], list[int]]:
    table: dict[tuple[int, int], list[int]] = {}
    for fi, (a, b, c) in enumerate(faces.tolist()):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            table.setdefault(key, []).append(fi)
    return table


def _find(parent: list[int], x: int) -> int:
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


def face_components(n_faces: int, edges: np.ndarray) -> np.ndarray:
    """Connected-component id per face (ids ordered by smallest member)."""
    parent = list(range(n_faces))
    for u, v in edges.tolist():
        ru, rv = _find(parent, u), _find(parent, v)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
    roots = np.array([_find(parent, i) for i in range(n_faces)])
    _, comp = np.unique(roots, return_inverse=True)
    return comp.astype(np.int64)


def check_manifold(mesh: TriangleMesh) -> ManifoldReport:
    table = _edge_faces(mesh.faces)
    bad = sorted(k for k, fs in table.items() if len(fs) > 2)
    # faces sharing any edge are connected, including non-manifold fans
    pairs = [(fs[0], f) for fs in table.values() for f in fs[1:]]
    edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    comp = face_components(mesh.n_faces, edges)
    return ManifoldReport(
        is_manifold=not bad,
        offending_edges=bad,
        n_components=int(comp.max()) + 1,
        components=comp,
    )


def build_dual_graph(mesh: TriangleMesh) -> DualGraph:
    table = _edge_faces(mesh.faces)
    bad = [k for k, fs in table.items() if len(fs) > 2]
    if bad:
        raise MeshError(f"non-manifold input: {len(bad)} edges shared by >2 faces")

    rows = []
    for (a, b), fs in table.items():
        if len(fs) == 2:
            u, v = sorted(fs)
            rows.append((u, v, a, b))
    rows.sort()
    if not rows:
        empty = np.zeros(0)
        return DualGraph(mesh.n_faces, np.zeros((0, 2), dtype=np.int64), empty, empty.copy())

    arr = np.array(rows, dtype=np.int64)
    u, v, a, b = arr.T
    V = mesh.vertices
    lengths = np.linalg.norm(V[a] - V[b], axis=1)

    nu, nv = mesh.normals[u], mesh.normals[v]
    sin = np.linalg.norm(np.cross(nu, nv), axis=1)
    cos = np.einsum("ij,ij->i", nu, nv)
    bend = np.arctan2(sin, cos)  # angle between normals, [0, pi]

    # the vertex of v opposite the shared edge decides convex vs concave
    fv = mesh.faces[v]
    opp = fv[np.arange(len(fv)), np.argmax((fv != a[:, None]) & (fv != b[:, None]), axis=1)]
    height = np.einsum("ij,ij->i", nu, V[opp] - V[a])
    concave = height > 0
    dihedrals = np.where(concave, np.pi + bend, np.pi - bend)
    return DualGraph(mesh.n_faces, arr[:, :2].copy(), lengths, dihedrals)
