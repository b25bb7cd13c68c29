"""Parametric labeled test shapes with exact per-face ground truth.

Three families:

* ``dumbbell`` -- surface of revolution: large ball (0), bar (1), small ball (2)
* ``table`` -- voxel solid: top (0), legs (1)
* ``glasses`` -- voxel solid: rims (0), bridge (1), temples (2)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh


@dataclass
class LabeledShape:
    name: str
    mesh: TriangleMesh
    labels: np.ndarray
    n_labels: int


def revolution_mesh(z: np.ndarray, r: np.ndarray, segments: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed surface of revolution about the z axis; ``r[0]`` and ``r[-1]`` must be 0."""
    rings = len(z) - 2
    theta = 2 * np.pi * np.arange(segments) / segments
    verts = [[0.0, 0.0, z[0]]]
    for k in range(1, rings + 1):
        for t in theta:
            verts.append([r[k] * np.cos(t), r[k] * np.sin(t), z[k]])
    verts.append([0.0, 0.0, z[-1]])
    top = len(verts) - 1

    def vid(ring, s):
        return 1 + ring * segments + (s % segments)

    faces = []
    for s in range(segments):
        faces.append([0, vid(0, s + 1), vid(0, s)])
    for k in range(rings - 1):
        for s in range(segments):
            a, b = vid(k, s), vid(k, s + 1)
            c, d = vid(k + 1, s), vid(k + 1, s + 1)
            faces.append([a, b, d])
            faces.append([a, d, c])
    for s in range(segments):
        faces.append([top, vid(rings - 1, s), vid(rings - 1, s + 1)])
    return np.array(verts), np.array(faces)


def dumbbell(faces: int = 1500, seed: int = 0, jitter: bool = True) -> LabeledShape:
    rng = np.random.default_rng(seed)
    r1 = rng.uniform(0.9, 1.1) if jitter else 1.0
    r2 = rng.uniform(0.55, 0.7) if jitter else 0.62
    rb = rng.uniform(0.2, 0.3) if jitter else 0.25
    bar = rng.uniform(1.2, 1.8) if jitter else 1.5
    c1 = 0.0
    b0 = c1 + np.sqrt(r1**2 - rb**2)
    b1 = b0 + bar
    c2 = b1 + np.sqrt(r2**2 - rb**2)
    z0, z1 = c1 - r1, c2 + r2

    def profile(zz):
        s1 = np.sqrt(np.clip(r1**2 - (zz - c1) ** 2, 0, None))
        s2 = np.sqrt(np.clip(r2**2 - (zz - c2) ** 2, 0, None))
        cyl = np.where((zz >= b0) & (zz <= b1), rb, 0.0)
        return np.maximum(np.maximum(s1, s2), cyl)

    def part(zz):
        return np.where(zz < b0, 0, np.where(zz <= b1, 1, 2))

    # resample the profile uniformly in arc length
    fine = np.linspace(z0, z1, 20001)
    rf = profile(fine)
    arc = np.concatenate([[0], np.cumsum(np.hypot(np.diff(fine), np.diff(rf)))])
    segments = max(8, int(round(np.sqrt(faces * np.pi * r1 / arc[-1]))))
    rings = max(3, int(round(faces / (2 * segments))) + 1)
    s = np.linspace(0, arc[-1], rings + 1)
    z = np.interp(s, arc, fine)
    r = profile(z)
    r[0] = r[-1] = 0.0
    r[1:-1] = np.maximum(r[1:-1], 1e-3)
    V, F = revolution_mesh(z, r, segments)
    mesh = TriangleMesh(V, F)
    labels = part(mesh.centroids[:, 2]).astype(np.int64)
    return LabeledShape(f"dumbbell_{seed}", mesh, labels, 3)


_DIRS = [
    ((1, 0, 0), [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)]),
    ((-1, 0, 0), [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)]),
    ((0, 1, 0), [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)]),
    ((0, -1, 0), [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)]),
    ((0, 0, 1), [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]),
    ((0, 0, -1), [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)]),
]


def voxel_mesh(grid: np.ndarray, scale=(1.0, 1.0, 1.0)):
    """Boundary surface of a labeled voxel grid (0 = empty, k > 0 = part k-1).

    Returns vertices, outward-oriented triangles and the part label of each
    triangle. The caller must avoid voxels that touch only along an edge or
    corner, which would make the surface non-manifold.
    """
    filled = grid > 0
    vid: dict[tuple[int, int, int], int] = {}
    verts, faces, labels = [], [], []

    def vertex(p):
        if p not in vid:
            vid[p] = len(verts)
            verts.append(p)
        return vid[p]

    X, Y, Z = grid.shape
    for x, y, zz in zip(*np.nonzero(filled)):
        for (dx, dy, dz), corners in _DIRS:
            nx, ny, nz = x + dx, y + dy, zz + dz
            if 0 <= nx < X and 0 <= ny < Y and 0 <= nz < Z and filled[nx, ny, nz]:
                continue
            q = [vertex((int(x + cx), int(y + cy), int(zz + cz))) for cx, cy, cz in corners]
            faces += [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
            labels += [grid[x, y, zz] - 1] * 2
    V = np.array(verts, dtype=np.float64) * np.asarray(scale)
    return V, np.array(faces, dtype=np.int64), np.array(labels, dtype=np.int64)


def _jittered(V: np.ndarray, rng, amount: float) -> np.ndarray:
    return V + rng.uniform(-amount, amount, size=V.shape)


def table(faces: int = 1500, seed: int = 0, jitter: bool = True) -> LabeledShape:
    rng = np.random.default_rng(seed)
    # grid resolution chosen so the surface has roughly ``faces`` triangles
    res = max(4, int(round(np.sqrt(faces / 5.5))))
    w = res + (int(rng.integers(0, 3)) if jitter else 0)
    d = max(4, int(round(res * (rng.uniform(0.6, 0.8) if jitter else 0.7))))
    t = 2
    leg = max(3, int(round(res * (rng.uniform(0.5, 0.8) if jitter else 0.65))))
    lw = max(1, res // 7)
    grid = np.zeros((w, d, leg + t), dtype=np.int64)
    grid[:, :, leg:] = 1
    for x0 in (0, w - lw):
        for y0 in (0, d - lw):
            grid[x0 : x0 + lw, y0 : y0 + lw, :leg] = 2
    V, F, L = voxel_mesh(grid)
    if jitter:
        V = _jittered(V, rng, 0.05)
    return LabeledShape(f"table_{seed}", TriangleMesh(V, F), L, 2)


def glasses(faces: int = 1500, seed: int = 0, jitter: bool = True) -> LabeledShape:
    rng = np.random.default_rng(seed)
    res = max(4, int(round(faces / 85.0)))
    rim = res + (int(rng.integers(0, 2)) if jitter else 0)
    gap = max(1, res // 3 + (int(rng.integers(0, 2)) if jitter else 0))
    temple = max(3, int(round(res * (rng.uniform(1.0, 1.4) if jitter else 1.2))))
    W = 2 * rim + gap
    grid = np.zeros((W, temple + 1, rim), dtype=np.int64)
    for x0 in (0, rim + gap):
        grid[x0 : x0 + rim, 0, :] = 1
        grid[x0 + 1 : x0 + rim - 1, 0, 1 : rim - 1] = 0
    grid[rim : rim + gap, 0, rim - 2 : rim - 1] = 2
    grid[0, 1:, rim - 1] = 3
    grid[W - 1, 1:, rim - 1] = 3
    V, F, L = voxel_mesh(grid)
    if jitter:
        V = _jittered(V, rng, 0.05)
    return LabeledShape(f"glasses_{seed}", TriangleMesh(V, F), L, 3)


GENERATORS = {"dumbbell": dumbbell, "table": table, "glasses": glasses}


def make_family(category: str, count: int, faces: int = 1500, seed: int = 0) -> list[LabeledShape]:
    gen = GENERATORS[category]
    return [gen(faces=faces, seed=seed * 1000 + i) for i in range(count)]
