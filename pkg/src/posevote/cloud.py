"""Point clouds, triangle meshes and the preprocessing applied to them."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from posevote.geom3d import ContractError
from posevote.spatial import SpatialIndex

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 0.005
DEFAULT_NORMAL_K = 10


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """``(n, 3)`` points with optional parallel unit normals.

    Empty clouds are allowed so that scene segmentation can remove everything;
    operations that need data check for it themselves.
    """

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ContractError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=float).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ContractError(f"{len(nrm)} normals for {len(pts)} points")
            lengths = np.linalg.norm(nrm, axis=1)
            if len(nrm) and np.max(np.abs(lengths - 1.0)) > 1e-6:
                raise ContractError("normals must be unit length")
            object.__setattr__(self, "normals", _frozen(nrm))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, ids) -> PointCloud:
        ids = np.asarray(ids, dtype=np.intp)
        return PointCloud(self.points[ids], None if self.normals is None else self.normals[ids])

    def transformed(self, pose) -> PointCloud:
        normals = None if self.normals is None else self.normals @ pose.rotation.T
        return PointCloud(pose.apply(self.points), normals)

    def centroid(self) -> np.ndarray:
        if len(self.points) == 0:
            raise ContractError("centroid of an empty cloud")
        return self.points.mean(axis=0)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise IndexError(f"face index out of range for {len(v)} vertices")
        if len(f) and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ContractError("degenerate face with repeated vertex index")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))


def _normalize_rows(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(v, axis=1)
    ok = n > 0
    out = np.zeros_like(v)
    out[ok] = v[ok] / n[ok, None]
    return out, ok


def mesh_vertex_normals(mesh: TriangleMesh) -> PointCloud:
    """Per-vertex normals from area-weighted face normals; isolated vertices are dropped."""
    v, f = mesh.vertices, mesh.faces
    acc = np.zeros_like(v)
    if len(f):
        # the unnormalized cross product already carries twice the face area
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        for j in range(3):
            np.add.at(acc, f[:, j], fn)
    normals, ok = _normalize_rows(acc)
    dropped = int(np.count_nonzero(~ok))
    if dropped:
        log.warning("mesh_vertex_normals: dropped %d vertices with no usable incident face", dropped)
    return PointCloud(v[ok], normals[ok])


def estimate_normals(cloud: PointCloud, k: int = DEFAULT_NORMAL_K) -> PointCloud:
    """Least-variance direction of each point's k-neighbourhood (sign unresolved)."""
    n = len(cloud)
    if k < 2 or n < k + 1:
        raise ContractError(f"estimate_normals needs k >= 2 and at least k+1 points (k={k}, n={n})")
    index = SpatialIndex(cloud.points)
    _, nbr = index.knn_many(cloud.points, k + 1)
    P = cloud.points[nbr]
    P = P - P.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", P, P) / (k + 1)
    w, V = np.linalg.eigh(cov)
    normals = V[:, :, 0]
    scale = np.maximum(w[:, 2], 0.0)
    extent = np.max(np.abs(cloud.points), axis=None) + 1.0
    ok = scale > (1e-12 * extent) ** 2
    dropped = int(np.count_nonzero(~ok))
    if dropped:
        log.warning("estimate_normals: dropped %d points with degenerate neighbourhoods", dropped)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(cloud.points[ok], normals[ok])


def orient_normals(cloud: PointCloud, k: int = DEFAULT_NORMAL_K) -> tuple[PointCloud, int]:
    """Propagate a consistent normal sign by BFS over the symmetric k-NN graph.

    Each connected component is seeded at its highest point (max z) with the
    normal forced into the +z hemisphere. Returns the oriented cloud and the
    number of components.
    """
    if cloud.normals is None:
        raise ContractError("orient_normals needs normals")
    n = len(cloud)
    if n == 0:
        return cloud, 0
    normals = cloud.normals.copy()
    kk = min(k + 1, n)
    _, nbr = SpatialIndex(cloud.points).knn_many(cloud.points, kk)
    adj: list[set[int]] = [set() for _ in range(n)]
    for i, row in enumerate(nbr):
        for j in row:
            j = int(j)
            if j != i:
                adj[i].add(j)
                adj[j].add(i)

    visited = np.zeros(n, dtype=bool)
    # seeds in descending height, ties by id
    order = np.lexsort((np.arange(n), -cloud.points[:, 2]))
    components = 0
    for seed in order:
        if visited[seed]:
            continue
        components += 1
        if normals[seed, 2] < 0:
            normals[seed] = -normals[seed]
        visited[seed] = True
        queue = deque([int(seed)])
        while queue:
            i = queue.popleft()
            for j in sorted(adj[i]):
                if visited[j]:
                    continue
                if np.dot(normals[i], normals[j]) < 0:
                    normals[j] = -normals[j]
                visited[j] = True
                queue.append(j)
    if components > 1:
        log.info("orient_normals: %d disconnected components oriented independently", components)
    return PointCloud(cloud.points, normals), components


def _voxel_keys(points: np.ndarray, resolution: float) -> np.ndarray:
    return np.floor(points / resolution).astype(np.int64)


def voxel_downsample(cloud: PointCloud, resolution: float = DEFAULT_RESOLUTION) -> PointCloud:
    """One point per occupied voxel at the centroid of its members; output sorted by voxel key."""
    if not resolution > 0:
        raise ContractError("resolution must be positive")
    if len(cloud) == 0:
        return cloud
    keys = _voxel_keys(cloud.points, resolution)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)
    sums = np.zeros((m, 3))
    np.add.at(sums, inverse, cloud.points)
    points = sums / counts[:, None]
    normals = None
    if cloud.normals is not None:
        acc = np.zeros((m, 3))
        np.add.at(acc, inverse, cloud.normals)
        normals, ok = _normalize_rows(acc)
        if not np.all(ok):
            # opposing normals cancelled out; keep any member's normal instead
            first = np.full(m, -1)
            first[inverse[::-1]] = np.arange(len(inverse))[::-1]
            normals[~ok] = cloud.normals[first[~ok]]
    return PointCloud(points, normals)


def bounding_box_diagonal(cloud: PointCloud | np.ndarray) -> float:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(pts) == 0:
        raise ContractError("bounding box of an empty cloud")
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def sample_unit_ball(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` points uniform in the unit ball by rejection from the cube."""
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        need = n - filled
        cand = rng.uniform(-1.0, 1.0, size=(int(need * 2.2) + 8, 3))
        cand = cand[np.einsum("ij,ij->i", cand, cand) <= 1.0][:need]
        out[filled : filled + len(cand)] = cand
        filled += len(cand)
    return out


def add_uniform_noise(cloud: PointCloud, fraction: float, seed: int | None = 0) -> PointCloud:
    """Displace every point uniformly within a ball of radius ``fraction * diagonal``.

    Normals are carried over unchanged; re-estimate them if needed.
    """
    if fraction < 0:
        raise ContractError("noise fraction must be non-negative")
    if fraction == 0 or len(cloud) == 0:
        return PointCloud(cloud.points.copy(), None if cloud.normals is None else cloud.normals.copy())
    bound = fraction * bounding_box_diagonal(cloud)
    rng = np.random.default_rng(seed)
    disp = sample_unit_ball(rng, len(cloud)) * bound
    return PointCloud(cloud.points + disp, cloud.normals)


def add_uniform_noise_mesh(mesh: TriangleMesh, fraction: float, seed: int | None = 0) -> TriangleMesh:
    """Same displacement model as :func:`add_uniform_noise`, applied to mesh vertices."""
    noisy = add_uniform_noise(PointCloud(mesh.vertices), fraction, seed)
    return TriangleMesh(noisy.points, mesh.faces)


def as_oriented_cloud(model: PointCloud | TriangleMesh, k: int = DEFAULT_NORMAL_K) -> PointCloud:
    """Cloud with consistent normals: face winding for meshes, estimation + BFS otherwise."""
    if isinstance(model, TriangleMesh):
        return mesh_vertex_normals(model)
    if model.normals is not None:
        return model
    oriented, _ = orient_normals(estimate_normals(model, k), k)
    return oriented
