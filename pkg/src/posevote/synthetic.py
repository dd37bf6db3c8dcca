"""Procedural test geometry: icospheres, asymmetric blobs, and composed scenes."""

from __future__ import annotations

import numpy as np

from posevote.cloud import PointCloud, TriangleMesh, bounding_box_diagonal
from posevote.geom3d import Pose, rotation_from_axis_angle


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Outward-wound icosphere."""
    t = (1.0 + 5**0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
         (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def subdivide(mesh: TriangleMesh, times: int = 1) -> TriangleMesh:
    """Midpoint subdivision (shape preserving, 4x faces per pass)."""
    v, f = mesh.vertices, mesh.faces
    for _ in range(times):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mids = (v[uniq[:, 0]] + v[uniq[:, 1]]) / 2.0
        base = len(v)
        m = len(f)
        ab, bc, ca = inv[:m] + base, inv[m : 2 * m] + base, inv[2 * m :] + base
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
        v = np.vstack([v, mids])
    return TriangleMesh(v, f)


def blob_mesh(diagonal: float = 0.25, subdivisions: int = 4, bumps: int = 6, seed: int = 0) -> TriangleMesh:
    """Star-shaped asymmetric blob: an icosphere pushed out by random Gaussian bumps.

    Scaled so that its bounding-box diagonal equals ``diagonal``.
    """
    rng = np.random.default_rng(seed)
    sphere = icosphere(subdivisions)
    dirs = sphere.vertices
    centres = rng.normal(size=(bumps, 3))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    heights = rng.uniform(0.15, 0.45, size=bumps)
    widths = rng.uniform(0.25, 0.6, size=bumps)
    ang = np.arccos(np.clip(dirs @ centres.T, -1, 1))
    r = 1.0 + (heights * np.exp(-0.5 * (ang / widths) ** 2)).sum(axis=1)
    # anisotropic stretch removes the remaining near-symmetries
    v = dirs * r[:, None] * np.array([1.0, 0.8, 0.65])
    v = v * (diagonal / bounding_box_diagonal(v))
    return TriangleMesh(v, sphere.faces)


def random_pose(rng: np.random.Generator, max_translation: float = 0.5) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose(rotation_from_axis_angle(axis, rng.uniform(0.0, np.pi)), rng.uniform(-max_translation, max_translation, 3))


def compose_scene(
    parts: list[tuple[PointCloud, Pose]],
    clutter: int = 0,
    clutter_box: tuple[np.ndarray, np.ndarray] | None = None,
    seed: int = 0,
) -> PointCloud:
    """Union of posed object clouds plus uniform clutter points with random normals."""
    pts, nrm = [], []
    for cloud, pose in parts:
        moved = cloud.transformed(pose)
        pts.append(moved.points)
        nrm.append(moved.normals)
    if clutter:
        rng = np.random.default_rng(seed)
        allp = np.vstack(pts)
        lo, hi = clutter_box if clutter_box is not None else (allp.min(axis=0), allp.max(axis=0))
        pts.append(rng.uniform(lo, hi, size=(clutter, 3)))
        n = rng.normal(size=(clutter, 3))
        nrm.append(n / np.linalg.norm(n, axis=1, keepdims=True))
    return PointCloud(np.vstack(pts), np.vstack(nrm))
