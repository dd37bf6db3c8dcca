"""Feature points, a normal-angle histogram descriptor, matching, and synthetic correspondences.

The descriptor is deliberately simple: for every neighbour ``j`` inside the
support ball of a centre ``c`` it bins three angles, each invariant to rigid
motion,

* between the centre normal and the neighbour normal,
* between the centre normal and the direction ``c -> j``,
* between the neighbour normal and the direction ``c -> j``,

into 11 bins each (33 values). Bins are filled by linear interpolation
between bin centres, so the histogram is a continuous function of the input
and rigid invariance holds to rounding error. Each third is normalized to
1/3, giving an L1 norm of one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

from posevote.cloud import PointCloud, bounding_box_diagonal
from posevote.geom3d import ContractError, Pose
from posevote.spatial import SpatialIndex

BINS = 11
DIM = 3 * BINS
MIN_SUPPORT = 5
DEFAULT_TOLERANCE = 0.005


class Correspondence(NamedTuple):
    object_id: int
    scene_id: int
    score: float


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Column-oriented correspondence list (object id, scene id, L1 match distance)."""

    object_ids: np.ndarray
    scene_ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.object_ids, dtype=np.int64).reshape(-1)
        s = np.asarray(self.scene_ids, dtype=np.int64).reshape(-1)
        sc = np.asarray(self.scores, dtype=float).reshape(-1)
        if not len(o) == len(s) == len(sc):
            raise ContractError("correspondence columns differ in length")
        object.__setattr__(self, "object_ids", o)
        object.__setattr__(self, "scene_ids", s)
        object.__setattr__(self, "scores", sc)

    def __len__(self) -> int:
        return len(self.object_ids)

    def __iter__(self) -> Iterator[Correspondence]:
        for o, s, sc in zip(self.object_ids, self.scene_ids, self.scores):
            yield Correspondence(int(o), int(s), float(sc))

    def __getitem__(self, i: int) -> Correspondence:
        return Correspondence(int(self.object_ids[i]), int(self.scene_ids[i]), float(self.scores[i]))

    def select(self, mask) -> Correspondences:
        return Correspondences(self.object_ids[mask], self.scene_ids[mask], self.scores[mask])

    @classmethod
    def from_list(cls, items) -> Correspondences:
        items = list(items)
        if not items:
            return cls(np.zeros(0), np.zeros(0), np.zeros(0))
        o, s, sc = zip(*items)
        return cls(np.array(o), np.array(s), np.array(sc))


def write_correspondences_csv(path, corrs: Correspondences) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["object_id", "scene_id", "score"])
        for c in corrs:
            w.writerow([c.object_id, c.scene_id, repr(c.score)])


def read_correspondences_csv(path) -> Correspondences:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return Correspondences.from_list(
        (int(r["object_id"]), int(r["scene_id"]), float(r["score"])) for r in rows
    )


def _poisson_pick(points: np.ndarray, order: np.ndarray, index: SpatialIndex, radius: float) -> np.ndarray:
    """Greedy minimum-distance subsampling: accept in ``order``, suppress everything within ``radius``."""
    alive = np.ones(len(points), dtype=bool)
    picked = []
    tree = index.tree
    for i in order:
        if not alive[i]:
            continue
        picked.append(i)
        alive[tree.query_ball_point(points[i], radius)] = False
    return np.sort(np.asarray(picked, dtype=np.intp))


def _stratified_order(points: np.ndarray, cell: float) -> np.ndarray:
    """Visit points voxel by voxel, each voxel's member closest to the voxel centre first."""
    keys = np.floor(points / cell)
    centre_dist = np.linalg.norm(points - (keys + 0.5) * cell, axis=1)
    k = keys.astype(np.int64)
    return np.lexsort((np.arange(len(points)), centre_dist, k[:, 2], k[:, 1], k[:, 0]))


def select_by_spacing(cloud: PointCloud, spacing: float) -> np.ndarray:
    """Feature ids at least ``spacing`` apart, chosen voxel-stratified and deterministically."""
    if len(cloud) == 0:
        raise ContractError("cannot select features from an empty cloud")
    if not spacing > 0:
        raise ContractError("spacing must be positive")
    index = SpatialIndex(cloud.points)
    order = _stratified_order(cloud.points, spacing)
    return _poisson_pick(cloud.points, order, index, spacing * (1 - 1e-12))


def select_feature_points(cloud: PointCloud, target: int) -> np.ndarray:
    """About ``target`` spatially uniform ids (within 10%), or all ids if the cloud is small."""
    n = len(cloud)
    if n == 0:
        raise ContractError("cannot select features from an empty cloud")
    if target < 1:
        raise ContractError("target must be >= 1")
    if target >= n:
        return np.arange(n)
    index = SpatialIndex(cloud.points)
    diag = bounding_box_diagonal(cloud)
    if diag == 0:
        return np.arange(min(target, n))
    lo, hi = diag * 1e-6, diag
    best = None
    for _ in range(60):
        mid = np.sqrt(lo * hi)
        ids = _poisson_pick(cloud.points, _stratified_order(cloud.points, mid), index, mid)
        if best is None or abs(len(ids) - target) < abs(len(best) - target):
            best = ids
        if abs(len(ids) - target) <= 0.05 * target:
            break
        if len(ids) > target:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1 + 1e-9:
            break
    return best


def _soft_hist(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Linear-interpolation histogram with ``BINS`` bins over [lo, hi]."""
    pos = (np.clip(values, lo, hi) - lo) / (hi - lo) * BINS - 0.5
    pos = np.clip(pos, 0.0, BINS - 1.0)
    left = np.floor(pos).astype(np.intp)
    left = np.minimum(left, BINS - 2)
    frac = pos - left
    return np.bincount(left, 1.0 - frac, BINS) + np.bincount(left + 1, frac, BINS)


def _angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.arccos(np.clip(np.einsum("ij,ij->i", a, b), -1.0, 1.0))


def _descriptor_from_support(c: np.ndarray, nc: np.ndarray, P: np.ndarray, N: np.ndarray) -> np.ndarray:
    d = P - c
    dist = np.linalg.norm(d, axis=1)
    keep = dist > 0
    d, N = d[keep] / dist[keep, None], N[keep]
    if len(d) < MIN_SUPPORT:
        return np.zeros(DIM)
    ncs = np.broadcast_to(nc, d.shape)
    parts = [
        _soft_hist(_angles(ncs, N), 0.0, np.pi),
        _soft_hist(_angles(ncs, d), 0.0, np.pi),
        _soft_hist(_angles(N, d), 0.0, np.pi),
    ]
    return np.concatenate([p / (3.0 * p.sum()) for p in parts])


def compute_descriptors(
    cloud: PointCloud, centers, support_radius: float, index: SpatialIndex | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Descriptors ``(m, 33)`` for the centre ids plus a validity mask (>= 5 support neighbours)."""
    if cloud.normals is None:
        raise ContractError("descriptors need normals")
    if not support_radius > 0:
        raise ContractError("support radius must be positive")
    centers = np.asarray(centers, dtype=np.intp).reshape(-1)
    index = index or SpatialIndex(cloud.points)
    nbrs = index.tree.query_ball_point(cloud.points[centers], support_radius)
    out = np.zeros((len(centers), DIM))
    for row, (ci, nb) in enumerate(zip(centers, nbrs)):
        nb = np.asarray(nb, dtype=np.intp)
        nb = nb[nb != ci]
        out[row] = _descriptor_from_support(cloud.points[ci], cloud.normals[ci], cloud.points[nb], cloud.normals[nb])
    valid = out.sum(axis=1) > 0
    return out, valid


def compute_descriptor(cloud: PointCloud, center: int, support_radius: float) -> np.ndarray | None:
    """Descriptor of one point, or ``None`` when its support is too sparse."""
    desc, valid = compute_descriptors(cloud, [center], support_radius)
    return desc[0] if valid[0] else None


def match_features(
    scene_descriptors: np.ndarray,
    object_descriptors: np.ndarray,
    scene_ids=None,
    object_ids=None,
    scene_valid=None,
    object_valid=None,
    chunk: int = 2048,
) -> Correspondences:
    """Nearest object descriptor (L1) for every valid scene descriptor.

    ``scene_ids``/``object_ids`` map descriptor rows back to cloud point ids
    (identity by default). Ties go to the lower object row.
    """
    S = np.asarray(scene_descriptors, dtype=float).reshape(-1, DIM)
    O = np.asarray(object_descriptors, dtype=float).reshape(-1, DIM)
    scene_ids = np.arange(len(S)) if scene_ids is None else np.asarray(scene_ids)
    object_ids = np.arange(len(O)) if object_ids is None else np.asarray(object_ids)
    s_ok = S.sum(axis=1) > 0 if scene_valid is None else np.asarray(scene_valid, dtype=bool)
    o_ok = O.sum(axis=1) > 0 if object_valid is None else np.asarray(object_valid, dtype=bool)
    O_rows = np.flatnonzero(o_ok)
    S_rows = np.flatnonzero(s_ok)
    if len(O_rows) == 0 or len(S_rows) == 0:
        return Correspondences(np.zeros(0), np.zeros(0), np.zeros(0))
    best = np.empty(len(S_rows), dtype=np.intp)
    score = np.empty(len(S_rows))
    for start in range(0, len(S_rows), chunk):
        D = cdist(S[S_rows[start : start + chunk]], O[O_rows], metric="cityblock")
        j = np.argmin(D, axis=1)
        best[start : start + chunk] = j
        score[start : start + chunk] = D[np.arange(len(j)), j]
    return Correspondences(object_ids[O_rows[best]], scene_ids[S_rows], score)


@dataclass(frozen=True, eq=False)
class OrientedPairs:
    """Object/scene oriented point pairs, row-aligned, with the generator's inlier labels."""

    object_points: np.ndarray
    object_normals: np.ndarray
    scene_points: np.ndarray
    scene_normals: np.ndarray
    is_inlier: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.object_points)

    @classmethod
    def from_correspondences(cls, corrs: Correspondences, obj: PointCloud, scene: PointCloud) -> OrientedPairs:
        if obj.normals is None or scene.normals is None:
            raise ContractError("both clouds need normals")
        o, s = corrs.object_ids, corrs.scene_ids
        return cls(obj.points[o], obj.normals[o], scene.points[s], scene.normals[s])


def _random_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _perturb_normals(rng: np.random.Generator, normals: np.ndarray, max_angle: float) -> np.ndarray:
    """Tilt each normal by a uniform angle in [0, max_angle] towards a random perpendicular."""
    if max_angle <= 0 or len(normals) == 0:
        return normals.copy()
    r = _random_unit(rng, len(normals))
    perp = r - np.einsum("ij,ij->i", r, normals)[:, None] * normals
    bad = np.linalg.norm(perp, axis=1) < 1e-9
    if np.any(bad):
        perp[bad] = np.cross(normals[bad], [1.0, 0.0, 0.0])
    perp /= np.linalg.norm(perp, axis=1, keepdims=True)
    ang = rng.uniform(0.0, max_angle, size=len(normals))[:, None]
    out = normals * np.cos(ang) + perp * np.sin(ang)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def synth_correspondences(
    obj: PointCloud,
    true_pose: Pose,
    n_inliers: int,
    n_outliers: int,
    noise_sigma: float = 0.0,
    seed: int | None = 0,
    max_normal_angle: float | None = None,
) -> OrientedPairs:
    """Oriented pairs with a known number of inliers under ``true_pose``.

    Inliers map an object point through the pose, add isotropic Gaussian
    position noise and tilt the normal by at most ``max_normal_angle``
    (default ``noise_sigma / (0.2 * diagonal)`` radians). Outliers pair an
    object point with a uniform point in the transformed model's bounding
    box and a random normal. Rows are shuffled.
    """
    if n_inliers < 0 or n_outliers < 0 or n_inliers + n_outliers < 1:
        raise ContractError("need non-negative counts with at least one pair")
    if obj.normals is None:
        raise ContractError("object cloud needs normals")
    rng = np.random.default_rng(seed)
    n = n_inliers + n_outliers
    ids = rng.choice(len(obj), size=n, replace=n > len(obj))
    op, on = obj.points[ids], obj.normals[ids]

    diag = bounding_box_diagonal(obj)
    if max_normal_angle is None:
        max_normal_angle = noise_sigma / (0.2 * diag) if diag > 0 else 0.0

    sp = np.empty((n, 3))
    sn = np.empty((n, 3))
    sp[:n_inliers] = true_pose.apply(op[:n_inliers])
    if noise_sigma > 0:
        sp[:n_inliers] += rng.normal(scale=noise_sigma, size=(n_inliers, 3))
    sn[:n_inliers] = _perturb_normals(rng, on[:n_inliers] @ true_pose.rotation.T, max_normal_angle)

    box = true_pose.apply(obj.points)
    lo, hi = box.min(axis=0), box.max(axis=0)
    sp[n_inliers:] = rng.uniform(lo, hi, size=(n_outliers, 3))
    sn[n_inliers:] = _random_unit(rng, n_outliers)

    labels = np.zeros(n, dtype=bool)
    labels[:n_inliers] = True
    perm = rng.permutation(n)
    return OrientedPairs(op[perm], on[perm], sp[perm], sn[perm], labels[perm])


def ground_truth_inlier_rate(pairs: OrientedPairs, true_pose: Pose, tol: float = DEFAULT_TOLERANCE) -> float:
    """Fraction of pairs whose scene point lies within ``tol`` of the mapped object point."""
    if len(pairs) == 0:
        raise ContractError("inlier rate of an empty pair set")
    if not tol > 0:
        raise ContractError("tolerance must be positive")
    err = np.linalg.norm(true_pose.apply(pairs.object_points) - pairs.scene_points, axis=1)
    return float(np.mean(err <= tol))

