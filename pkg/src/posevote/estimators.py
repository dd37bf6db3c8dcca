"""End-to-end estimators: recognition pipeline, RANSAC baseline, ICP, scene segmentation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from posevote.cloud import (
    DEFAULT_NORMAL_K,
    DEFAULT_RESOLUTION,
    PointCloud,
    TriangleMesh,
    as_oriented_cloud,
    bounding_box_diagonal,
    voxel_downsample,
)
from posevote.clustering import (
    DEFAULT_NMS_FRACTION,
    Bandwidths,
    Mode,
    density_estimates,
    density_threshold_filter,
    modal_pose,
    top_modes_nms,
)
from posevote.features import (
    DEFAULT_TOLERANCE,
    Correspondences,
    OrientedPairs,
    compute_descriptors,
    match_features,
    select_feature_points,
)
from posevote.geom3d import ContractError, DegenerateConfigurationError, Pose, geodesic_distance, kabsch, rigid_align
from posevote.spatial import SpatialIndex
from posevote.voting import DEFAULT_NR, generate_vote_set

log = logging.getLogger(__name__)


class NoPoseError(RuntimeError):
    """RANSAC found no non-degenerate minimal sample."""


def pose_error(estimate: Pose, truth: Pose) -> tuple[float, float]:
    """(translation error, rotation error in radians) of ``truth^-1 * estimate``.

    The translation part equals ``||t_est - t_truth||`` and the rotation part
    the geodesic angle between the two rotations.
    """
    delta = truth.inverse().compose(estimate)
    return float(np.linalg.norm(delta.translation)), geodesic_distance(delta.rotation, np.eye(3))


# RANSAC -------------------------------------------------------------------


def _consensus(R: np.ndarray, t: np.ndarray, src: np.ndarray, dst: np.ndarray, tol: float) -> np.ndarray:
    """Inlier counts for a stack of candidate poses ``R (k,3,3)``, ``t (k,3)``."""
    moved = np.einsum("kab,nb->kna", R, src) + t[:, None, :]
    err2 = np.sum((moved - dst[None]) ** 2, axis=-1)
    return np.count_nonzero(err2 <= tol * tol, axis=1)


def ransac_pose(
    src,
    dst,
    iterations: int = 10000,
    inlier_tol: float = DEFAULT_TOLERANCE,
    seed: int | None = 0,
    chunk: int = 512,
) -> Pose:
    """Best-consensus rigid pose from 3-point samples, refit on its consensus set.

    ``src``/``dst`` are row-aligned point arrays (or an :class:`OrientedPairs`
    passed as ``src`` with ``dst=None``). The refit is kept only if it does
    not lose consensus.
    """
    if isinstance(src, OrientedPairs):
        src, dst = src.object_points, src.scene_points
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    m = len(src)
    if m < 3 or dst.shape != src.shape:
        raise ContractError("ransac_pose needs at least 3 row-aligned pairs")
    if iterations < 1:
        raise ContractError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    scale = max(bounding_box_diagonal(src), 1e-300)

    best_count, best = -1, None
    for start in range(0, iterations, chunk):
        k = min(chunk, iterations - start)
        # three distinct indices per sample
        a = rng.integers(0, m, size=k)
        b = (a + 1 + rng.integers(0, m - 1, size=k)) % m
        c = rng.integers(0, m - 2, size=k)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        c = c + (c >= lo)
        c = c + (c >= hi)
        idx = np.stack([a, b, c], axis=1)
        S, D = src[idx], dst[idx]
        area = np.linalg.norm(np.cross(S[:, 1] - S[:, 0], S[:, 2] - S[:, 0]), axis=1)
        ok = area > 1e-9 * scale * scale
        if not np.any(ok):
            continue
        R, t = kabsch(S[ok], D[ok])
        counts = _consensus(R, t, src, dst, inlier_tol)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count, best = int(counts[j]), Pose(R[j], t[j])
    if best is None:
        raise NoPoseError("every RANSAC sample was degenerate")

    inl = np.sum((best.apply(src) - dst) ** 2, axis=1) <= inlier_tol**2
    if np.count_nonzero(inl) >= 3:
        try:
            refit = rigid_align(src[inl], dst[inl])
        except DegenerateConfigurationError:
            return best
        refit_count = int(_consensus(refit.rotation[None], refit.translation[None], src, dst, inlier_tol)[0])
        if refit_count >= best_count:
            return refit
    return best


# ICP ----------------------------------------------------------------------


@dataclass(frozen=True)
class IcpResult:
    pose: Pose
    refined: bool
    iterations: int
    mean_error: float
    inlier_fraction: float
    errors: tuple[float, ...] = ()


def _pairing(moved: np.ndarray, index: SpatialIndex, radius: float):
    d, j = index.nearest(moved, max_distance=radius)
    ok = np.isfinite(d)
    return ok, j, d


def icp_refine(
    obj: PointCloud,
    scene: PointCloud,
    init: Pose,
    max_iters: int = 50,
    converge_tol: float = 1e-5,
    capture_radius: float = 2 * DEFAULT_RESOLUTION,
    scene_index: SpatialIndex | None = None,
) -> IcpResult:
    """Point-to-point ICP with a fixed capture radius.

    A step is accepted only when it does not increase the mean pairing
    error; the loop stops on the first rejected step, when the pose moves
    less than ``converge_tol``, or after ``max_iters``. ``refined`` is false
    only when no alignment could be fitted (too few pairs within the
    capture radius, or a degenerate pairing).
    """
    if len(obj) == 0 or len(scene) == 0:
        raise ContractError("icp_refine needs non-empty clouds")
    src = obj.points
    index = scene_index or SpatialIndex(scene.points)
    centroid = src.mean(axis=0)
    radius_obj = float(np.max(np.linalg.norm(src - centroid, axis=1)))

    ok, j, d = _pairing(init.apply(src), index, capture_radius)
    if np.count_nonzero(ok) < 3:
        return IcpResult(init, False, 0, float("nan"), float(np.mean(ok)))
    pose, err = init, float(np.mean(d[ok]))
    errors = [err]
    iters = 0
    refined = False
    for _ in range(max_iters):
        try:
            cand = rigid_align(src[ok], index.points[j[ok]])
        except DegenerateConfigurationError:
            break
        iters += 1
        # the pose has been checked against a fitted alignment even if the step is rejected
        refined = True
        c_ok, c_j, c_d = _pairing(cand.apply(src), index, capture_radius)
        if np.count_nonzero(c_ok) < 3:
            break
        c_err = float(np.mean(c_d[c_ok]))
        if c_err > err:
            break
        step = pose_error(cand, pose)
        move = np.linalg.norm(cand.apply(centroid) - pose.apply(centroid)) + step[1] * radius_obj
        pose, err, ok, j, d = cand, c_err, c_ok, c_j, c_d
        errors.append(err)
        if move < converge_tol:
            break
    return IcpResult(pose, refined, iters, err, float(np.mean(ok)), tuple(errors))


# segmentation -------------------------------------------------------------


def segment_scene(scene: PointCloud, obj: PointCloud, pose: Pose, removal_radius: float) -> PointCloud:
    """Scene without the points within ``removal_radius`` of the posed object."""
    return scene.subset(np.flatnonzero(~_covered(scene, obj, pose, removal_radius)))


def _covered(scene: PointCloud, obj: PointCloud, pose: Pose, removal_radius: float) -> np.ndarray:
    if not removal_radius > 0:
        raise ContractError("removal radius must be positive")
    if len(scene) == 0 or len(obj) == 0:
        return np.zeros(len(scene), dtype=bool)
    index = SpatialIndex(pose.apply(obj.points))
    d, _ = index.nearest(scene.points, max_distance=removal_radius * (1 + 1e-9) + 1e-12)
    return d <= removal_radius


# pipeline -----------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    voxel_resolution: float = DEFAULT_RESOLUTION
    feature_target: int = 10000
    descriptor_radius: float | None = None  # default 15 x voxel resolution
    n_r: int = DEFAULT_NR
    bandwidths: Bandwidths = field(default_factory=Bandwidths)
    nms_fraction: float = DEFAULT_NMS_FRACTION
    density_threshold: float = 0.0
    icp_iterations: int = 50
    icp_converge_tol: float = 1e-5
    multi_instance: int | None = None  # k for multi-instance output, None for a single mode
    refine: bool = True
    normal_k: int = DEFAULT_NORMAL_K
    seed: int = 0

    def __post_init__(self):
        if not self.voxel_resolution > 0 or self.feature_target < 1 or self.n_r < 1:
            raise ContractError("voxel resolution, feature target and n_r must be positive")
        if self.descriptor_radius is not None and not self.descriptor_radius > 0:
            raise ContractError("descriptor radius must be positive")
        if not self.nms_fraction > 0 or self.density_threshold < 0 or self.icp_iterations < 0:
            raise ContractError("invalid nms fraction, density threshold or icp iteration count")
        if self.multi_instance is not None and self.multi_instance < 1:
            raise ContractError("multi-instance k must be >= 1")

    @property
    def support_radius(self) -> float:
        return self.descriptor_radius if self.descriptor_radius is not None else 15 * self.voxel_resolution

    @property
    def capture_radius(self) -> float:
        return 2 * self.voxel_resolution

    @property
    def removal_radius(self) -> float:
        return 2 * self.voxel_resolution

    def with_(self, **kw) -> PipelineConfig:
        return replace(self, **kw)


@dataclass(frozen=True)
class Detection:
    object_id: int
    pose: Pose
    density: float
    refined: bool = False
    inlier_fraction: float = float("nan")
    name: str = ""


@dataclass
class PreparedModel:
    """A downsampled, oriented model with its feature points and descriptors."""

    cloud: PointCloud
    feature_ids: np.ndarray
    descriptors: np.ndarray
    valid: np.ndarray
    center: np.ndarray
    diagonal: float


def prepare_model(model: PointCloud | TriangleMesh, config: PipelineConfig) -> PreparedModel:
    oriented = as_oriented_cloud(model, config.normal_k)
    cloud = voxel_downsample(oriented, config.voxel_resolution)
    ids = select_feature_points(cloud, config.feature_target)
    desc, valid = compute_descriptors(cloud, ids, config.support_radius)
    return PreparedModel(cloud, ids, desc, valid, cloud.centroid(), bounding_box_diagonal(cloud))


def _match_all(scene: PreparedModel, objects: list[PreparedModel]) -> list[Correspondences]:
    """Match scene features against the joint index of all object features."""
    descs = np.vstack([o.descriptors for o in objects])
    valid = np.concatenate([o.valid for o in objects])
    owner = np.concatenate([np.full(len(o.feature_ids), k) for k, o in enumerate(objects)])
    rows = np.arange(len(descs))
    joint = match_features(scene.descriptors, descs, scene.feature_ids, rows, scene.valid, valid)
    out = []
    offsets = np.cumsum([0] + [len(o.feature_ids) for o in objects])
    for k, o in enumerate(objects):
        mine = owner[joint.object_ids] == k
        local = joint.object_ids[mine] - offsets[k]
        out.append(Correspondences(o.feature_ids[local], joint.scene_ids[mine], joint.scores[mine]))
    return out


def cluster_pose(
    corrs: Correspondences,
    obj: PreparedModel,
    scene: PointCloud,
    config: PipelineConfig,
) -> list[Mode]:
    """Votes, densities and the modal pose(s) for one object's correspondences."""
    if len(corrs) == 0:
        return []
    votes = generate_vote_set(corrs, obj.cloud, obj.center, scene, config.n_r, "random", config.seed)
    if len(votes) == 0:
        return []
    dens = density_estimates(votes, config.bandwidths)
    if config.multi_instance:
        modes = top_modes_nms(votes, dens, config.multi_instance, config.nms_fraction * obj.diagonal)
    else:
        modes = [modal_pose(votes, dens)]
    return density_threshold_filter(modes, config.density_threshold)


def recognize(
    objects: list[PointCloud | TriangleMesh],
    scene: PointCloud | TriangleMesh,
    config: PipelineConfig = PipelineConfig(),
    names: list[str] | None = None,
) -> list[Detection]:
    """Detect every object in the scene, most-matched object first, segmenting out each detection."""
    if not objects:
        raise ContractError("recognize needs at least one object")
    names = names or [str(i) for i in range(len(objects))]
    prepared = [prepare_model(o, config) for o in objects]
    scene_p = prepare_model(scene, config)
    all_corrs = _match_all(scene_p, prepared)
    counts = [len(c) for c in all_corrs]
    order = sorted(range(len(objects)), key=lambda k: (-counts[k], k))

    scene_cloud = scene_p.cloud
    alive = np.ones(len(scene_cloud), dtype=bool)
    detections: list[Detection] = []
    for k in order:
        obj = prepared[k]
        corrs = all_corrs[k]
        corrs = corrs.select(alive[corrs.scene_ids])
        if len(corrs) == 0:
            log.info("object %s: no correspondences, skipped", names[k])
            continue
        modes = cluster_pose(corrs, obj, scene_cloud, config)
        remaining = scene_cloud.subset(np.flatnonzero(alive))
        index = SpatialIndex(remaining.points) if len(remaining) else None
        for mode in modes:
            pose, refined, frac = mode.pose, False, float("nan")
            if config.refine and index is not None and config.icp_iterations > 0:
                res = icp_refine(
                    obj.cloud, remaining, mode.pose, config.icp_iterations,
                    config.icp_converge_tol, config.capture_radius, index,
                )
                pose, refined, frac = res.pose, res.refined, res.inlier_fraction
            detections.append(Detection(k, pose, mode.density, refined, frac, names[k]))
            alive &= ~_covered(scene_cloud, obj.cloud, pose, config.removal_radius)
    return detections


DETECTION_COLUMNS = (
    ["object_id", "name", "density"]
    + [f"r{i}{j}" for i in range(3) for j in range(3)]
    + ["tx_m", "ty_m", "tz_m", "refined", "inlier_fraction"]
)


def write_detections_csv(path, detections: list[Detection], truths: dict[int, Pose] | None = None) -> None:
    cols = list(DETECTION_COLUMNS)
    if truths:
        cols += ["translation_error_m", "rotation_error_deg"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for d in detections:
            row = [d.object_id, d.name, repr(d.density)] + [repr(x) for x in d.pose.as_row()]
            row += [int(d.refined), repr(d.inlier_fraction)]
            if truths:
                if d.object_id in truths:
                    te, re = pose_error(d.pose, truths[d.object_id])
                    row += [repr(te), repr(float(np.rad2deg(re)))]
                else:
                    row += ["", ""]
            w.writerow(row)


def format_report(detections: list[Detection], truths: dict[int, Pose] | None = None) -> str:
    if not detections:
        return "no detections\n"
    lines = []
    for d in detections:
        lines.append(f"object {d.name or d.object_id}: density {d.density:.3f}, refined={d.refined}, "
                     f"inlier fraction {d.inlier_fraction:.3f}")
        for row in d.pose.matrix()[:3]:
            lines.append("  " + " ".join(f"{x: .6f}" for x in row))
        if truths and d.object_id in truths:
            te, re = pose_error(d.pose, truths[d.object_id])
            lines.append(f"  error: {te:.6f} m, {np.rad2deg(re):.3f} deg")
    return "\n".join(lines) + "\n"
