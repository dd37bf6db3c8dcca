"""Experiment runners behind the command line: noise sensitivity, synthetic robustness benchmark, single-scene estimation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass

import numpy as np

from posevote.cloud import (
    PointCloud,
    TriangleMesh,
    add_uniform_noise,
    as_oriented_cloud,
    estimate_normals,
    mesh_vertex_normals,
    orient_normals,
    voxel_downsample,
)
from posevote.clustering import Bandwidths, density_estimates, modal_pose
from posevote.estimators import NoPoseError, pose_error, ransac_pose
from posevote.features import (
    DEFAULT_TOLERANCE,
    OrientedPairs,
    compute_descriptors,
    ground_truth_inlier_rate,
    match_features,
    select_feature_points,
    synth_correspondences,
)
from posevote.geom3d import Pose
from posevote.synthetic import blob_mesh, random_pose
from posevote.voting import DEFAULT_NR, votes_from_pairs

log = logging.getLogger(__name__)

SENSITIVITY_COLUMNS = [
    "method", "noise_fraction", "translation_error_m", "rotation_error_deg",
    "inlier_rate", "normal_deviation_deg", "n_correspondences", "runs", "failures", "wall_time_s",
]
BENCH_COLUMNS = ["method", "inlier_rate", "trials", "successes", "success_rate", "mean_wall_time_s"]


@dataclass(frozen=True)
class SensitivityConfig:
    voxel_resolution: float = 0.0025
    feature_target: int = 3000
    descriptor_radius: float | None = None  # 20 x voxel resolution
    # heavy point noise needs wide PCA neighbourhoods for usable normals
    normal_k: int = 160
    n_r: int = DEFAULT_NR
    bandwidths: Bandwidths = Bandwidths()
    ransac_iterations: int = 10000
    ransac_repeats: int = 20
    inlier_tol: float = DEFAULT_TOLERANCE
    seed: int = 0

    @property
    def support_radius(self) -> float:
        return self.descriptor_radius if self.descriptor_radius is not None else 20 * self.voxel_resolution


def noise_levels(start: float = 0.001, stop: float = 0.030, step: float = 0.001) -> np.ndarray:
    n = int(round((stop - start) / step)) + 1
    return np.round(start + step * np.arange(n), 12)


def _renormal(points: np.ndarray, faces: np.ndarray | None, k: int) -> PointCloud:
    """PCA normals on a (noisy) point set, signed by face winding when faces exist, by BFS otherwise."""
    est = estimate_normals(PointCloud(points), k)
    if len(est) != len(points):
        raise ValueError("normal estimation dropped points; cannot compare normals pointwise")
    if faces is None:
        return orient_normals(est, k)[0]
    ref = mesh_vertex_normals(TriangleMesh(points, faces))
    if len(ref) != len(points):
        # isolated vertices carry no winding; fall back to propagation
        return orient_normals(est, k)[0]
    sign = np.where(np.einsum("ij,ij->i", est.normals, ref.normals) < 0, -1.0, 1.0)
    return PointCloud(points, est.normals * sign[:, None])


def _features(cloud: PointCloud, cfg: SensitivityConfig):
    down = voxel_downsample(cloud, cfg.voxel_resolution)
    ids = select_feature_points(down, cfg.feature_target)
    desc, valid = compute_descriptors(down, ids, cfg.support_radius)
    return down, ids, desc, valid


def cluster_estimate(pairs: OrientedPairs, center, bw: Bandwidths, n_r: int = DEFAULT_NR, seed: int = 0) -> Pose:
    votes = votes_from_pairs(pairs, center, n_r, "random", seed)
    if len(votes) == 0:
        raise NoPoseError("no non-degenerate correspondences")
    return modal_pose(votes, density_estimates(votes, bw)).pose


def run_sensitivity(
    model: PointCloud | TriangleMesh,
    levels,
    methods=("cluster", "ransac"),
    cfg: SensitivityConfig = SensitivityConfig(),
    progress=None,
) -> list[dict]:
    """Align a model to noisy copies of itself (true pose = identity), without refinement.

    Noise is added to the full-resolution vertices; normals of the noisy copy
    are re-estimated. Both copies are then downsampled, described and matched
    (noisy scene features queried against the clean model). One row per
    level and method; RANSAC rows average ``ransac_repeats`` seeded runs.
    """
    levels = np.asarray(levels, dtype=float)
    if np.any(np.diff(levels) <= 0):
        raise ValueError("noise levels must be strictly increasing")
    faces = model.faces if isinstance(model, TriangleMesh) else None
    clean = as_oriented_cloud(model, cfg.normal_k)
    if faces is not None and len(clean) != len(model.vertices):
        faces = None
        model = clean
    o_down, o_ids, o_desc, o_valid = _features(clean, cfg)
    center = o_down.centroid()
    truth = Pose.identity()

    rows = []
    for li, f in enumerate(levels):
        noisy_pts = add_uniform_noise(PointCloud(clean.points), float(f), seed=cfg.seed + li).points
        noisy = _renormal(noisy_pts, faces, cfg.normal_k)
        cosines = np.clip(np.einsum("ij,ij->i", noisy.normals, clean.normals), -1.0, 1.0)
        normal_dev = float(np.degrees(np.mean(np.arccos(cosines))))
        s_down, s_ids, s_desc, s_valid = _features(noisy, cfg)
        corrs = match_features(s_desc, o_desc, s_ids, o_ids, s_valid, o_valid)
        pairs = OrientedPairs.from_correspondences(corrs, o_down, s_down)
        rate = ground_truth_inlier_rate(pairs, truth, cfg.inlier_tol) if len(pairs) else 0.0
        base = {"noise_fraction": float(f), "inlier_rate": rate, "normal_deviation_deg": normal_dev,
                "n_correspondences": len(pairs)}

        if "cluster" in methods:
            t0 = time.perf_counter()
            try:
                est = cluster_estimate(pairs, center, cfg.bandwidths, cfg.n_r, cfg.seed + li)
                te, re = pose_error(est, truth)
                fails = 0
            except NoPoseError:
                te, re, fails = float("nan"), float("nan"), 1
            rows.append({"method": "cluster", **base, "translation_error_m": te,
                         "rotation_error_deg": float(np.degrees(re)), "runs": 1, "failures": fails,
                         "wall_time_s": time.perf_counter() - t0})
        if "ransac" in methods:
            t0 = time.perf_counter()
            errs, fails = [], 0
            for rep in range(cfg.ransac_repeats):
                try:
                    est = ransac_pose(pairs.object_points, pairs.scene_points, cfg.ransac_iterations,
                                      cfg.inlier_tol, seed=cfg.seed * 1000003 + li * 1009 + rep)
                    errs.append(pose_error(est, truth))
                except (NoPoseError, ValueError):
                    fails += 1
            te, re = np.mean(errs, axis=0) if errs else (float("nan"), float("nan"))
            rows.append({"method": "ransac", **base, "translation_error_m": float(te),
                         "rotation_error_deg": float(np.degrees(re)), "runs": cfg.ransac_repeats,
                         "failures": fails, "wall_time_s": time.perf_counter() - t0})
        if progress:
            progress(rows[-len(methods):])
    order = {m: i for i, m in enumerate(methods)}
    rows.sort(key=lambda r: (order[r["method"]], r["noise_fraction"]))
    return rows


def run_bench(
    inlier_rates,
    trials: int = 20,
    n_pairs: int = 500,
    noise_sigma: float = 0.002,
    methods=("cluster", "ransac"),
    model: PointCloud | TriangleMesh | None = None,
    bandwidths: Bandwidths = Bandwidths(),
    ransac_iterations: int = 10000,
    inlier_tol: float = DEFAULT_TOLERANCE,
    n_r: int = DEFAULT_NR,
    seed: int = 0,
) -> list[dict]:
    """Success rates on synthetic correspondence sets with a controlled inlier rate.

    A trial succeeds when the estimate is within ``(sigma_t, sigma_r)`` of
    the true pose. The default model is a 0.25 m asymmetric blob.
    """
    obj = as_oriented_cloud(model if model is not None else blob_mesh(0.25, seed=seed))
    center = obj.centroid()
    rows = []
    for rate in inlier_rates:
        n_in = int(round(rate * n_pairs))
        stats = {m: [0, 0.0] for m in methods}
        for trial in range(trials):
            tseed = seed * 1000003 + int(round(rate * 1e6)) * 101 + trial
            rng = np.random.default_rng(tseed)
            truth = random_pose(rng)
            pairs = synth_correspondences(obj, truth, n_in, n_pairs - n_in, noise_sigma, seed=tseed)
            for m in methods:
                t0 = time.perf_counter()
                try:
                    if m == "cluster":
                        est = cluster_estimate(pairs, center, bandwidths, n_r, tseed)
                    else:
                        est = ransac_pose(pairs.object_points, pairs.scene_points, ransac_iterations, inlier_tol, tseed)
                    te, re = pose_error(est, truth)
                    ok = te <= bandwidths.sigma_t and re <= bandwidths.sigma_r
                except NoPoseError:
                    ok = False
                stats[m][0] += int(ok)
                stats[m][1] += time.perf_counter() - t0
        for m in methods:
            rows.append({"method": m, "inlier_rate": float(rate), "trials": trials, "successes": stats[m][0],
                         "success_rate": stats[m][0] / trials, "mean_wall_time_s": stats[m][1] / trials})
    return rows


def write_rows_csv(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
