"""Rotational subgroup voting.

One oriented-point correspondence ``(p, n) <-> (p', n')`` fixes the object
pose up to a rotation about the scene normal. Relative to a fixed object
centre ``c`` the object side is summarised by

* the signed projection ``delta = (p - c) . n``,
* the radial vector ``r = c - (p - delta n)`` (orthogonal to ``n``),
* the frame ``R_r = [r/|r|, n x r/|r|, n]``.

On the scene side the foot point is ``q = p' - delta n'`` and the object
centre must lie on the circle of radius ``|r|`` about ``q`` in the plane
orthogonal to ``n'``. The circle is sampled at ``n_r`` angles; sample ``i``
gives the centre ``t_i = q + r'_i`` and the frame ``R_r'_i`` built the same
way as ``R_r``. The vote rotation is ``R_i = R_r'_i R_r^T``, which maps the
object frame onto the scene frame (so ``R_i n = n'`` and ``R_i r = r'_i``),
and the vote translation is ``t_i - R_i c`` so that the vote maps the object
centre onto ``t_i``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from posevote.cloud import PointCloud, bounding_box_diagonal
from posevote.features import Correspondences, OrientedPairs
from posevote.geom3d import ContractError, Pose

DEFAULT_NR = 60
DEGENERATE_FRACTION = 1e-4


@dataclass(frozen=True)
class VotePrecomp:
    delta: float
    radial: np.ndarray
    radial_norm: float
    object_frame: np.ndarray


def orthogonal_unit(n: np.ndarray) -> np.ndarray:
    """Unit vector orthogonal to each row of ``n``: ``n`` crossed with the axis of its smallest component."""
    n = np.atleast_2d(n)
    axis = np.argmin(np.abs(n), axis=1)
    e = np.zeros_like(n)
    e[np.arange(len(n)), axis] = 1.0
    u = np.cross(n, e)
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _frames(radial_dirs: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Stack of ``[r, n x r, n]`` column frames for unit ``r`` orthogonal to unit ``n``."""
    return np.stack([radial_dirs, np.cross(normals, radial_dirs), normals], axis=-1)


def _precompute(center: np.ndarray, p: np.ndarray, n: np.ndarray):
    delta = np.einsum("ij,ij->i", p - center, n)
    radial = center - (p - delta[:, None] * n)
    # remove the rounding residue along n so that radial is orthogonal to n to machine precision
    radial -= np.einsum("ij,ij->i", radial, n)[:, None] * n
    norm = np.linalg.norm(radial, axis=1)
    return delta, radial, norm


def precompute_object_frame(center, p, n, eps: float = 0.0) -> VotePrecomp | None:
    """Object-side quantities for one oriented point, or ``None`` when ``|r| < eps``.

    A radial of exactly zero length is always degenerate.
    """
    n = np.asarray(n, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ContractError("object normal must be unit length")
    delta, radial, norm = _precompute(np.asarray(center, dtype=float), np.asarray(p, dtype=float)[None], n[None])
    if norm[0] == 0.0 or norm[0] < eps:
        return None
    frame = _frames(radial / norm[:, None], n[None])[0]
    return VotePrecomp(float(delta[0]), radial[0], float(norm[0]), frame)


def _cast(delta, radial_norm, object_frames, center, sp, sn, n_r: int, phases):
    """Vectorized vote casting for ``m`` correspondences; returns rotations, translations, centres."""
    m = len(delta)
    theta = 2.0 * np.pi / n_r
    q = sp - delta[:, None] * sn
    u = orthogonal_unit(sn)
    v = np.cross(sn, u)
    r0 = radial_norm[:, None] * (np.cos(phases)[:, None] * u + np.sin(phases)[:, None] * v)
    # Rodrigues about n' with r' orthogonal to n': r' cos(a) + (n' x r') sin(a)
    w = np.cross(sn, r0)
    ang = theta * np.arange(n_r)
    radials = r0[:, None, :] * np.cos(ang)[None, :, None] + w[:, None, :] * np.sin(ang)[None, :, None]
    centers = q[:, None, :] + radials
    dirs = radials / radial_norm[:, None, None]
    normals = np.broadcast_to(sn[:, None, :], dirs.shape)
    scene_frames = _frames(dirs, normals)
    rotations = scene_frames @ np.swapaxes(object_frames, -1, -2)[:, None]
    translations = centers - rotations @ center
    return rotations.reshape(m * n_r, 3, 3), translations.reshape(m * n_r, 3), centers.reshape(m * n_r, 3)


def cast_votes(pre: VotePrecomp, center, scene_point, scene_normal, n_r: int = DEFAULT_NR, phase: float = 0.0) -> list[Pose]:
    """The ``n_r`` pose votes of one correspondence.

    ``phase`` sets the angle of the first scene radial relative to the fixed
    basis ``(u, n' x u)`` with ``u`` from :func:`orthogonal_unit`.
    """
    sn = np.asarray(scene_normal, dtype=float)
    if abs(np.linalg.norm(sn) - 1.0) > 1e-9:
        raise ContractError("scene normal must be unit length")
    if n_r < 1:
        raise ContractError("n_r must be >= 1")
    R, t, _ = _cast(
        np.array([pre.delta]), np.array([pre.radial_norm]), pre.object_frame[None],
        np.asarray(center, dtype=float), np.asarray(scene_point, dtype=float)[None], sn[None],
        n_r, np.array([phase], dtype=float),
    )
    return [Pose(Ri, ti) for Ri, ti in zip(R, t)]


@dataclass(frozen=True, eq=False)
class VoteSet:
    """Flat vote arrays; ``centers`` are the voted object-centre locations used for clustering."""

    rotations: np.ndarray
    translations: np.ndarray
    centers: np.ndarray
    source: np.ndarray
    n_r: int
    n_degenerate: int = 0

    def __len__(self) -> int:
        return len(self.rotations)

    def pose(self, i: int) -> Pose:
        return Pose(self.rotations[i], self.translations[i])

    def transformed(self, g: Pose) -> VoteSet:
        """Votes for the scene moved by ``g`` (every vote ``T`` becomes ``g T``)."""
        return VoteSet(
            g.rotation @ self.rotations,
            self.translations @ g.rotation.T + g.translation,
            self.centers @ g.rotation.T + g.translation,
            self.source, self.n_r, self.n_degenerate,
        )


def degenerate_threshold(obj: PointCloud | np.ndarray) -> float:
    return DEGENERATE_FRACTION * bounding_box_diagonal(obj)


def phases_for(m: int, policy="random", seed: int | None = 0) -> np.ndarray:
    """Initial radial angle per correspondence.

    ``policy`` is "random" (seeded uniform), "fixed" (zero), a scalar angle,
    or an explicit array of ``m`` angles.
    """
    if isinstance(policy, str):
        if policy == "random":
            return np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi, size=m)
        if policy == "fixed":
            return np.zeros(m)
        raise ValueError(f"unknown phase policy {policy!r}")
    arr = np.asarray(policy, dtype=float)
    if arr.ndim == 0:
        return np.full(m, float(arr))
    if arr.shape != (m,):
        raise ContractError(f"expected {m} phases, got shape {arr.shape}")
    return arr


def votes_from_pairs(
    pairs: OrientedPairs,
    center,
    n_r: int = DEFAULT_NR,
    phase="random",
    seed: int | None = 0,
    eps: float | None = None,
    source_ids=None,
) -> VoteSet:
    """Votes for every non-degenerate pair; ``eps`` defaults to 1e-4 of the object points' diagonal."""
    if n_r < 1:
        raise ContractError("n_r must be >= 1")
    center = np.asarray(center, dtype=float)
    m = len(pairs)
    source_ids = np.arange(m) if source_ids is None else np.asarray(source_ids)
    if m == 0:
        return VoteSet(np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), n_r, 0)
    if eps is None:
        eps = degenerate_threshold(pairs.object_points)
    phases = phases_for(m, phase, seed)
    delta, radial, norm = _precompute(center, pairs.object_points, pairs.object_normals)
    ok = (norm > 0) & (norm >= eps)
    dirs = radial[ok] / norm[ok, None]
    frames = _frames(dirs, pairs.object_normals[ok])
    R, t, c = _cast(delta[ok], norm[ok], frames, center, pairs.scene_points[ok], pairs.scene_normals[ok], n_r, phases[ok])
    source = np.repeat(source_ids[ok], n_r)
    return VoteSet(R, t, c, source, n_r, int(np.count_nonzero(~ok)))


def generate_vote_set(
    corrs: Correspondences,
    obj: PointCloud,
    center,
    scene: PointCloud,
    n_r: int = DEFAULT_NR,
    phase="random",
    seed: int | None = 0,
    eps: float | None = None,
) -> VoteSet:
    """Votes for correspondences between two oriented clouds; ``source`` holds correspondence rows."""
    pairs = OrientedPairs.from_correspondences(corrs, obj, scene)
    if eps is None:
        eps = degenerate_threshold(obj)
    return votes_from_pairs(pairs, center, n_r, phase, seed, eps)


def write_votes_csv(path, votes: VoteSet) -> None:
    names = [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz", "source"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for R, t, s in zip(votes.rotations, votes.translations, votes.source):
            w.writerow([repr(float(x)) for x in R.ravel()] + [repr(float(x)) for x in t] + [int(s)])
