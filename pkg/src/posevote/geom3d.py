"""Rotation and rigid pose math.

Rotations are plain 3x3 float arrays, poses are :class:`Pose` instances
(rotation followed by translation). Batched helpers operate on stacks of
shape ``(..., 3, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-9


class ContractError(ValueError):
    """Raised when an argument violates a documented precondition."""


class DegenerateConfigurationError(ValueError):
    """Raised when a point configuration does not determine a rigid motion."""


def _check_unit(axis: np.ndarray, name: str = "axis") -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    if axis.shape != (3,):
        raise ContractError(f"{name} must be a 3-vector, got shape {axis.shape}")
    if abs(np.linalg.norm(axis) - 1.0) > UNIT_TOL:
        raise ContractError(f"{name} must be unit length, got norm {np.linalg.norm(axis)!r}")
    return axis


def rodrigues_rotate(v, axis, angle: float) -> np.ndarray:
    """Rotate ``v`` about the unit ``axis`` by ``angle`` radians."""
    k = _check_unit(axis)
    v = np.asarray(v, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    along = np.dot(k, v)
    # the last term drops out whenever v is orthogonal to the axis
    return v * c + np.cross(k, v) * s + k * along * (1.0 - c)


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    k = _check_unit(axis)
    K = skew(k)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def geodesic_distance(R1, R2) -> float:
    """Smallest rotation angle (radians, in [0, pi]) taking ``R2`` onto ``R1``."""
    R1 = np.asarray(R1, dtype=float)
    R2 = np.asarray(R2, dtype=float)
    # trace(R1^T R2) == sum of the elementwise product; symmetric in its arguments
    tr = float(np.sum(R1 * R2))
    return float(np.arccos(np.clip((tr - 1.0) * 0.5, -1.0, 1.0)))


def geodesic_distances(R1: np.ndarray, R2: np.ndarray) -> np.ndarray:
    """Vectorized :func:`geodesic_distance` over broadcastable ``(..., 3, 3)`` stacks."""
    tr = np.sum(R1 * R2, axis=(-2, -1))
    return np.arccos(np.clip((tr - 1.0) * 0.5, -1.0, 1.0))


def translation_distance(t1, t2) -> float:
    d = np.asarray(t1, dtype=float) - np.asarray(t2, dtype=float)
    return float(np.sqrt(np.dot(d, d)))


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(
        np.linalg.norm(R.T @ R - np.eye(3)) <= tol and abs(np.linalg.det(R) - 1.0) <= tol
    )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid motion ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ContractError("pose entries must be finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def as_row(self) -> list[float]:
        """The 12 entries r00..r22, tx, ty, tz used by the CSV writers."""
        return [float(x) for x in self.rotation.ravel()] + [float(x) for x in self.translation]

    @classmethod
    def from_row(cls, row) -> Pose:
        row = np.asarray(row, dtype=float)
        return cls(row[:9].reshape(3, 3), row[9:12])

    def apply(self, points) -> np.ndarray:
        """Transform a single point ``(3,)`` or an array of points ``(n, 3)``."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def compose(self, other: Pose) -> Pose:
        """``self * other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        return self.compose(other)

    def __repr__(self) -> str:
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def invert(a: Pose) -> Pose:
    return a.inverse()


def apply(a: Pose, p) -> np.ndarray:
    return a.apply(p)


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched least-squares rotation/translation for stacks ``(..., m, 3)``.

    No degeneracy checks; callers that need them use :func:`rigid_align`.
    """
    cs = src.mean(axis=-2, keepdims=True)
    cd = dst.mean(axis=-2, keepdims=True)
    H = np.swapaxes(src - cs, -1, -2) @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    R = np.swapaxes(Vt, -1, -2) @ D @ np.swapaxes(U, -1, -2)
    t = cd[..., 0, :] - (R @ cs[..., 0, :, None])[..., 0]
    return R, t


def rigid_align(src, dst, rel_tol: float = 1e-9) -> Pose:
    """Least-squares rigid motion mapping ``src[i]`` onto ``dst[i]`` (reflections excluded)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ContractError(f"expected two (n, 3) arrays of equal shape, got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise DegenerateConfigurationError(f"need at least 3 point pairs, got {len(src)}")
    centered = src - src.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= rel_tol * sv[0]:
        raise DegenerateConfigurationError("source points are coincident or collinear")
    R, t = kabsch(src, dst)
    return Pose(R, t)
