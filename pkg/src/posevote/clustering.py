"""Truncated kernel density estimation over pose votes and mode extraction.

The density at vote ``T`` sums, over every vote ``S`` whose centre lies
within ``sigma_t`` of ``T``'s centre and whose rotation lies within
``sigma_r`` of ``T``'s rotation (geodesic angle),

    exp(-d_t^2 / (2 sigma_t^2)) * exp(-d_R^2 / (2 sigma_r^2)).

The vote itself always contributes 1. Kernels are unnormalized, so
densities only compare within one set of bandwidths.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numba
import numpy as np

from posevote.geom3d import ContractError, Pose
from posevote.voting import VoteSet

DEFAULT_SIGMA_T = 0.01
DEFAULT_SIGMA_R = np.deg2rad(22.5)
DEFAULT_NMS_FRACTION = 0.2
_CELL_SPLIT = 2


@dataclass(frozen=True)
class Bandwidths:
    sigma_t: float = DEFAULT_SIGMA_T
    sigma_r: float = DEFAULT_SIGMA_R

    def __post_init__(self):
        if not self.sigma_t > 0 or not 0 < self.sigma_r <= np.pi:
            raise ContractError(f"invalid bandwidths {self}")

    @classmethod
    def relative(cls, diagonal: float, t_fraction: float, sigma_r: float = DEFAULT_SIGMA_R) -> Bandwidths:
        """Translation bandwidth given as a fraction of an object diagonal."""
        return cls(t_fraction * diagonal, sigma_r)


@dataclass(frozen=True)
class Mode:
    pose: Pose
    density: float
    vote_id: int


@numba.njit(cache=True)
def _cell_density(c, R, starts, ukeys, dims, reach, sigma_t, sigma_r, dens):  # pragma: no cover - compiled
    # Symmetric pass over cell pairs: each unordered vote pair is visited once.
    t2 = sigma_t * sigma_t * (1 + 1e-9)
    tr_min = 1.0 + 2.0 * np.cos(sigma_r) - 1e-9
    inv_t = 1.0 / (2.0 * sigma_t * sigma_t)
    inv_r = 1.0 / (2.0 * sigma_r * sigma_r)
    ncell = len(ukeys)
    ny, nz = dims[1], dims[2]
    for a in range(ncell):
        key = ukeys[a]
        x = key // (ny * nz)
        y = (key // nz) % ny
        z = key % nz
        for xx in range(max(x - reach, 0), min(x + reach + 1, dims[0])):
            for yy in range(max(y - reach, 0), min(y + reach + 1, ny)):
                base = (xx * ny + yy) * nz
                lo_k = max(base + max(z - reach, 0), key)
                hi_k = base + min(z + reach, nz - 1)
                if hi_k < lo_k:
                    continue
                # a run of z-neighbours is contiguous in key order
                b0 = np.searchsorted(ukeys, lo_k)
                b1 = np.searchsorted(ukeys, hi_k, side="right")
                for b in range(b0, b1):
                    for i in range(starts[a], starts[a + 1]):
                        q0 = i + 1 if b == a else starts[b]
                        for j in range(q0, starts[b + 1]):
                            d0 = c[i, 0] - c[j, 0]
                            d1 = c[i, 1] - c[j, 1]
                            d2 = c[i, 2] - c[j, 2]
                            dd = d0 * d0 + d1 * d1 + d2 * d2
                            if dd > t2:
                                continue
                            tr = 0.0
                            for u in range(9):
                                tr += R[i, u] * R[j, u]
                            if tr < tr_min:
                                continue
                            if np.sqrt(dd) > sigma_t:
                                continue
                            dr = np.arccos(min(max((tr - 1.0) * 0.5, -1.0), 1.0))
                            if dr > sigma_r:
                                continue
                            k = np.exp(-dd * inv_t) * np.exp(-dr * dr * inv_r)
                            dens[i] += k
                            dens[j] += k


def density_estimates(votes: VoteSet, bw: Bandwidths = Bandwidths()) -> np.ndarray:
    """Truncated kernel density at every vote.

    Centres are bucketed on a grid of half the translation bandwidth, so
    only votes in nearby cells are ever compared.
    """
    n = len(votes)
    if n == 0:
        raise ContractError("density of an empty vote set")
    centers = np.asarray(votes.centers, dtype=float)
    cell = bw.sigma_t / _CELL_SPLIT
    k = np.floor((centers - centers.min(axis=0)) / cell).astype(np.int64)
    dims = k.max(axis=0) + 1
    if np.prod(dims.astype(float)) > 2.0**62:
        raise ContractError("vote centres span too many grid cells for the translation bandwidth")
    key = (k[:, 0] * dims[1] + k[:, 1]) * dims[2] + k[:, 2]
    order = np.argsort(key, kind="stable")
    ukeys, starts = np.unique(key[order], return_index=True)
    starts = np.append(starts, n).astype(np.int64)
    c = np.ascontiguousarray(centers[order])
    R = np.ascontiguousarray(np.asarray(votes.rotations, dtype=float)[order].reshape(n, 9))
    dens = np.ones(n)
    _cell_density(c, R, starts, ukeys, dims, _CELL_SPLIT, float(bw.sigma_t), float(bw.sigma_r), dens)
    out = np.empty(n)
    out[order] = dens
    return out


def modal_pose(votes: VoteSet, densities: np.ndarray) -> Mode:
    """Highest-density vote; the lowest index wins ties."""
    if len(votes) == 0:
        raise ContractError("no votes")
    i = int(np.argmax(densities))
    return Mode(votes.pose(i), float(densities[i]), i)


def _best_per_source(source: np.ndarray, densities: np.ndarray) -> np.ndarray:
    order = np.lexsort((np.arange(len(source)), -densities, source))
    first = np.ones(len(order), dtype=bool)
    first[1:] = source[order[1:]] != source[order[:-1]]
    return order[first]


def top_modes_nms(
    votes: VoteSet,
    densities: np.ndarray,
    k: int,
    nms_radius: float,
    per_correspondence: bool = True,
) -> list[Mode]:
    """Up to ``k`` modes in descending density, none closer than ``nms_radius`` in centre translation.

    Candidates are the best vote of each correspondence, or all votes when
    ``per_correspondence`` is false.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    if len(votes) == 0:
        return []
    cand = _best_per_source(votes.source, densities) if per_correspondence else np.arange(len(votes))
    cand = cand[np.lexsort((cand, -densities[cand]))]
    chosen: list[int] = []
    for i in cand:
        if chosen:
            d = np.linalg.norm(votes.centers[chosen] - votes.centers[i], axis=1)
            if np.any(d <= nms_radius):
                continue
        chosen.append(int(i))
        if len(chosen) == k:
            break
    return [Mode(votes.pose(i), float(densities[i]), i) for i in chosen]


def density_threshold_filter(modes: list[Mode], min_density: float) -> list[Mode]:
    if min_density < 0:
        raise ContractError("min_density must be non-negative")
    return [m for m in modes if m.density >= min_density]


def write_modes_csv(path, modes: list[Mode]) -> None:
    names = ["density"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz", "vote_id"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for m in modes:
            w.writerow([repr(m.density)] + [repr(x) for x in m.pose.as_row()] + [m.vote_id])


def read_modes_csv(path) -> list[Mode]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [Mode(Pose.from_row([float(x) for x in row[1:13]]), float(row[0]), int(row[13])) for row in reader]
