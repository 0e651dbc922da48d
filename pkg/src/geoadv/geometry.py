"""Point-cloud container and non-differentiable geometry kernels.

Every function here accepts either a :class:`PointCloud` or an ``(n, 3)``
array-like. Functions that return a cloud hand back the same kind they were
given (a ``PointCloud`` keeps its label).

Neighbour searches are exhaustive. All ties (kNN, farthest point sampling,
outlier ranking) are broken in favour of the lower point index so that
results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np

from ._kernels import knn_exhaustive
from .errors import EmptyMesh, InsufficientPoints, InvalidCount, InvalidRatio

@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3D points with an optional class label."""

    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.points, other.points)

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.label)


CloudLike = Union[PointCloud, np.ndarray]


def as_points(cloud) -> np.ndarray:
    """Return the ``(n, 3)`` float64 coordinate array behind ``cloud``."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
    return pts


def _like(cloud, points: np.ndarray):
    if isinstance(cloud, PointCloud):
        return cloud.with_points(points)
    return points


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.intp).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True)
class NeighborhoodIndex:
    """k nearest neighbours per point (self excluded), nearest first."""

    k: int
    neighbors: np.ndarray  # (n, k) int
    distances: np.ndarray  # (n, k) float, non-decreasing per row

    def __len__(self) -> int:
        return len(self.neighbors)


class LocalFrame(NamedTuple):
    normal: np.ndarray
    tangent1: np.ndarray
    tangent2: np.ndarray
    eigenvalues: np.ndarray


@dataclass(frozen=True)
class LocalFrames:
    """Per-point frames stored column-wise; ``frames[i]`` gives one LocalFrame."""

    normals: np.ndarray
    tangent1: np.ndarray
    tangent2: np.ndarray
    eigenvalues: np.ndarray  # (n, 3), descending
    k: int = field(default=0)

    def __len__(self) -> int:
        return len(self.normals)

    def __getitem__(self, i: int) -> LocalFrame:
        return LocalFrame(self.normals[i], self.tangent1[i], self.tangent2[i], self.eigenvalues[i])


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, ``(len(a), len(b))``.

    Evaluated as ``dx*dx + dy*dy + dz*dz`` in that order, which is what the
    brute-force reference in the tests does as well.
    """
    d = np.subtract.outer(a[:, 0], b[:, 0])
    d *= d
    t = np.subtract.outer(a[:, 1], b[:, 1])
    t *= t
    d += t
    np.subtract(a[:, 2, None], b[None, :, 2], out=t)
    t *= t
    d += t
    return d


def normalize_unit_ball(cloud):
    """Center at the centroid and scale so the farthest point has norm 1."""
    pts = as_points(cloud)
    if len(pts) == 0 or np.all(pts == pts[0]):
        return _like(cloud, np.zeros_like(pts))
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    if not radius > 0:  # spread below floating-point resolution
        return _like(cloud, np.zeros_like(pts))
    centered = centered / radius
    return _like(cloud, centered)


def knn(cloud, k: int) -> NeighborhoodIndex:
    """Exhaustive k-nearest-neighbour search excluding each query point."""
    pts = as_points(cloud)
    n = len(pts)
    if k < 1:
        raise InvalidCount(f"k must be positive, got {k}")
    if n <= k:
        raise InsufficientPoints(f"need more than k={k} points, got {n}")
    neighbors, distances = knn_exhaustive(np.ascontiguousarray(pts), k)
    return NeighborhoodIndex(k, neighbors, distances)


def local_covariance(cloud, center_index: int, nbr: NeighborhoodIndex) -> np.ndarray:
    """Sum of outer products of neighbour offsets from one point (3x3, PSD)."""
    pts = as_points(cloud)
    offsets = pts[nbr.neighbors[center_index]] - pts[center_index]
    return offsets.T @ offsets


def _covariances(pts: np.ndarray, nbr: NeighborhoodIndex) -> np.ndarray:
    offsets = pts[nbr.neighbors] - pts[:, None, :]
    return np.einsum("nki,nkj->nij", offsets, offsets)


def _canonical_signs(vecs: np.ndarray) -> np.ndarray:
    # vecs: (..., 3, m) eigenvectors in columns; flip so first nonzero entry >= 0
    nonzero = vecs != 0
    first = np.argmax(nonzero, axis=-2)
    lead = np.take_along_axis(vecs, first[..., None, :], axis=-2)
    return np.where(lead < 0, -vecs, vecs)


def eigh3_batch(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`eigh3` over a ``(..., 3, 3)`` stack."""
    mats = np.asarray(mats, dtype=np.float64)
    w, v = np.linalg.eigh(mats)
    w = w[..., ::-1]
    v = v[..., :, ::-1]
    return np.ascontiguousarray(w), np.ascontiguousarray(_canonical_signs(v))


def eigh3(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric 3x3 matrix.

    Returns eigenvalues in descending order and a matrix whose columns are the
    matching unit eigenvectors, each with its first nonzero entry >= 0.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {m.shape}")
    return eigh3_batch(m)


def local_frames(cloud, nbr: NeighborhoodIndex) -> LocalFrames:
    """Normal and tangent basis of every point from its neighbour covariance.

    The normal is the smallest-eigenvalue eigenvector, oriented away from the
    cloud centroid. A point whose neighbours all coincide with it gets the
    canonical frame ``t1 = x, t2 = y, n = z``.
    """
    pts = as_points(cloud)
    cov = _covariances(pts, nbr)
    w, v = eigh3_batch(cov)
    t1 = v[:, :, 0].copy()
    t2 = v[:, :, 1].copy()
    normals = v[:, :, 2].copy()

    degenerate = np.all(cov.reshape(len(pts), 9) == 0, axis=1)
    if np.any(degenerate):
        t1[degenerate] = (1.0, 0.0, 0.0)
        t2[degenerate] = (0.0, 1.0, 0.0)
        normals[degenerate] = (0.0, 0.0, 1.0)
        w[degenerate] = 0.0

    outward = np.einsum("ij,ij->i", normals, pts - pts.mean(axis=0))
    normals[outward < 0] *= -1.0
    return LocalFrames(normals, t1, t2, np.maximum(w, 0.0), nbr.k)


def sqnorm(d: np.ndarray) -> np.ndarray:
    """Squared length along the last axis, summed as ``x*x + y*y + z*z``."""
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def abs_cosines(offsets: np.ndarray, normals: np.ndarray):
    """``|cos|`` between each offset ``(n, k, 3)`` and its row normal ``(n, 3)``.

    Returns ``(abs_cos, signed_cos, lengths)``; zero-length offsets give 0.
    """
    lengths = np.sqrt(sqnorm(offsets))
    live = lengths > 0
    safe = np.where(live, lengths, 1.0)
    cos = np.where(live, np.einsum("nkj,nj->nk", offsets, normals) / safe, 0.0)
    cos = np.clip(cos, -1.0, 1.0)
    return np.abs(cos), cos, lengths


def curvature(cloud, nbr: NeighborhoodIndex, frames: LocalFrames) -> np.ndarray:
    """Mean |cos| between neighbour directions and the point normal, in [0, 1].

    A neighbour coinciding with its center point contributes zero.
    """
    pts = as_points(cloud)
    offsets = pts[nbr.neighbors] - pts[:, None, :]
    return abs_cosines(offsets, frames.normals)[0].mean(axis=1)


def plane_deviations(cloud, nbr: NeighborhoodIndex, frames: LocalFrames) -> np.ndarray:
    """Per-point mean distance of the neighbours to the tangent plane at the point."""
    pts = as_points(cloud)
    offsets = pts[nbr.neighbors] - pts[:, None, :]
    return np.abs(np.einsum("nkj,nj->nk", offsets, frames.normals)).mean(axis=1)


def regularity(cloud, k: int = 16) -> float:
    """Geometric regularity: worst per-point mean distance to the tangent plane.

    Lower is smoother. Zero for planar clouds (exactly so for coordinate planes).
    """
    nbr = knn(cloud, k)
    frames = local_frames(cloud, nbr)
    return float(plane_deviations(cloud, nbr, frames).max())


def fps_indices(cloud, m: int) -> np.ndarray:
    """Indices chosen by farthest point sampling, in ascending order."""
    pts = as_points(cloud)
    n = len(pts)
    if m < 1 or m > n:
        raise InvalidCount(f"m must be in [1, {n}], got {m}")
    if m == n:
        return np.arange(n)
    centroid = pts.mean(axis=0, keepdims=True)
    seed = int(np.argmax(squared_distances(pts, centroid)[:, 0]))
    chosen = [seed]
    mind = squared_distances(pts, pts[seed : seed + 1])[:, 0]
    mind[seed] = -1.0  # never re-pick a chosen point, even among duplicates
    for _ in range(m - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, squared_distances(pts, pts[nxt : nxt + 1])[:, 0])
        mind[nxt] = -1.0
    return np.sort(np.array(chosen, dtype=np.intp))


def fps(cloud, m: int):
    """Farthest point sampling of ``m`` points, keeping the original order."""
    return _like(cloud, as_points(cloud)[fps_indices(cloud, m)])


def sor_scores(cloud, k_sor: int = 16) -> np.ndarray:
    return knn(cloud, k_sor).distances.mean(axis=1)


def sor_keep_indices(cloud, k_sor: int = 16, drop_ratio: float = 0.0) -> np.ndarray:
    pts = as_points(cloud)
    n = len(pts)
    if not (0.0 <= drop_ratio < 1.0):
        raise InvalidRatio(f"drop_ratio must be in [0, 1), got {drop_ratio}")
    n_drop = int(np.floor(drop_ratio * n))
    if n_drop == 0:
        return np.arange(n)
    scores = sor_scores(pts, k_sor)
    # highest score first, lower index first among equal scores
    order = np.lexsort((np.arange(n), -scores))
    keep = np.ones(n, dtype=bool)
    keep[order[:n_drop]] = False
    return np.flatnonzero(keep)


def sor_defense(cloud, k_sor: int = 16, drop_ratio: float = 0.0):
    """Statistical outlier removal that drops the given fraction of points.

    Points are ranked by mean distance to their ``k_sor`` nearest neighbours
    and the ``floor(drop_ratio * n)`` worst are removed.
    """
    return _like(cloud, as_points(cloud)[sor_keep_indices(cloud, k_sor, drop_ratio)])


def sample_mesh_surface(mesh: TriangleMesh, n: int, rng_seed=None) -> np.ndarray:
    """Draw ``n`` points uniformly by area over the triangles of ``mesh``."""
    areas = mesh.triangle_areas() if len(mesh.faces) else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise EmptyMesh("mesh has no triangle with positive area")
    rng = np.random.default_rng(rng_seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.faces[tri, i]] for i in range(3))
    w_a = 1.0 - r1
    w_b = r1 * (1.0 - r2)
    w_c = r1 * r2
    return w_a[:, None] * a + w_b[:, None] * b + w_c[:, None] * c
