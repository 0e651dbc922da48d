"""Geometry-aware loss terms with analytic gradients w.r.t. the adversarial cloud.

Discrete selections (nearest-neighbour assignments, the Hausdorff maximiser,
the adversarial kNN topology) and the benign normals/curvatures are treated
as constants. Passing a precomputed :class:`Correspondence` freezes the
assignments, which is what the finite-difference checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._kernels import nearest_both
from .errors import EmptyCloud, MismatchedK, SizeMismatch
from .geometry import (
    LocalFrames,
    NeighborhoodIndex,
    abs_cosines,
    as_points,
    curvature,
    knn,
    sqnorm,
)

@dataclass(frozen=True)
class LossValue:
    value: float
    gradient: np.ndarray

    def __add__(self, other: "LossValue") -> "LossValue":
        return LossValue(self.value + other.value, self.gradient + other.gradient)

    def __mul__(self, w: float) -> "LossValue":
        return LossValue(w * self.value, w * self.gradient)

    __rmul__ = __mul__


@dataclass(frozen=True)
class GeoWeights:
    lambda1: float = 0.1  # Hausdorff
    lambda2: float = 1.0  # curvature consistency

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class Correspondence:
    """Nearest-neighbour assignments between an adversarial and a benign cloud.

    ``fwd[i]`` is the benign point closest to adversarial point ``i``;
    ``bwd[j]`` the adversarial point closest to benign point ``j``.
    """

    fwd: np.ndarray
    bwd: np.ndarray
    hausdorff_argmax: np.ndarray


def _check_nonempty(*clouds):
    for c in clouds:
        if len(c) == 0:
            raise EmptyCloud("point cloud is empty")


def correspondence(adv, benign) -> Correspondence:
    """Exhaustive nearest-neighbour matching in both directions (ties to lower index)."""
    a = as_points(adv)
    b = as_points(benign)
    _check_nonempty(a, b)
    fwd, fwd_sq, bwd, _ = nearest_both(np.ascontiguousarray(a), np.ascontiguousarray(b))
    argmax = np.flatnonzero(fwd_sq == fwd_sq.max())
    return Correspondence(fwd, bwd, argmax)


def chamfer(adv, benign, corr: Optional[Correspondence] = None) -> LossValue:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    a = as_points(adv)
    b = as_points(benign)
    _check_nonempty(a, b)
    if corr is None:
        corr = correspondence(a, b)
    d_fwd = a - b[corr.fwd]
    d_bwd = a[corr.bwd] - b
    value = sqnorm(d_fwd).mean() + sqnorm(d_bwd).mean()
    grad = (2.0 / len(a)) * d_fwd
    np.add.at(grad, corr.bwd, (2.0 / len(b)) * d_bwd)
    return LossValue(float(value), grad)


def hausdorff(adv, benign, corr: Optional[Correspondence] = None) -> LossValue:
    """One-sided squared Hausdorff distance from ``adv`` to ``benign``.

    The subgradient is shared equally by all adversarial points attaining the
    maximum.
    """
    a = as_points(adv)
    b = as_points(benign)
    _check_nonempty(a, b)
    if corr is None:
        corr = correspondence(a, b)
    idx = corr.hausdorff_argmax
    d = a[idx] - b[corr.fwd[idx]]
    value = sqnorm(d).max()  # tied maximisers share one value; a mean could round away from it
    grad = np.zeros_like(a)
    grad[idx] = (2.0 / len(idx)) * d
    return LossValue(float(value), grad)


def curvature_consistency(
    adv,
    benign,
    benign_frames: LocalFrames,
    adv_nbr: NeighborhoodIndex,
    corr: Optional[Correspondence] = None,
    benign_curvature: Optional[np.ndarray] = None,
) -> LossValue:
    """Mean squared gap between adversarial and matched benign curvature.

    The adversarial curvature at ``p'`` is measured over ``adv_nbr`` using the
    normal of the benign point closest to ``p'``. The gradient reaches each
    point both as a neighbourhood center and as a neighbour of other points.
    """
    a = as_points(adv)
    b = as_points(benign)
    _check_nonempty(a, b)
    if adv_nbr.k != benign_frames.k:
        raise MismatchedK(f"adversarial k={adv_nbr.k} but benign frames use k={benign_frames.k}")
    if len(adv_nbr) != len(a):
        raise SizeMismatch("neighbourhood index does not match the adversarial cloud")
    if corr is None:
        corr = correspondence(a, b)
    if benign_curvature is None:
        benign_curvature = curvature(b, knn(b, benign_frames.k), benign_frames)

    n, k = adv_nbr.neighbors.shape
    normals = benign_frames.normals[corr.fwd]
    offsets = a[adv_nbr.neighbors] - a[:, None, :]
    abs_cos, cos, lengths = abs_cosines(offsets, normals)
    kappa_adv = abs_cos.mean(axis=1)
    resid = kappa_adv - benign_curvature[corr.fwd]
    value = float(np.mean(resid * resid))

    # d|cos|/d offset = sign(cos) / |d| * (n - cos * d/|d|)
    live = lengths > 0
    safe = np.where(live, lengths, 1.0)
    coef = (2.0 / (n * k)) * resid[:, None] * np.sign(cos) / safe
    units = offsets / safe[..., None]
    g = coef[..., None] * (normals[:, None, :] - cos[..., None] * units)
    g[~live] = 0.0
    grad = -g.sum(axis=1)
    np.add.at(grad, adv_nbr.neighbors.ravel(), g.reshape(-1, 3))
    return LossValue(value, grad)


def geo_loss(
    adv,
    benign,
    benign_frames: LocalFrames,
    adv_nbr: NeighborhoodIndex,
    corr: Optional[Correspondence] = None,
    weights: GeoWeights = GeoWeights(),
    benign_curvature: Optional[np.ndarray] = None,
) -> LossValue:
    """Chamfer + lambda1 * Hausdorff + lambda2 * curvature consistency."""
    if corr is None:
        corr = correspondence(adv, benign)
    total = chamfer(adv, benign, corr)
    total = total + weights.lambda1 * hausdorff(adv, benign, corr)
    return total + weights.lambda2 * curvature_consistency(
        adv, benign, benign_frames, adv_nbr, corr, benign_curvature
    )


def l2_perturbation(adv, benign) -> LossValue:
    """Mean squared per-point displacement (index-wise correspondence)."""
    a = as_points(adv)
    b = as_points(benign)
    if a.shape != b.shape:
        raise SizeMismatch(f"clouds differ in size: {len(a)} vs {len(b)}")
    _check_nonempty(a)
    d = a - b
    return LossValue(float(sqnorm(d).mean()), (2.0 / len(a)) * d)
