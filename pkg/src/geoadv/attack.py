"""Geometry-aware adversarial attack on point clouds.

The adversarial cloud is found by Adam on point coordinates, minimising

    misclassification loss + beta * regulariser

where the regulariser is the geometry-aware combination of Chamfer,
Hausdorff and curvature-consistency terms (or a per-point L2 baseline).
``beta`` is bracketed by a binary search: a successful stage raises it, a
failed stage lowers it, and the most regularised success is kept.

With ``itertanjit`` the gradient at each step is taken at a copy of the
current cloud whose points are jittered within their tangent planes.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .classifier import ClassifierModel, backward_input, forward, loss_targeted, loss_untargeted
from .geometry import (
    LocalFrames,
    NeighborhoodIndex,
    PointCloud,
    as_points,
    curvature,
    knn,
    local_frames,
    regularity,
)
from .losses import (
    Correspondence,
    GeoWeights,
    LossValue,
    chamfer,
    correspondence,
    curvature_consistency,
    hausdorff,
    l2_perturbation,
)

REGULARIZERS = ("geometry", "degenerate_l2")


@dataclass(frozen=True)
class AttackConfig:
    untargeted: bool = False
    target: Optional[int] = None
    lambda1: float = 0.1
    lambda2: float = 1.0
    beta_init: float = 2500.0
    binary_search_steps: int = 10
    iters_per_step: int = 500
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    k: int = 16
    refresh_period: int = 10
    itertanjit: bool = False
    sigma: float = 0.02
    seed: int = 0
    regularizer: str = "geometry"
    use_chamfer: bool = True
    use_hausdorff: bool = True
    use_curvature: bool = True

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")
        for name in ("binary_search_steps", "iters_per_step", "k", "refresh_period"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")
        if not self.beta_init >= 0:
            raise ValueError("beta_init must be >= 0")
        GeoWeights(self.lambda1, self.lambda2)

    @property
    def weights(self) -> GeoWeights:
        return GeoWeights(self.lambda1, self.lambda2)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: bool
    predicted_class: int
    best_beta: Optional[float]
    geo_loss_final: float
    loss_trace: list
    regularity: float
    true_label: Optional[int] = None
    target: Optional[int] = None
    untargeted: bool = False
    stages: list = field(default_factory=list)  # [{"beta", "success", "best_reg"}]
    wall_time: float = field(default=0.0, compare=False)

    def __eq__(self, other):
        if not isinstance(other, AttackResult):
            return NotImplemented
        a = {k: v for k, v in self.__dict__.items() if k not in ("adversarial", "wall_time")}
        b = {k: v for k, v in other.__dict__.items() if k not in ("adversarial", "wall_time")}
        return a == b and np.array_equal(self.adversarial, other.adversarial)


@dataclass
class AttackCache:
    """Benign-side geometry (fixed) and the adversarial neighbourhoods (refreshed)."""

    benign: np.ndarray
    benign_frames: LocalFrames
    benign_curvature: np.ndarray
    adv_nbr: Optional[NeighborhoodIndex] = None
    adv_frames: Optional[LocalFrames] = None

    @classmethod
    def build(cls, benign, k: int) -> "AttackCache":
        pts = as_points(benign)
        nbr = knn(pts, k)
        frames = local_frames(pts, nbr)
        return cls(pts, frames, curvature(pts, nbr, frames), nbr)

    def refresh(self, adv: np.ndarray, with_frames: bool = False) -> None:
        self.adv_nbr = knn(adv, self.benign_frames.k)
        if with_frames:
            self.adv_frames = local_frames(adv, self.adv_nbr)


@dataclass(frozen=True)
class Objective:
    value: float
    gradient: np.ndarray
    misclassification: float
    regularizer: float
    logits: np.ndarray


def regularizer_loss(
    adv, cache: AttackCache, cfg: AttackConfig, corr: Optional[Correspondence] = None
) -> LossValue:
    """The configured regulariser (geometry terms under the ablation mask, or L2).

    Correspondences are recomputed unless ``corr`` is given.
    """
    adv = as_points(adv)
    if cfg.regularizer == "degenerate_l2":
        return l2_perturbation(adv, cache.benign)
    total = LossValue(0.0, np.zeros_like(adv))
    if not (cfg.use_chamfer or cfg.use_hausdorff or cfg.use_curvature):
        return total
    if corr is None:
        corr = correspondence(adv, cache.benign)
    if cfg.use_chamfer:
        total = total + chamfer(adv, cache.benign, corr)
    if cfg.use_hausdorff:
        total = total + cfg.lambda1 * hausdorff(adv, cache.benign, corr)
    if cfg.use_curvature:
        if cache.adv_nbr is None or len(cache.adv_nbr) != len(adv):
            cache.refresh(adv)
        total = total + cfg.lambda2 * curvature_consistency(
            adv, cache.benign, cache.benign_frames, cache.adv_nbr, corr, cache.benign_curvature
        )
    return total


def misclassification_loss(logits, label: int, untargeted: bool):
    return loss_untargeted(logits, label) if untargeted else loss_targeted(logits, label)


def adv_objective(
    model: ClassifierModel,
    adv,
    benign,
    cache: AttackCache,
    cfg: AttackConfig,
    beta: float,
    label: int,
    corr: Optional[Correspondence] = None,
) -> Objective:
    """Attack objective and its gradient w.r.t. the adversarial coordinates.

    ``label`` is the target class, or the true class when ``cfg.untargeted``.
    """
    adv = as_points(adv)
    logits, fcache = forward(model, adv, return_cache=True)
    mis, dlogits = misclassification_loss(logits, label, cfg.untargeted)
    grad = backward_input(model, adv, dlogits, cache=fcache)
    reg = regularizer_loss(adv, cache, cfg, corr)
    if beta != 0:
        grad = grad + beta * reg.gradient
    reg_value = reg.value
    return Objective(mis + beta * reg_value, grad, mis, reg_value, logits)


def sample_jitter(adv, frames: LocalFrames, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Per-point offsets ``s1 * t1 + s2 * t2`` with ``s1, s2 ~ Normal(0, sigma)``."""
    n = len(as_points(adv))
    if sigma == 0:
        return np.zeros((n, 3))
    s = rng.normal(0.0, sigma, size=(n, 2))
    return s[:, :1] * frames.tangent1 + s[:, 1:] * frames.tangent2


def is_success(logits, label: int, untargeted: bool) -> bool:
    pred = int(np.argmax(logits))
    return pred != label if untargeted else pred == label


def _next_beta(beta, lo, hi, success):
    if success:
        lo = beta
        beta = beta * 10.0 if hi is None else (lo + hi) / 2.0
    else:
        hi = beta
        beta = (lo + hi) / 2.0 if lo > 0 else beta / 10.0
    return beta, lo, hi


def _resolve_label(benign, cfg: AttackConfig, target, true_label):
    if true_label is None and isinstance(benign, PointCloud):
        true_label = benign.label
    if cfg.untargeted:
        if true_label is None:
            raise ValueError("untargeted attack needs the true label")
        return true_label, None, true_label
    target = cfg.target if target is None else target
    if target is None:
        raise ValueError("targeted attack needs a target class")
    return int(target), int(target), true_label


def _run(model, benign, cfg: AttackConfig, target, true_label, jitter: bool) -> AttackResult:
    t0 = time.perf_counter()
    label, target, true_label = _resolve_label(benign, cfg, target, true_label)
    pts = np.array(as_points(benign), dtype=np.float64)
    cache = AttackCache.build(pts, cfg.k)
    rng = np.random.default_rng(cfg.seed)
    trace: list = []
    stages: list = []

    logits0 = forward(model, pts)
    if is_success(logits0, label, cfg.untargeted):
        return AttackResult(
            pts.copy(), True, int(np.argmax(logits0)), None, 0.0, trace,
            regularity(pts, cfg.k), true_label, target, cfg.untargeted, stages,
            time.perf_counter() - t0,
        )

    best = None  # (reg, adv, beta, pred)
    beta, lo, hi = float(cfg.beta_init), 0.0, None
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    adv = pts.copy()
    last_pred = int(np.argmax(logits0))
    for _ in range(cfg.binary_search_steps):
        adv = pts.copy()
        m = np.zeros_like(adv)
        v = np.zeros_like(adv)
        stage_best = None
        for it in range(cfg.iters_per_step + 1):
            if it % cfg.refresh_period == 0:
                cache.refresh(adv, with_frames=jitter)
            if jitter and cfg.sigma > 0:
                probe = adv + sample_jitter(adv, cache.adv_frames, cfg.sigma, rng)
            else:
                probe = adv
            obj = adv_objective(model, probe, pts, cache, cfg, beta, label)
            trace.append(obj.value)
            if probe is adv:
                logits, reg = obj.logits, obj.regularizer
            else:
                logits, reg = forward(model, adv), None
            last_pred = int(np.argmax(logits))
            if is_success(logits, label, cfg.untargeted):
                if reg is None:
                    reg = regularizer_loss(adv, cache, cfg).value
                if stage_best is None or reg < stage_best[0]:
                    stage_best = (reg, adv.copy(), last_pred)
            if it == cfg.iters_per_step:
                break
            t = it + 1
            g = obj.gradient
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            step = (cfg.learning_rate / (1.0 - b1**t)) * m / (np.sqrt(v / (1.0 - b2**t)) + eps)
            adv = adv - step

        ok = stage_best is not None
        stages.append({"beta": beta, "success": ok, "best_reg": stage_best[0] if ok else None})
        if ok and (best is None or stage_best[0] < best[0]):
            best = (stage_best[0], stage_best[1], beta, stage_best[2])
        beta, lo, hi = _next_beta(beta, lo, hi, ok)

    if best is not None:
        reg, out, best_beta, pred = best
        success = True
    else:
        out, best_beta, pred, success = adv, None, last_pred, False
        reg = regularizer_loss(out, cache, cfg).value
    return AttackResult(
        out, success, pred, best_beta, float(reg), trace, regularity(out, cfg.k),
        true_label, target, cfg.untargeted, stages, time.perf_counter() - t0,
    )


def geoa3_attack(model, benign, cfg: AttackConfig = AttackConfig(), target=None, true_label=None) -> AttackResult:
    """Run the binary-searched attack without tangent jitter."""
    return _run(model, benign, cfg, target, true_label, jitter=False)


def itertanjit_attack(model, benign, cfg: AttackConfig = AttackConfig(), target=None, true_label=None) -> AttackResult:
    """Same search, but each gradient is taken at a tangent-jittered copy of the cloud.

    Success is always judged on the un-jittered iterate.
    """
    return _run(model, benign, cfg, target, true_label, jitter=True)


def run_attack(model, benign, cfg: AttackConfig, target=None, true_label=None) -> AttackResult:
    fn = itertanjit_attack if cfg.itertanjit else geoa3_attack
    return fn(model, benign, cfg, target, true_label)


def with_overrides(cfg: AttackConfig, **kw) -> AttackConfig:
    return replace(cfg, **kw)
