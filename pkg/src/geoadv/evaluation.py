"""Experiment harness: success under outlier-removal sweeps, regularity,
ablation grids and the tangent re-sampling robustness probe.

The re-sampling probe is a surrogate for re-meshing an adversarial cloud:
each trial displaces every point by a fresh tangent-plane jitter and re-tests
the attack condition. An instance counts as robust when a strict majority of
trials keep the attack successful.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attack import AttackConfig, AttackResult, is_success, run_attack, sample_jitter, with_overrides
from .classifier import ClassifierModel, forward, predict_batch
from .errors import EmptyResults
from .geometry import as_points, knn, local_frames, regularity, sor_defense

logger = logging.getLogger(__name__)

DROP_RATIOS = (0.0, 0.01, 0.02, 0.05, 0.10, 0.15, 0.20)
SURROGATE_NOTE = "tangent-jitter re-sampling surrogate (no meshing)"

ABLATIONS = {
    "full": {},
    "minus_chamfer": {"use_chamfer": False},
    "minus_hausdorff": {"use_hausdorff": False},
    "minus_curvature": {"use_curvature": False},
    "degenerate_l2": {"regularizer": "degenerate_l2"},
}


@dataclass
class Instance:
    id: str
    points: np.ndarray
    label: int
    target: Optional[int]


@dataclass
class SweepRow:
    id: str
    target: Optional[int]
    success: list  # one flag per drop ratio
    regularity: float


@dataclass
class SweepReport:
    name: str
    drop_ratios: list
    success_rates: list
    mean_regularity: float
    rows: list = field(default_factory=list)
    k_sor: int = 16

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepReport":
        d = dict(d)
        d["rows"] = [SweepRow(**r) for r in d.get("rows", [])]
        return cls(**d)


def _label(result: AttackResult) -> int:
    return result.true_label if result.untargeted else result.target


def _check(model: ClassifierModel, cloud, result: AttackResult) -> bool:
    return is_success(forward(model, cloud), _label(result), result.untargeted)


def defended_success(model, result: AttackResult, drop_ratio: float, k_sor: int = 16) -> bool:
    """Attack condition on the exact output of the outlier filter."""
    if not result.success:
        return False
    return _check(model, sor_defense(result.adversarial, k_sor, drop_ratio), result)


def attack_success_rate(results: Sequence[AttackResult], model, drop_ratio: float, k_sor: int = 16) -> float:
    if len(results) == 0:
        raise EmptyResults("no attack results")
    return float(np.mean([defended_success(model, r, drop_ratio, k_sor) for r in results]))


def regularity_report(clouds, k: int = 16) -> tuple[float, list]:
    """Mean regularity over the clouds and the per-cloud values."""
    if len(clouds) == 0:
        raise EmptyResults("no clouds")
    values = [regularity(c, k) for c in clouds]
    return float(np.mean(values)), values


def resample_robustness(
    results: Sequence[AttackResult],
    model,
    sigma_test: float = 0.02,
    trials: int = 5,
    seed: int = 0,
    k: int = 16,
) -> float:
    """Fraction of results whose attack survives a majority of jitter trials."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if len(results) == 0:
        raise EmptyResults("no attack results")
    kept = 0
    for idx, r in enumerate(results):
        if not r.success:
            continue
        adv = as_points(r.adversarial)
        frames = local_frames(adv, knn(adv, k))
        rng = np.random.default_rng([seed, idx])
        wins = sum(
            _check(model, adv + sample_jitter(adv, frames, sigma_test, rng), r) for _ in range(trials)
        )
        kept += wins * 2 > trials
    return kept / len(results)


def sweep(name: str, results: Sequence[AttackResult], ids, model, drop_ratios=DROP_RATIOS, k_sor: int = 16, k: int = 16) -> SweepReport:
    if len(results) == 0:
        raise EmptyResults("no attack results")
    rows = []
    for rid, r in zip(ids, results):
        flags = [defended_success(model, r, q, k_sor) for q in drop_ratios]
        reg = r.regularity if r.regularity is not None else regularity(r.adversarial, k)
        rows.append(SweepRow(str(rid), r.target, flags, float(reg)))
    rates = [float(np.mean([row.success[j] for row in rows])) for j in range(len(drop_ratios))]
    mean_r = float(np.mean([row.regularity for row in rows]))
    return SweepReport(name, list(drop_ratios), rates, mean_r, rows, k_sor)


def select_instances(
    model,
    points: np.ndarray,
    labels: np.ndarray,
    count: int,
    seed: int = 0,
    num_classes: Optional[int] = None,
    targeted: bool = True,
    ids: Optional[Sequence[str]] = None,
) -> list[Instance]:
    """Correctly classified clouds (in a seeded random order) with random targets.

    Each target is drawn uniformly from the classes other than the true one.
    """
    num_classes = model.num_classes if num_classes is None else num_classes
    pred = predict_batch(model, points)
    ok = np.flatnonzero(pred == labels)
    rng = np.random.default_rng(seed)
    chosen = ok[rng.permutation(len(ok))[:count]]
    out = []
    for i in chosen:
        y = int(labels[i])
        target = None
        if targeted:
            t = int(rng.integers(num_classes - 1))
            target = t if t < y else t + 1
        rid = ids[i] if ids is not None else f"test-{i:05d}"
        out.append(Instance(rid, np.asarray(points[i]), y, target))
    return out


def _attack_one(args):
    model, inst, cfg = args
    return run_attack(model, inst.points, cfg, target=inst.target, true_label=inst.label)


def run_attacks(model, instances: Sequence[Instance], cfg: AttackConfig, workers: int = 1) -> list[AttackResult]:
    """Attack every instance; results come back in instance order."""
    jobs = [(model, inst, cfg) for inst in instances]
    if workers <= 1:
        out = []
        for n, job in enumerate(jobs):
            out.append(_attack_one(job))
            logger.info("attacked %d/%d", n + 1, len(jobs))
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_attack_one, jobs))


def run_ablation(
    model,
    instances: Sequence[Instance],
    base_cfg: AttackConfig = AttackConfig(),
    configs: Optional[Sequence[str]] = None,
    drop_ratios=DROP_RATIOS,
    k_sor: int = 16,
    workers: int = 1,
    precomputed: Optional[dict] = None,
) -> dict[str, SweepReport]:
    """One report per configuration, all over the same instances and targets.

    ``precomputed`` maps configuration names to result lists that were
    already obtained on ``instances`` with the matching configuration.
    """
    if len(instances) == 0:
        raise EmptyResults("no instances")
    names = list(ABLATIONS) if configs is None else list(configs)
    ids = [inst.id for inst in instances]
    reports = {}
    for name in names:
        if precomputed and name in precomputed:
            results = precomputed[name]
        else:
            cfg = with_overrides(base_cfg, **ABLATIONS[name])
            results = run_attacks(model, instances, cfg, workers)
        reports[name] = sweep(name, results, ids, model, drop_ratios, k_sor, base_cfg.k)
    return reports


def format_table(reports: dict[str, SweepReport]) -> str:
    """Plain-text table: one row per configuration, drop ratios as columns."""
    if not reports:
        return ""
    ratios = next(iter(reports.values())).drop_ratios
    head = ["config".ljust(16)] + [f"{100 * q:g}%".rjust(7) for q in ratios] + ["R".rjust(8)]
    lines = [" ".join(head)]
    for name, rep in reports.items():
        cells = [name.ljust(16)] + [f"{100 * s:.2f}".rjust(7) for s in rep.success_rates]
        cells.append(f"{rep.mean_regularity:.4f}".rjust(8))
        lines.append(" ".join(cells))
    return "\n".join(lines)
