"""Geometry-aware adversarial point clouds: geometry kernels, losses, a small
point-set classifier, the attack, and the evaluation harness."""

__version__ = "0.1.0"

from .attack import (
    AttackConfig,
    AttackResult,
    geoa3_attack,
    itertanjit_attack,
    run_attack,
    sample_jitter,
)
from .classifier import ClassifierModel, TrainConfig, forward, init_model, load, predict, save, train
from .datasets import DatasetSpec, gen_dataset, load_dataset, save_dataset
from .evaluation import (
    SweepReport,
    attack_success_rate,
    regularity_report,
    resample_robustness,
    run_ablation,
)
from .fileio import read_off, read_xyz, write_ply, write_xyz
from .geometry import (
    PointCloud,
    TriangleMesh,
    curvature,
    eigh3,
    fps,
    knn,
    local_frames,
    normalize_unit_ball,
    regularity,
    sample_mesh_surface,
    sor_defense,
)
from .losses import GeoWeights, chamfer, curvature_consistency, geo_loss, hausdorff, l2_perturbation
