"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The attack criteria share one harness: the default 8-class dataset at
n = 256, the classifier trained for criterion 4, and default attack settings.
"""

import filecmp
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from fd_cases import all_checks
from report import record
from geoadv.attack import AttackConfig, geoa3_attack, itertanjit_attack, sample_jitter, with_overrides
from geoadv.classifier import TrainConfig, forward, init_model, train
from geoadv.cli import main as cli
from geoadv.datasets import DatasetSpec, gen_dataset
from geoadv.evaluation import (
    DROP_RATIOS,
    attack_success_rate,
    resample_robustness,
    run_ablation,
    run_attacks,
    select_instances,
)
from geoadv.geometry import curvature, eigh3_batch, fps_indices, knn, local_frames, regularity
from geoadv.losses import chamfer, correspondence, hausdorff

N_POINTS = 256
N_HEADLINE = 50  # criterion 5
N_ABLATION = 20  # criteria 7 and 8, a prefix of the headline instances
N_UNTARGETED = 20  # criterion 9
ATTACK = AttackConfig()


# --- shared harness ------------------------------------------------------------------


@pytest.fixture(scope="session")
def dataset():
    return gen_dataset(DatasetSpec(train_per_class=250, test_per_class=50, n_points=N_POINTS, seed=0))


@pytest.fixture(scope="session")
def trained(dataset):
    t0 = time.process_time()
    wall = time.perf_counter()
    model, rep = train(init_model(8, seed=0), dataset, TrainConfig())
    return model, rep, time.process_time() - t0, time.perf_counter() - wall


@pytest.fixture(scope="session")
def headline(trained, dataset):
    model = trained[0]
    insts = select_instances(model, dataset.test_points, dataset.test_labels, N_HEADLINE, seed=0)
    return insts, run_attacks(model, insts, ATTACK)


@pytest.fixture(scope="session")
def ablation(trained, headline):
    insts, full = headline
    return run_ablation(
        trained[0], insts[:N_ABLATION], ATTACK, precomputed={"full": full[:N_ABLATION]}
    )


# --- 1. oracle equivalence ---------------------------------------------------------------


def _clouds_for_oracles(count=200, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(count):
        n = int(rng.integers(17, 257))
        if i % 4 == 3:
            # lattice points with repeats: exact distance ties everywhere
            yield rng.integers(-3, 4, size=(n, 3)).astype(float)
        else:
            yield rng.normal(size=(n, 3)) * rng.uniform(0.2, 2.0, size=3)


def test_c1_oracle_equivalence():
    # the vectorised oracles first agree with the plain-Python ones
    rng = np.random.default_rng(99)
    for _ in range(3):
        small = rng.integers(-2, 3, size=(30, 3)).astype(float)
        assert oracles.knn_brute(small, 5)[0].tolist() == oracles.knn(small, 5)[0]
        assert oracles.nearest_brute(small, small[::-1])[0].tolist() == oracles.nearest(small, small[::-1])[0]
        assert oracles.fps_brute(small, 9) == oracles.fps(small, 9)

    t0 = time.perf_counter()
    bad = []
    for i, pts in enumerate(_clouds_for_oracles()):
        other = pts[::-1] + 0.25 * (i % 2)
        nb = knn(pts, 16)
        ref_idx, ref_d = oracles.knn_brute(pts, 16)
        if not (np.array_equal(nb.neighbors, ref_idx) and np.array_equal(nb.distances, ref_d)):
            bad.append((i, "knn"))
        corr = correspondence(pts, other)
        f_idx, f_d = oracles.nearest_brute(pts, other)
        b_idx, b_d = oracles.nearest_brute(other, pts)
        if not (np.array_equal(corr.fwd, f_idx) and np.array_equal(corr.bwd, b_idx)):
            bad.append((i, "correspondence"))
        # every per-point term is identical; only the final mean is a float reduction
        ref_ch = np.mean(f_d) + np.mean(b_d)
        if chamfer(pts, other).value != ref_ch or abs(ref_ch - (np.sum(f_d) / len(f_d) + np.sum(b_d) / len(b_d))) > 1e-14 * ref_ch:
            bad.append((i, "chamfer"))
        if hausdorff(pts, other).value != f_d.max():
            bad.append((i, "hausdorff"))
        m = int(1 + i % len(pts))
        if fps_indices(pts, m).tolist() != oracles.fps_brute(pts, m):
            bad.append((i, "fps"))
    secs = time.perf_counter() - t0
    ok = not bad and secs < 30
    record(1, ok, f"200 clouds, mismatches={bad[:5]}, {secs:.1f} s (limit 30 s)")
    assert ok


# --- 2. gradient fidelity ---------------------------------------------------------------------


def test_c2_gradient_fidelity():
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    excluded = total = 0
    for seed in range(100):
        for name, res in all_checks(1000 + seed).items():
            worst[name] = max(worst.get(name, 0.0), res.rel_err)
            excluded += res.excluded
            total += res.total
    secs = time.perf_counter() - t0
    ok = all(v < 1e-3 for v in worst.values()) and len(worst) == 8 and secs < 120
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    record(2, ok, f"max rel err {detail}; kink-excluded coords {excluded}/{total}; {secs:.1f} s (limit 120 s)")
    assert ok


# --- 3. geometry invariants -------------------------------------------------------------------


def _rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


def test_c3_geometry_invariants():
    rng = np.random.default_rng(7)
    notes = []

    # curvature stays in [0, 1], including clouds with coincident points
    lo, hi = np.inf, -np.inf
    for i in range(100):
        pts = rng.normal(size=(200, 3)) * rng.uniform(0.1, 2, size=3)
        if i % 5 == 0:
            pts[::7] = pts[0]
        nb = knn(pts, 16)
        kap = curvature(pts, nb, local_frames(pts, nb))
        lo, hi = min(lo, kap.min()), max(hi, kap.max())
    bounded = 0.0 <= lo and hi <= 1.0
    notes.append(f"kappa in [{lo:.3f}, {hi:.3f}]")

    # planar clouds: exactly zero when the plane is a coordinate plane,
    # rounding level when it is tilted
    plane_max = 0.0
    exact = True
    for i in range(20):
        xy = rng.uniform(-1, 1, size=(300, 2))
        flat = np.column_stack([xy, np.full(300, rng.normal())])
        nb = knn(flat, 16)
        exact &= bool(np.all(curvature(flat, nb, local_frames(flat, nb)) == 0) and regularity(flat) == 0)
        tilted = flat @ _rotation(rng).T + rng.normal(size=3)
        nb = knn(tilted, 16)
        plane_max = max(plane_max, curvature(tilted, nb, local_frames(tilted, nb)).max(), regularity(tilted))
    planar = exact and plane_max < 1e-12
    notes.append(f"planar: axis-aligned exact={exact}, tilted max {plane_max:.1e}")

    # rigid motions
    rigid = 0.0
    for _ in range(30):
        pts = rng.normal(size=(256, 3)) * rng.uniform(0.3, 1.5, size=3)
        moved = pts @ _rotation(rng).T + rng.normal(scale=3, size=3)
        nb0, nb1 = knn(pts, 16), knn(moved, 16)
        k0 = curvature(pts, nb0, local_frames(pts, nb0))
        k1 = curvature(moved, nb1, local_frames(moved, nb1))
        rigid = max(rigid, np.abs(k0 - k1).max(), abs(regularity(pts) - regularity(moved)))
    notes.append(f"rigid max diff {rigid:.1e}")

    # 1e5 jitter samples
    ortho = 0.0
    for _ in range(100):
        pts = rng.normal(size=(1000, 3)) * rng.uniform(0.3, 1.5, size=3)
        fr = local_frames(pts, knn(pts, 16))
        j = sample_jitter(pts, fr, 0.02, rng)
        ortho = max(ortho, np.abs(np.einsum("ij,ij->i", j, fr.normals)).max())
    notes.append(f"jitter |<j,n>| max {ortho:.1e}")

    # 1e4 symmetric matrices
    a = rng.normal(size=(10_000, 3, 3)) * rng.uniform(1e-3, 1e3, size=(10_000, 1, 1))
    a = a + np.swapaxes(a, 1, 2)
    w, v = eigh3_batch(a)
    recon = (v * w[:, None, :]) @ np.swapaxes(v, 1, 2)
    resid = np.linalg.norm(a - recon, axis=(1, 2)) / (1.0 + np.linalg.norm(a, axis=(1, 2)))
    notes.append(f"eigh3 residual / (1 + |M|) max {resid.max():.1e}")

    ok = bounded and planar and rigid < 1e-9 and ortho < 1e-9 and resid.max() < 1e-8
    record(3, ok, "; ".join(notes))
    assert ok


# --- 4. classifier --------------------------------------------------------------------------


def test_c4_classifier(trained, dataset):
    model, rep, cpu, wall = trained
    rng = np.random.default_rng(0)
    perm_exact = all(
        np.array_equal(forward(model, x[rng.permutation(len(x))]), forward(model, x)) for x in dataset.test_points[:40]
    )
    ok = rep.test_accuracy >= 0.95 and wall < 600 and perm_exact
    record(4, ok, f"test acc {rep.test_accuracy:.4f} (>= 0.95), train {wall:.0f} s wall / {cpu:.0f} s cpu (limit 600 s), permutation exact={perm_exact}")
    assert ok


# --- 5./6. headline success and the outlier-removal trend -------------------------------------------


def test_c5_targeted_success(trained, headline):
    insts, results = headline
    rate = attack_success_rate(results, trained[0], 0.0)
    ok = len(results) == N_HEADLINE and rate >= 0.95
    record(5, ok, f"targeted success at drop 0: {rate:.2%} over {len(results)} clouds (>= 95%)")
    assert ok


def test_c6_defense_trend(trained, headline):
    _, results = headline
    rates = [attack_success_rate(results, trained[0], q) for q in DROP_RATIOS]
    ok = all(b <= a for a, b in zip(rates, rates[1:]))
    series = " ".join(f"{100 * q:g}%:{r:.2f}" for q, r in zip(DROP_RATIOS, rates))
    record(6, ok, f"success by drop ratio ({len(results)} clouds) {series}")
    assert ok


# --- 7./8. ablation ordering ------------------------------------------------------------------------


def test_c7_regularity_ordering(ablation):
    r = {name: rep.mean_regularity for name, rep in ablation.items()}
    ids = {name: [(row.id, row.target) for row in rep.rows] for name, rep in ablation.items()}
    same = all(v == ids["full"] for v in ids.values())
    ok = same and all(r["full"] < v for name, v in r.items() if name != "full")
    record(7, ok, "mean R " + ", ".join(f"{k}={v:.4f}" for k, v in r.items()) + f"; identical instances={same}")
    assert ok


def test_c8_robustness_ordering(ablation):
    j = DROP_RATIOS.index(0.02)
    full, l2 = ablation["full"].success_rates[j], ablation["degenerate_l2"].success_rates[j]
    ok = full > l2
    record(8, ok, f"success at 2% drop: full {full:.2f} vs L2 {l2:.2f} ({N_ABLATION} clouds)")
    assert ok


# --- 9. IterTanJit under tangent re-sampling ------------------------------------------------------------


def test_c9_itertanjit(trained, dataset):
    model = trained[0]
    insts = select_instances(model, dataset.test_points, dataset.test_labels, N_UNTARGETED, seed=1, targeted=False)
    cfg = with_overrides(ATTACK, untargeted=True)
    plain = run_attacks(model, insts, cfg)
    jit = run_attacks(model, insts, with_overrides(cfg, itertanjit=True))
    r_plain = resample_robustness(plain, model, 0.02, trials=5, seed=0, k=cfg.k)
    r_jit = resample_robustness(jit, model, 0.02, trials=5, seed=0, k=cfg.k)

    x, y = insts[0].points, insts[0].label
    zero = with_overrides(cfg, sigma=0.0)
    a = geoa3_attack(model, x, zero, true_label=y)
    b = itertanjit_attack(model, x, zero, true_label=y)
    identical = a == b and a.loss_trace == b.loss_trace

    ok = r_jit > r_plain and identical
    record(9, ok, f"re-sampling survival sigma=0.02: IterTanJit {r_jit:.2f} vs plain {r_plain:.2f} ({N_UNTARGETED} clouds); sigma=0 bit-identical={identical}")
    assert ok


# --- 10. end-to-end determinism -----------------------------------------------------------------------


def _pipeline(root: Path) -> None:
    data, model, att = root / "data", root / "model.g3pc", root / "attack"
    steps = [
        ["gen-data", "--out", str(data), "--train-per-class", "20", "--test-per-class", "3", "--n-points", "128", "--seed", "5"],
        ["train", "--data", str(data), "--out", str(model), "--epochs", "3", "--seed", "5"],
        ["attack", "--model", str(model), "--data", str(data), "--count", "3", "--iters", "40", "--binary-steps", "3",
         "--seed", "5", "--out", str(att)],
        ["eval", "--model", str(model), "--results", str(att / "results.json"), "--out", str(root / "report.json"),
         "--resample-sigma", "0.02"],
    ]
    for argv in steps:
        assert cli(argv) == 0, argv


def _tree(root: Path):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_c10_determinism(tmp_path):
    a, b = tmp_path / "run1", tmp_path / "run2"
    _pipeline(a)
    _pipeline(b)
    files = _tree(a)
    same_names = files == _tree(b)
    diff = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)] if same_names else ["<file sets differ>"]
    ok = same_names and not diff and len(files) > 0
    record(10, ok, f"{len(files)} files compared across two runs, differing: {diff[:5]}")
    assert ok
