import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fd_cases import TERMS, adv_check, make_instance, term_check
from geoadv.errors import EmptyCloud, MismatchedK, SizeMismatch
from geoadv.geometry import curvature, knn, local_frames
from geoadv.losses import (
    GeoWeights,
    LossValue,
    chamfer,
    correspondence,
    curvature_consistency,
    geo_loss,
    hausdorff,
    l2_perturbation,
)


def P(*rows):
    return np.array(rows, dtype=float)


# --- worked examples -------------------------------------------------------------


def test_chamfer_examples():
    assert chamfer(P([1, 0, 0]), P([0, 0, 0])).value == 2.0
    lv = chamfer(P([0, 0, 0]), P([0, 0, 0], [2, 0, 0]))
    assert lv.value == 2.0
    # forward term contributes 0, backward gives 2*(0-2)/2 on the only point
    np.testing.assert_array_equal(lv.gradient, [[-2, 0, 0]])


def test_hausdorff_examples():
    lv = hausdorff(P([0, 0, 0], [0, 3, 0]), P([0, 0, 0]))
    assert lv.value == 9.0
    np.testing.assert_array_equal(lv.gradient, [[0, 0, 0], [0, 6, 0]])
    assert hausdorff(P([0, 0, 0]), P([0, 0, 0], [0, 3, 0])).value == 0.0


def test_hausdorff_ties_average():
    lv = hausdorff(P([1, 0, 0], [-1, 0, 0], [0, 0, 0]), P([0, 0, 0]))
    assert lv.value == 1.0
    np.testing.assert_array_equal(lv.gradient, [[1, 0, 0], [-1, 0, 0], [0, 0, 0]])


def test_l2_examples():
    assert abs(l2_perturbation(P([0, 0, 0.3]), P([0, 0, 0])).value - 0.09) < 1e-15
    lv = l2_perturbation(P([1, 0, 0], [0, 2, 0]), P([0, 0, 0], [0, 0, 0]))
    assert lv.value == 2.5
    np.testing.assert_array_equal(lv.gradient, [[1, 0, 0], [0, 2, 0]])
    with pytest.raises(SizeMismatch):
        l2_perturbation(P([0, 0, 0]), P([0, 0, 0], [1, 1, 1]))


def test_empty_clouds_raise():
    e = np.zeros((0, 3))
    for fn in (chamfer, hausdorff):
        with pytest.raises(EmptyCloud):
            fn(e, P([0, 0, 0]))
        with pytest.raises(EmptyCloud):
            fn(P([0, 0, 0]), e)


def test_identical_clouds_give_zero():
    inst = make_instance(0)
    b = inst.benign
    nbr = knn(b, 16)
    corr = correspondence(b, b)
    for lv in (
        chamfer(b, b),
        hausdorff(b, b),
        curvature_consistency(b, b, inst.frames, nbr, corr),
        geo_loss(b, b, inst.frames, nbr),
        l2_perturbation(b, b),
    ):
        assert lv.value == 0.0
        assert np.all(lv.gradient == 0)


def test_curvature_mismatched_k():
    inst = make_instance(1)
    with pytest.raises(MismatchedK):
        curvature_consistency(inst.adv, inst.benign, inst.frames, knn(inst.adv, 8))


def test_curvature_lifted_point_pulled_back():
    g = np.linspace(-1, 1, 11)
    flat = np.array([[x, y, 0.0] for x in g for y in g])
    centre = 60
    assert np.allclose(flat[centre], 0)
    adv = flat.copy()
    adv[centre, 2] = 0.05
    bn = knn(flat, 8)
    frames = local_frames(flat, bn)
    lv = curvature_consistency(adv, flat, frames, knn(adv, 8))
    assert lv.value > 0
    # a small step against the gradient reduces the lift
    assert lv.gradient[centre, 2] > 0
    step = adv.copy()
    step[centre, 2] -= 1e-3 * np.sign(lv.gradient[centre, 2])
    assert curvature_consistency(step, flat, frames, knn(adv, 8)).value < lv.value


def test_geo_loss_composition():
    inst = make_instance(2)
    args = (inst.adv, inst.benign, inst.frames, inst.nbr, inst.corr)
    total = geo_loss(*args)
    parts = (
        chamfer(inst.adv, inst.benign).value
        + 0.1 * hausdorff(inst.adv, inst.benign).value
        + 1.0 * curvature_consistency(*args).value
    )
    assert abs(total.value - parts) < 1e-12
    only = geo_loss(*args, weights=GeoWeights(0.0, 0.0))
    c = chamfer(inst.adv, inst.benign)
    assert only.value == c.value
    np.testing.assert_array_equal(only.gradient, c.gradient)


def test_weights_validation():
    with pytest.raises(ValueError):
        GeoWeights(-1.0, 1.0)
    with pytest.raises(ValueError):
        GeoWeights(0.1, float("nan"))


def test_lossvalue_algebra():
    a = LossValue(1.0, np.ones((2, 3)))
    b = 2 * a + a
    assert b.value == 3.0 and np.all(b.gradient == 3)


# --- oracle agreement --------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_chamfer_hausdorff_match_oracles(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(40, 3))
    b = rng.normal(size=(55, 3))
    corr = correspondence(a, b)
    assert corr.fwd.tolist() == oracles.nearest(a, b)[0]
    assert corr.bwd.tolist() == oracles.nearest(b, a)[0]
    assert abs(chamfer(a, b).value - oracles.chamfer(a, b)) < 1e-12
    assert hausdorff(a, b).value == oracles.hausdorff(a, b)


# --- gradients vs finite differences ------------------------------------------------


@pytest.mark.parametrize("name", TERMS + ("l2",))
@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(name, seed):
    res = term_check(name, make_instance(100 + seed))
    assert res.rel_err < 1e-3
    assert res.excluded < res.total // 20


@pytest.mark.parametrize("regularizer", ["geometry", "degenerate_l2"])
@pytest.mark.parametrize("untargeted", [False, True])
def test_attack_objective_gradient_fd(regularizer, untargeted):
    for seed in range(3):
        res = adv_check(seed, regularizer, untargeted)
        assert res.rel_err < 1e-3


def test_sign_kinks_are_detected():
    # a neighbour lying exactly in the tangent plane sits on the |cos| kink
    inst = make_instance(5)
    i, j = 0, inst.nbr.neighbors[0, 0]
    n = inst.frames.normals[inst.corr.fwd[i]]
    d = inst.adv[j] - inst.adv[i]
    inst.adv[j] -= (d @ n) * n
    inst.nbr = knn(inst.adv, 16)
    if inst.nbr.neighbors[0, 0] != j or not np.array_equal(correspondence(inst.adv, inst.benign).fwd, inst.corr.fwd):
        pytest.skip("perturbation changed the frozen state")
    assert term_check("curvature", inst).excluded > 0


# --- properties ----------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(30, 3))
    b = rng.normal(size=(25, 3))
    pa, pb = rng.permutation(30), rng.permutation(25)
    assert abs(chamfer(a, b).value - chamfer(a[pa], b[pb]).value) < 1e-12
    assert hausdorff(a, b).value == hausdorff(a[pa], b[pb]).value


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_rigid_equivariance(seed):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    rot = q * np.sign(np.diag(r))
    t = rng.normal(size=3)
    inst = make_instance(seed % 1000, n=48, k=8)
    a2, b2 = inst.adv @ rot.T + t, inst.benign @ rot.T + t
    bn2 = knn(b2, 8)
    fr2 = local_frames(b2, bn2)
    if not (np.array_equal(bn2.neighbors, knn(inst.benign, 8).neighbors)
            and np.array_equal(knn(a2, 8).neighbors, inst.nbr.neighbors)):
        return
    corr2 = correspondence(a2, b2)
    if not np.array_equal(corr2.fwd, inst.corr.fwd):
        return
    lv1 = geo_loss(inst.adv, inst.benign, inst.frames, inst.nbr, inst.corr, benign_curvature=inst.kappa)
    lv2 = geo_loss(a2, b2, fr2, knn(a2, 8), corr2, benign_curvature=curvature(b2, bn2, fr2))
    assert abs(lv1.value - lv2.value) < 1e-9
    np.testing.assert_allclose(lv1.gradient @ rot.T, lv2.gradient, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_hausdorff_bounds_forward_chamfer(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(20, 3))
    b = rng.normal(size=(15, 3))
    _, f = oracles.nearest(a, b)
    assert hausdorff(a, b).value >= np.mean(f) - 1e-15
    assert chamfer(a, b).value >= 0
