from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import gm, objective_case, objective_fd, rel_err
from signavatar.objective import (
    TERMS,
    FitWeights,
    FrameObservation,
    RobustConfig,
    classify_unseen,
    evaluate,
    geman_mcclure,
    joint_loss,
    prior_loss,
    smooth_loss,
    total_objective,
    unseen_joints,
    unseen_loss,
    upright_loss,
)
from signavatar.skeleton import Keypoints2D, project_pose, rest_pose
from signavatar.synthetic import random_pose


def exact_obs(tree, cam, pose, conf=1.0, prev=None):
    return FrameObservation(Keypoints2D(project_pose(tree, pose, cam), np.full(tree.n_landmarks, conf)), prev)


# robust loss ---------------------------------------------------------------


def test_gm_examples():
    assert geman_mcclure(0.0, 2.0) == 0.0
    assert geman_mcclure(2.0, 2.0) == pytest.approx(2.0)  # sigma^2 / 2
    assert geman_mcclure(20.0, 2.0) == pytest.approx(100 * 4 / 101)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(0.01, 100))
def test_gm_even_monotone_bounded(a, b, sigma):
    assert geman_mcclure(a, sigma) == geman_mcclure(-a, sigma)
    assert geman_mcclure(a, sigma) <= sigma**2
    lo, hi = sorted((abs(a), abs(b)))
    assert geman_mcclure(lo, sigma) <= geman_mcclure(hi, sigma) + 1e-12


def test_robust_scales_must_be_positive():
    with pytest.raises(ValueError):
        RobustConfig(joint=0.0)


# unseen classification -------------------------------------------------------


def test_classify_unseen_strict_threshold():
    kp = Keypoints2D(np.zeros((3, 2)), np.array([0.64, 0.65, 1.0]))
    assert classify_unseen(kp, 0.65).tolist() == [0]
    assert classify_unseen(Keypoints2D(np.zeros((3, 2)), np.ones(3)), 0.65).size == 0


def test_unseen_joints_need_every_moved_landmark_unseen(tree):
    hand = tree.named("left_hand")
    got = set(unseen_joints(tree, hand).tolist())
    want = set(tree.joint_group("left_hand").tolist()) | {tree.joint_names.index("left_wrist")}
    assert got == want  # the elbow also moves the seen wrist-to-elbow landmarks
    assert unseen_joints(tree, []).size == 0


# joint loss ------------------------------------------------------------------


def test_joint_loss_zero_at_exact_projection(tree, cam, rng):
    pose = random_pose(tree, rng)
    assert joint_loss(pose, tree, cam, exact_obs(tree, cam, pose).keypoints) == 0.0


def test_joint_loss_zero_confidence(tree, cam, rng):
    kp = Keypoints2D(rng.normal(500, 100, (tree.n_landmarks, 2)), np.zeros(tree.n_landmarks))
    assert joint_loss(random_pose(tree, rng), tree, cam, kp) == 0.0


def test_joint_loss_single_active_landmark(tree, cam):
    pose = rest_pose(tree)
    uv = project_pose(tree, pose, cam)
    conf = np.zeros(tree.n_landmarks)
    k = int(np.flatnonzero(tree.landmark_weight == 1.0)[0])
    conf[k] = 1.0
    shifted = uv.copy()
    shifted[k] += [30.0, 40.0]
    got = joint_loss(pose, tree, cam, Keypoints2D(shifted, conf), sigma=100.0)
    assert got == pytest.approx(gm(50.0, 100.0) / tree.n_landmarks, rel=1e-12)


@given(st.floats(0.0, 1.0))
def test_joint_loss_scales_with_confidence(c):
    from signavatar.skeleton import default_camera, default_tree

    tree, cam = default_tree(), default_camera()
    rng = np.random.default_rng(3)
    pose = random_pose(tree, rng)
    base = rng.uniform(0.5, 1.0, tree.n_landmarks)
    uv = project_pose(tree, pose, cam) + rng.normal(0, 10, (tree.n_landmarks, 2))
    a = joint_loss(pose, tree, cam, Keypoints2D(uv, base * 0 + base))
    b = joint_loss(pose, tree, cam, Keypoints2D(uv, base * c))
    assert b == pytest.approx(c * a, rel=1e-12, abs=1e-300)


# prior ------------------------------------------------------------------------


def test_prior_examples(tree):
    assert prior_loss(rest_pose(tree), tree) == 0.0
    w = FitWeights(prior_weight=1.0, limit_weight=0.0, shape_weight=0.0, expr_weight=0.0)
    theta = np.zeros((tree.n_joints, 3))
    theta[5] = [0.1, -0.2, 0.05]
    assert prior_loss(rest_pose(tree).replace(theta=theta), tree, w) == pytest.approx(0.1**2 + 0.2**2 + 0.05**2)


def test_prior_hinge_past_limit(tree):
    w = FitWeights(prior_weight=0.0, limit_weight=1.0)
    j = int(np.argmax(tree.joint_limits[:, 1, 0] < np.pi))
    theta = np.zeros((tree.n_joints, 3))
    theta[j, 0] = tree.joint_limits[j, 1, 0] + 0.2
    assert prior_loss(rest_pose(tree).replace(theta=theta), tree, w) == pytest.approx(0.04)


# angle terms ---------------------------------------------------------------------


def test_unseen_loss_examples():
    theta = np.zeros((4, 3))
    assert unseen_loss(theta, np.zeros((4, 3)), []) == 0.0
    assert unseen_loss(theta, np.zeros((4, 3)), [1, 2]) == 0.0
    theta[2, 1] = 0.3
    assert unseen_loss(theta, np.zeros((4, 3)), [2], sigma=0.3) == pytest.approx(0.09 / 2)


def test_upright_loss_examples():
    pts = np.zeros((3, 3))
    pts[:, 2] = 2.0
    assert upright_loss(pts, [0, 1, 2]) == 0.0
    pts[1, 2] = 2.05
    assert upright_loss(pts, [0, 1], sigma=0.05) == pytest.approx(0.05**2 / 2)
    assert upright_loss(pts, [1]) == 0.0


@given(st.permutations([0, 1, 2, 3, 4]))
def test_upright_loss_permutation_invariant(order):
    pts = np.zeros((5, 3))
    pts[:, 2] = [2.0, 2.1, 1.95, 2.3, 2.02]
    assert upright_loss(pts, list(order)) == pytest.approx(upright_loss(pts, [0, 1, 2, 3, 4]), rel=1e-12)


def test_smooth_loss_examples():
    theta = np.zeros((3, 3))
    assert smooth_loss(theta, theta.copy(), np.ones(3)) == 0.0
    assert smooth_loss(theta, None, np.ones(3)) == 0.0
    prev = theta.copy()
    prev[0, 2] = 0.3
    assert smooth_loss(theta, prev, np.ones(3), sigma=0.3) == pytest.approx(0.09 / 2)


# total objective ------------------------------------------------------------------


def test_total_reduces_to_prior_when_data_agree(tree, cam, rng):
    pose = random_pose(tree, rng)
    obs = exact_obs(tree, cam, pose, prev=pose.theta)
    w = FitWeights(upright=0.0)
    val, _ = total_objective(pose, tree, cam, obs, w)
    assert val == pytest.approx(prior_loss(pose, tree, w), rel=1e-12)


def test_total_weight_zeroing(tree, cam, rng):
    pose, obs = objective_case(tree, cam, rng)
    w = FitWeights(unseen=0.0, upright=0.0, smooth=0.0)
    ev = evaluate(pose, tree, cam, obs, w)
    assert ev.value == pytest.approx(ev.terms["joint"] + ev.terms["prior"], rel=1e-12)


def test_terms_nonnegative(tree, cam, rng):
    for _ in range(10):
        pose, obs = objective_case(tree, cam, rng)
        ev = evaluate(pose, tree, cam, obs, FitWeights())
        assert all(ev.terms[t] >= 0 for t in TERMS)


def test_gradients_match_finite_differences(tree, cam, rng):
    w = FitWeights()
    for _ in range(3):
        pose, obs = objective_case(tree, cam, rng)
        ev = evaluate(pose, tree, cam, obs, w, keep_terms=True)
        fd = objective_fd(tree, cam, pose, obs, w)
        for t in TERMS:
            g = np.concatenate(ev.term_grads[t])
            assert rel_err(g, fd[t]) < 1e-4, t
        assert rel_err(np.concatenate([ev.grad, ev.grad_translation]), fd["total"]) < 1e-4


def test_landmark_scale_multiplies_set(tree, cam, rng):
    pose, obs = objective_case(tree, cam, rng)
    base = evaluate(pose, tree, cam, obs, FitWeights()).terms["joint"]
    scaled = evaluate(pose, tree, cam, obs, FitWeights(landmark_scale={"left_hand": 0.0})).terms["joint"]
    assert scaled < base


def test_weights_dict_round_trip():
    w = FitWeights(smooth=5.0, sigma=RobustConfig(joint=7.0), landmark_scale={"face": 0.5})
    assert FitWeights.from_dict(w.to_dict()) == w
