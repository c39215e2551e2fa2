from __future__ import annotations

import numpy as np
import pytest

from signavatar.fitter import (
    CalibrationConfig,
    CalibrationError,
    SharedCalibration,
    Stage,
    StageSchedule,
    default_schedule,
    fit_frame,
    fit_video,
    precalibrate_video,
    stage_indices,
    subsample_indices,
)
from signavatar.objective import FrameObservation
from signavatar.skeleton import Keypoints2D, N_SHAPE, project_pose, rest_pose
from signavatar.synthetic import random_pose, render_keypoints


def reproj(tree, cam, pose, kp):
    return float(np.mean(np.linalg.norm(project_pose(tree, pose, cam) - kp.coords, axis=1)))


@pytest.fixture(scope="module")
def truth_calibration():
    from signavatar.skeleton import default_camera, default_tree

    tree, cam = default_tree(), default_camera()
    rng = np.random.default_rng(11)
    beta = rng.normal(0, 0.3, N_SHAPE)
    zeta = np.array([0.0, 0.15, 0.02])
    cam_true = cam.replace(translation=cam.translation + [0.05, -0.04, 0.3])
    pose = rest_pose(tree).replace(beta=beta, zeta=zeta)
    kp = render_keypoints(tree, [pose], cam_true)[0]
    return tree, cam, kp


# schedule ------------------------------------------------------------------


def test_default_schedule_budget_and_order():
    s = default_schedule()
    assert s.budget == 300
    assert [st.name for st in s.stages] == ["global", "shape", "body", "hands", "refine"]


def test_schedule_dict_round_trip():
    s = default_schedule()
    assert StageSchedule.from_dict(s.to_dict()).to_dict() == s.to_dict()


def test_stage_needs_budget():
    with pytest.raises(ValueError):
        Stage("x", ("theta",), 0)


def test_stage_variables_cover_theta(tree):
    idx = stage_indices(tree, ("theta",))
    assert idx.size == 3 * tree.n_joints


def test_subsample_is_uniform_and_capped():
    assert subsample_indices(3, 10).tolist() == [0, 1, 2]
    idx = subsample_indices(100, 10)
    assert idx.size == 10 and idx[0] == 0 and idx[-1] == 99


# calibration -------------------------------------------------------------------


def test_calibration_round_trip(truth_calibration):
    tree, cam, kp = truth_calibration
    sh = precalibrate_video([kp, kp, kp], tree, cam)
    pose = rest_pose(tree).replace(beta=sh.beta, zeta=sh.zeta)
    assert reproj(tree, sh.camera, pose, kp) < 1.0


def test_calibration_duplicates_equal_single_frame(truth_calibration):
    tree, cam, kp = truth_calibration
    one = precalibrate_video([kp], tree, cam)
    many = precalibrate_video([kp] * 4, tree, cam)
    assert np.array_equal(one.beta, many.beta)
    assert np.array_equal(one.zeta, many.zeta)
    assert np.array_equal(one.camera.translation, many.camera.translation)


def test_calibration_all_zero_confidence(tree, cam):
    kp = Keypoints2D(project_pose(tree, rest_pose(tree), cam), np.zeros(tree.n_landmarks))
    with pytest.raises(CalibrationError):
        precalibrate_video([kp], tree, cam)


def test_calibration_needs_frames(tree):
    with pytest.raises(CalibrationError):
        precalibrate_video([], tree)


def test_calibration_dict_round_trip(cam):
    sh = SharedCalibration(np.arange(N_SHAPE) * 0.1, [0.1, 0.2, 0.3], cam)
    back = SharedCalibration.from_dict(sh.to_dict())
    assert np.array_equal(back.beta, sh.beta) and np.array_equal(back.camera.translation, sh.camera.translation)


def test_calibration_config_controls_subsample(truth_calibration):
    tree, cam, kp = truth_calibration
    sh = precalibrate_video([kp] * 30, tree, cam, config=CalibrationConfig(max_frames=2, rigid_iters=5, shape_iters=5))
    assert np.all(np.isfinite(sh.beta))


# frames ---------------------------------------------------------------------------


def test_fit_frame_exact_projection(tree, cam):
    rng = np.random.default_rng(5)
    pose = random_pose(tree, rng)
    kp = render_keypoints(tree, [pose], cam)[0]
    sh = SharedCalibration(np.zeros(N_SHAPE), np.zeros(3), cam)
    res = fit_frame(FrameObservation(kp), sh, tree)
    assert reproj(tree, cam, res.pose, kp) < 2.0
    assert res.value <= res.initial_value


def test_fit_frame_all_unseen_stays_at_rest(tree, cam):
    rng = np.random.default_rng(6)
    kp = render_keypoints(tree, [random_pose(tree, rng)], cam, confidence=0.1)[0]
    sh = SharedCalibration(np.zeros(N_SHAPE), np.zeros(3), cam)
    res = fit_frame(FrameObservation(kp), sh, tree)
    assert np.max(np.abs(res.pose.theta)) < 1e-3


def test_fit_frame_from_truth_stays_there(tree, cam):
    rng = np.random.default_rng(8)
    pose = random_pose(tree, rng)
    kp = render_keypoints(tree, [pose], cam)[0]
    sh = SharedCalibration(np.zeros(N_SHAPE), np.zeros(3), cam)
    res = fit_frame(FrameObservation(kp, pose.theta), sh, tree)
    assert reproj(tree, cam, res.pose, kp) < 0.5
    assert res.value <= res.initial_value


def test_fit_frame_rejects_wrong_landmark_count(tree, cam):
    sh = SharedCalibration(np.zeros(N_SHAPE), np.zeros(3), cam)
    from signavatar.fitter import FitError

    with pytest.raises(FitError):
        fit_frame(FrameObservation(Keypoints2D(np.zeros((5, 2)), np.ones(5))), sh, tree)


# videos ---------------------------------------------------------------------------


def short_schedule():
    return StageSchedule((
        Stage("global", ("camera", "zeta"), 10),
        Stage("body", ("theta:body",), 20, {"sigma": {"joint": 1000.0}}),
        Stage("refine", ("theta", "psi"), 30),
    ))


def test_fit_video_constant_input(tree, cam):
    rng = np.random.default_rng(9)
    kp = render_keypoints(tree, [random_pose(tree, rng)], cam)[0]
    sh = SharedCalibration(np.zeros(N_SHAPE), np.zeros(3), cam)
    vf = fit_video([kp] * 4, tree, short_schedule(), shared=sh)
    th = np.stack([p.theta for p in vf.sign.frames])
    assert np.max(np.var(th, axis=0)) < 1e-4
    assert vf.sign.n_frames == 4 and len(vf.frames) == 4


def test_single_frame_video_equals_fit_frame(tree, cam):
    rng = np.random.default_rng(10)
    kp = render_keypoints(tree, [random_pose(tree, rng)], cam)[0]
    sh = SharedCalibration(np.zeros(N_SHAPE), np.zeros(3), cam)
    vf = fit_video([kp], tree, short_schedule(), shared=sh)
    ff = fit_frame(FrameObservation(kp), sh, tree, short_schedule())
    # the dictionary stores float32 parameters
    assert np.array_equal(vf.sign.frames[0].theta, ff.pose.theta.astype(np.float32).astype(float))
    assert vf.frames[0].value == ff.value


def test_fit_video_calibrates_once(tree, cam):
    rng = np.random.default_rng(12)
    kps = render_keypoints(tree, [random_pose(tree, rng) for _ in range(2)], cam)
    vf = fit_video(kps, tree, short_schedule(), camera=cam)
    for p in vf.sign.frames:
        assert np.array_equal(p.beta, vf.sign.frames[0].beta)
        assert np.array_equal(p.zeta, vf.sign.frames[0].zeta)
    assert vf.sign.camera is vf.shared.camera


def test_fit_video_empty(tree):
    from signavatar.fitter import FitError

    with pytest.raises(FitError):
        fit_video([], tree)
