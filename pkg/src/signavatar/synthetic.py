"""Synthetic poses, sequences and keypoints for tests and the toy fixture."""

from __future__ import annotations

import numpy as np

from .skeleton import (
    CameraParams,
    Keypoints2D,
    KinematicTree,
    PoseParams,
    project_pose,
    rest_pose,
)

_LOWER = ("hip", "knee", "ankle", "foot")
_TORSO = ("pelvis", "spine1", "spine2", "spine3")


def joint_ranges(tree: KinematicTree, arm: float = 0.8, other: float = 0.3, twist: float = 0.1) -> np.ndarray:
    """(N, 3) half-widths of the sampling box for an upright signer.

    Torso and legs only twist about the vertical axis, arms move freely,
    everything else gets ``other`` rad per component. Boxes are clipped to
    the tree's joint limits.
    """
    half = np.zeros((tree.n_joints, 3))
    for i, name in enumerate(tree.joint_names):
        if name in _TORSO or any(k in name for k in _LOWER):
            half[i] = [0.0, twist, 0.0]
        elif "shoulder" in name or "elbow" in name:
            half[i] = arm
        else:
            half[i] = other
    lim = np.minimum(-tree.joint_limits[:, 0], tree.joint_limits[:, 1])
    return np.minimum(half, lim)


def random_pose(tree: KinematicTree, rng: np.random.Generator, **ranges) -> PoseParams:
    """Uniform draw from ``joint_ranges``; zeta, beta and psi stay zero."""
    half = joint_ranges(tree, **ranges)
    return rest_pose(tree).replace(theta=rng.uniform(-half, half))


def smooth_sequence(
    tree: KinematicTree, rng: np.random.Generator, n_frames: int, n_keys: int = 3, **ranges
) -> list[PoseParams]:
    """Piecewise-cosine blend between random key poses."""
    keys = [random_pose(tree, rng, **ranges).theta for _ in range(max(n_keys, 2))]
    out = []
    for t in np.linspace(0.0, len(keys) - 1.0, n_frames):
        k = min(int(t), len(keys) - 2)
        a = 0.5 - 0.5 * np.cos(np.pi * (t - k))
        out.append(rest_pose(tree).replace(theta=(1 - a) * keys[k] + a * keys[k + 1]))
    return out


def render_keypoints(
    tree: KinematicTree,
    poses,
    cam: CameraParams,
    noise_px: float = 0.0,
    rng: np.random.Generator | None = None,
    confidence: float = 1.0,
) -> list[Keypoints2D]:
    """Project poses to pixels, optionally adding isotropic Gaussian noise."""
    out = []
    for p in poses:
        uv = project_pose(tree, p, cam)
        if noise_px > 0:
            uv = uv + rng.normal(0.0, noise_px, uv.shape)
        out.append(Keypoints2D(uv, np.full(tree.n_landmarks, confidence)))
    return out


def occlude(kps: Keypoints2D, landmarks, confidence: float = 0.3, jitter_px: float = 0.0, rng=None) -> Keypoints2D:
    """Lower the confidence of some landmarks and optionally perturb them."""
    idx = np.asarray(landmarks, dtype=np.int64)
    coords = np.array(kps.coords)
    conf = np.array(kps.confidence)
    conf[idx] = confidence
    if jitter_px > 0:
        coords[idx] += rng.normal(0.0, jitter_px, (idx.size, 2))
    return Keypoints2D(coords, conf)


def coarticulation_dataset(
    tree: KinematicTree,
    rng: np.random.Generator,
    n: int,
    step: float = 0.8,
    frames_per_metre: float = 40.0,
    noise: float = 0.5,
):
    """Boundary-pose pairs whose transition length grows with their distance.

    The second pose perturbs the first by a random fraction (up to ``step``)
    of the sampling box, so the two boundaries are correlated the way
    consecutive signs are. Length is ``frames_per_metre`` times the mean
    connector-landmark displacement plus Gaussian noise, rounded, at least 0.
    """
    from .align import CoarticulationSample
    from .skeleton import forward_kinematics

    sc = tree.named("connector")
    half = joint_ranges(tree)
    out = []
    for _ in range(n):
        p = random_pose(tree, rng)
        q = p.replace(theta=p.theta + rng.uniform(-1, 1, p.theta.shape) * half * rng.uniform(0, step))
        a = forward_kinematics(tree, p)[sc]
        b = forward_kinematics(tree, q)[sc]
        d = float(np.mean(np.linalg.norm(a - b, axis=1)))
        length = int(max(0, np.rint(frames_per_metre * d + rng.normal(0.0, noise))))
        out.append(CoarticulationSample(a, length, b))
    return out
