"""Fitting objective and its analytic gradient.

The variable vector is laid out as ``[zeta(3), beta(10), psi(10), theta(3N)]``
(``PoseParams.to_vector``), optionally followed by the 3 components of the
camera translation during calibration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import kernels
from .skeleton import (
    N_EXPR,
    N_SHAPE,
    CameraParams,
    KinematicTree,
    Keypoints2D,
    PoseParams,
    ProjectionError,
    fk_state,
)

TERMS = ("joint", "prior", "unseen", "upright", "smooth")


@dataclass(frozen=True)
class RobustConfig:
    """Geman-McClure scale per term: pixels, radians, metres."""

    joint: float = 100.0
    angle: float = 0.3
    depth: float = 0.05

    def __post_init__(self):
        if min(self.joint, self.angle, self.depth) <= 0:
            raise ValueError("robust scales must be positive")


@dataclass(frozen=True)
class FitWeights:
    unseen: float = 3e5
    upright: float = 7e5
    smooth: float = 1e3
    unseen_threshold: float = 0.65
    prior_weight: float = 1e-3
    limit_weight: float = 1e2
    shape_weight: float = 0.1
    expr_weight: float = 1e-3
    sigma: RobustConfig = field(default_factory=RobustConfig)
    landmark_scale: dict = field(default_factory=dict)  # named landmark set -> multiplier

    def __post_init__(self):
        vals = (self.unseen, self.upright, self.smooth, self.prior_weight, self.limit_weight, self.shape_weight, self.expr_weight)
        if min(vals) < 0:
            raise ValueError("fit weights must be nonnegative")
        if not 0.0 <= self.unseen_threshold <= 1.0:
            raise ValueError("unseen threshold must lie in [0, 1]")
        if any(v < 0 for v in self.landmark_scale.values()):
            raise ValueError("landmark set multipliers must be nonnegative")

    def replace(self, **kw) -> "FitWeights":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "unseen", "upright", "smooth", "unseen_threshold", "prior_weight", "limit_weight", "shape_weight", "expr_weight"
        )}
        d["sigma"] = {"joint": self.sigma.joint, "angle": self.sigma.angle, "depth": self.sigma.depth}
        d["landmark_scale"] = dict(sorted(self.landmark_scale.items()))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitWeights":
        d = dict(d)
        sig = d.pop("sigma", None)
        if sig is not None:
            d["sigma"] = RobustConfig(**sig)
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FrameObservation:
    keypoints: Keypoints2D
    prev_theta: np.ndarray | None = None

    def unseen_landmarks(self, threshold: float) -> np.ndarray:
        return classify_unseen(self.keypoints, threshold)


# --------------------------------------------------------------------------
# robust loss
# --------------------------------------------------------------------------


def geman_mcclure(e, sigma: float):
    """sigma^2 e^2 / (sigma^2 + e^2); bounded by sigma^2."""
    e2 = np.square(e)
    s2 = sigma * sigma
    return s2 * e2 / (s2 + e2)


def _gm_sq(sq, sigma: float):
    """Value and d/d(e^2) of the Geman-McClure loss given squared residuals."""
    s2 = sigma * sigma
    den = s2 + sq
    return s2 * sq / den, (s2 * s2) / (den * den)


# --------------------------------------------------------------------------
# unseen joints
# --------------------------------------------------------------------------


def landmark_weights(tree: KinematicTree, w: FitWeights | None = None) -> np.ndarray:
    """Per-landmark weight gamma, with any set multipliers applied."""
    out = np.array(tree.landmark_weight)
    if w is not None:
        for key, factor in w.landmark_scale.items():
            out[tree.named(key)] *= factor
    return out


def classify_unseen(kps: Keypoints2D, threshold: float) -> np.ndarray:
    """Landmark indices whose confidence is strictly below ``threshold``."""
    return np.flatnonzero(kps.confidence < threshold)


@lru_cache(maxsize=16)
def _moved_landmarks(tree: KinematicTree) -> np.ndarray:
    """(N, J) mask: rotating joint a displaces landmark l."""
    n, j = tree.n_joints, tree.n_landmarks
    moves = np.zeros((n, j), dtype=bool)
    for l in range(j):
        owner = int(tree.landmark_joint[l])
        if np.any(tree.landmark_offset[l] != 0):
            moves[owner, l] = True
        a = int(tree.parents[owner])
        while a >= 0:
            moves[a, l] = True
            a = int(tree.parents[a])
    return moves


def unseen_joints(tree: KinematicTree, landmarks) -> np.ndarray:
    """Map unseen landmarks into theta space.

    A joint is unseen when every landmark its rotation moves is unseen.
    Joints that move no landmark at all are never reported.
    """
    mask = np.zeros(tree.n_landmarks, dtype=bool)
    mask[np.asarray(landmarks, dtype=np.int64)] = True
    moves = _moved_landmarks(tree)
    has_any = moves.any(axis=1)
    all_unseen = ~np.any(moves & ~mask[None, :], axis=1)
    return np.flatnonzero(has_any & all_unseen)


# --------------------------------------------------------------------------
# individual terms (value only)
# --------------------------------------------------------------------------


def joint_loss(pose: PoseParams, tree: KinematicTree, cam: CameraParams, kps: Keypoints2D, sigma: float = 100.0) -> float:
    return float(_image_terms(pose, tree, cam, kps, None, sigma, 1.0, need_grad=False)["joint"])


def prior_loss(pose: PoseParams, tree: KinematicTree, weights: FitWeights | None = None) -> float:
    return float(_prior(pose, tree, weights or FitWeights())[0])


def unseen_loss(theta, theta_hat, joints, sigma: float = 0.3) -> float:
    d = np.asarray(theta, dtype=float).reshape(-1, 3) - np.asarray(theta_hat, dtype=float).reshape(-1, 3)
    idx = np.asarray(joints, dtype=np.int64)
    if idx.size == 0:
        return 0.0
    return float(np.sum(geman_mcclure(np.linalg.norm(d[idx], axis=1), sigma)))


def upright_loss(joints_cam, upright, sigma: float = 0.05) -> float:
    d = np.asarray(joints_cam, dtype=float)[np.asarray(upright, dtype=np.int64), 2]
    iu, ju = np.triu_indices(d.size, k=1)
    return float(np.sum(geman_mcclure(d[iu] - d[ju], sigma)))


def smooth_loss(theta, theta_pre, gamma, sigma: float = 0.3) -> float:
    if theta_pre is None:
        return 0.0
    d = np.asarray(theta, dtype=float).reshape(-1, 3) - np.asarray(theta_pre, dtype=float).reshape(-1, 3)
    return float(np.sum(np.asarray(gamma) * geman_mcclure(np.linalg.norm(d, axis=1), sigma)))


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------


def _image_terms(pose, tree, cam, kps, upright_idx, sigma_px, sigma_depth, need_grad=True, gamma=None):
    st = fk_state(tree, pose)
    xc = st.landmarks @ cam.rotation.T + cam.translation
    z = xc[:, 2]
    if np.any(~(z > 1e-6)):
        i = int(np.flatnonzero(~(z > 1e-6))[0])
        raise ProjectionError(f"{tree.landmark_names[i]} has non-positive depth {z[i]:.3g}")
    uv = cam.focal * xc[:, :2] / z[:, None] + cam.principal
    r = uv - kps.coords
    sq = np.sum(r * r, axis=1)
    rho, drho = _gm_sq(sq, sigma_px)
    gamma = tree.landmark_weight if gamma is None else gamma
    w = gamma * kps.confidence / tree.n_landmarks
    out = {"joint": float(np.sum(w * rho)), "upright": 0.0}
    g_up = None
    if upright_idx is not None and len(upright_idx) > 1:
        d = z[upright_idx]
        iu, ju = np.triu_indices(d.size, k=1)
        e = d[iu] - d[ju]
        val, de2 = _gm_sq(e * e, sigma_depth)
        out["upright"] = float(np.sum(val))
        if need_grad:
            ge = 2.0 * e * de2
            g_up = np.zeros(d.size)
            np.add.at(g_up, iu, ge)
            np.add.at(g_up, ju, -ge)
    if not need_grad:
        return out
    g_uv = (w * drho * 2.0)[:, None] * r
    out["_state"] = st
    out["_g_joint_cam"] = _uv_to_cam(g_uv, xc, cam.focal)
    g_up_cam = np.zeros_like(xc)
    if g_up is not None:
        g_up_cam[upright_idx, 2] = g_up
    out["_g_upright_cam"] = g_up_cam
    return out


def _uv_to_cam(g_uv, xc, f):
    z = xc[:, 2]
    g = np.empty_like(xc)
    g[:, 0] = g_uv[:, 0] * f / z
    g[:, 1] = g_uv[:, 1] * f / z
    g[:, 2] = -(g_uv[:, 0] * f * xc[:, 0] + g_uv[:, 1] * f * xc[:, 1]) / (z * z)
    return g


def _backprop_landmarks(tree, pose, st, cam, g_cam):
    """Pull a camera-frame landmark gradient back to (pose vector, translation)."""
    n = tree.n_joints
    g_world = g_cam @ cam.rotation
    g_zeta, g_theta, force = kernels.pose_vjp(
        tree.parents,
        st.world_rot,
        st.world_pos,
        np.ascontiguousarray(pose.theta),
        np.ascontiguousarray(pose.zeta),
        st.root_rot,
        tree.landmark_joint,
        st.landmarks,
        np.ascontiguousarray(g_world),
    )
    par_rot = np.empty((n, 3, 3))
    par_rot[0] = np.eye(3)
    par_rot[1:] = st.world_rot[tree.parents[1:]]
    q = np.einsum("nij,nj,ni->n", par_rot, tree.rest_offsets, force) * st.scale_active
    g_beta = tree.shape_basis.T @ q
    g = np.concatenate([g_zeta, g_beta, np.zeros(N_EXPR), g_theta.ravel()])
    return g, g_cam.sum(axis=0)


def _prior(pose: PoseParams, tree: KinematicTree, w: FitWeights):
    th = pose.theta
    lo, hi = tree.joint_limits[:, 0], tree.joint_limits[:, 1]
    over = np.maximum(th - hi, 0.0)
    under = np.maximum(lo - th, 0.0)
    val = (
        w.prior_weight * np.sum(th * th)
        + w.limit_weight * np.sum(over * over + under * under)
        + w.shape_weight * np.sum(pose.beta**2)
        + w.expr_weight * np.sum(pose.psi**2)
    )
    g_th = 2 * w.prior_weight * th + 2 * w.limit_weight * (over - under)
    g = np.concatenate([np.zeros(3), 2 * w.shape_weight * pose.beta, 2 * w.expr_weight * pose.psi, g_th.ravel()])
    return float(val), g


def _angle_term(theta, ref, joints, gamma, sigma):
    n = theta.shape[0]
    g = np.zeros((n, 3))
    idx = np.asarray(joints, dtype=np.int64)
    if idx.size == 0:
        return 0.0, g
    d = theta[idx] - ref[idx]
    val, de2 = _gm_sq(np.sum(d * d, axis=1), sigma)
    gam = np.ones(idx.size) if gamma is None else np.asarray(gamma)[idx]
    g[idx] = (gam * de2 * 2.0)[:, None] * d
    return float(np.sum(gam * val)), g


def _theta_grad(g_theta, n):
    return np.concatenate([np.zeros(3 + N_SHAPE + N_EXPR), g_theta.ravel()])


@dataclass(frozen=True, eq=False)
class ObjectiveEval:
    value: float
    grad: np.ndarray  # d/d pose vector
    grad_translation: np.ndarray
    terms: dict  # unweighted term values
    term_grads: dict | None = None  # unweighted (pose grad, translation grad) per term


def evaluate(
    pose: PoseParams,
    tree: KinematicTree,
    cam: CameraParams,
    obs: FrameObservation,
    w: FitWeights,
    keep_terms: bool = False,
) -> ObjectiveEval:
    """Weighted objective, its gradient, and the per-term breakdown."""
    kps = obs.keypoints
    up_idx = tree.named("upright") if "upright" in tree.sets else None
    gamma = landmark_weights(tree, w) if w.landmark_scale else None
    img = _image_terms(pose, tree, cam, kps, up_idx, w.sigma.joint, w.sigma.depth, gamma=gamma)
    st = img["_state"]
    n = tree.n_joints

    g_joint, t_joint = _backprop_landmarks(tree, pose, st, cam, img["_g_joint_cam"])
    g_up, t_up = _backprop_landmarks(tree, pose, st, cam, img["_g_upright_cam"])
    prior_val, g_prior = _prior(pose, tree, w)

    unseen = unseen_joints(tree, obs.unseen_landmarks(w.unseen_threshold))
    un_val, g_un = _angle_term(pose.theta, np.zeros((n, 3)), unseen, None, w.sigma.angle)
    if obs.prev_theta is not None:
        prev = np.asarray(obs.prev_theta, dtype=float).reshape(n, 3)
        sm_val, g_sm = _angle_term(pose.theta, prev, np.arange(n), tree.joint_weight, w.sigma.angle)
    else:
        sm_val, g_sm = 0.0, np.zeros((n, 3))

    terms = {
        "joint": img["joint"],
        "prior": prior_val,
        "unseen": un_val,
        "upright": img["upright"],
        "smooth": sm_val,
    }
    value = terms["joint"] + prior_val + w.unseen * un_val + w.upright * terms["upright"] + w.smooth * sm_val
    grad = g_joint + g_prior + w.unseen * _theta_grad(g_un, n) + w.upright * g_up + w.smooth * _theta_grad(g_sm, n)
    g_t = t_joint + w.upright * t_up
    term_grads = None
    if keep_terms:
        zero_t = np.zeros(3)
        term_grads = {
            "joint": (g_joint, t_joint),
            "prior": (g_prior, zero_t),
            "unseen": (_theta_grad(g_un, n), zero_t),
            "upright": (g_up, t_up),
            "smooth": (_theta_grad(g_sm, n), zero_t),
        }
    return ObjectiveEval(float(value), grad, g_t, terms, term_grads)


def total_objective(
    pose: PoseParams, tree: KinematicTree, cam: CameraParams, obs: FrameObservation, w: FitWeights
) -> tuple[float, np.ndarray]:
    """Weighted objective value and gradient w.r.t. ``pose.to_vector()``."""
    ev = evaluate(pose, tree, cam, obs, w)
    return ev.value, ev.grad
