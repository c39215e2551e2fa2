"""Multi-stage per-frame fitting, shared calibration and whole-video fitting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .lbfgs import LbfgsConfig, OptimizationError, lbfgs_minimize
from .objective import FitWeights, FrameObservation, RobustConfig, evaluate, landmark_weights, unseen_joints
from .skeleton import (
    N_EXPR,
    N_SHAPE,
    CameraParams,
    KinematicTree,
    PoseParams,
    ProjectionError,
    canonicalize_aa,
    default_camera,
    fk_state,
    rest_pose,
)

log = logging.getLogger(__name__)

# Variable groups: "zeta", "beta", "psi", "camera" (translation) and
# "theta" / "theta:<joint set>" for per-joint rotations.
SHARED_GROUPS = ("zeta", "beta", "camera")


class FitError(RuntimeError):
    """Fitting failed; ``frame`` is the index of the offending frame when known."""

    def __init__(self, msg, frame: int | None = None):
        super().__init__(msg if frame is None else f"frame {frame}: {msg}")
        self.frame = frame


class CalibrationError(FitError):
    pass


@dataclass(frozen=True)
class Stage:
    name: str
    variables: tuple[str, ...]
    iterations: int
    weights: dict = field(default_factory=dict)  # FitWeights overrides

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        if self.iterations < 1:
            raise ValueError(f"stage {self.name!r} needs a budget of at least one iteration")
        if not self.variables:
            raise ValueError(f"stage {self.name!r} has no variables")


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple[Stage, ...]
    lbfgs: LbfgsConfig = field(default_factory=lambda: LbfgsConfig(gtol=1e-7, ftol=1e-13))

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("schedule needs at least one stage")

    @property
    def budget(self) -> int:
        return sum(s.iterations for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "stages": [
                {"name": s.name, "variables": list(s.variables), "iterations": s.iterations, "weights": dict(s.weights)}
                for s in self.stages
            ],
            "lbfgs": {k: getattr(self.lbfgs, k) for k in ("memory", "max_iters", "gtol", "ftol", "c1", "c2", "max_ls")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageSchedule":
        stages = tuple(
            Stage(s["name"], tuple(s["variables"]), int(s["iterations"]), dict(s.get("weights", {})))
            for s in d["stages"]
        )
        lb = d.get("lbfgs")
        return cls(stages, LbfgsConfig(**lb)) if lb else cls(stages)


WIDE_SIGMA = {"sigma": {"joint": 1000.0}}


def default_schedule() -> StageSchedule:
    """Coarse to fine: placement, shape, body, hands, then every rotation together.

    Body and hand stages use a wide robust scale so far-off landmarks still
    pull; the final stage runs at the configured scale.
    """
    return StageSchedule(
        (
            Stage("global", ("camera", "zeta"), 60),
            Stage("shape", ("beta",), 40),
            Stage("body", ("theta:body",), 60, WIDE_SIGMA),
            Stage("hands", ("theta:hands", "theta:face"), 60, WIDE_SIGMA),
            Stage("refine", ("theta", "psi"), 80),
        )
    )


@dataclass(frozen=True, eq=False)
class SharedCalibration:
    beta: np.ndarray
    zeta: np.ndarray
    camera: CameraParams

    def __post_init__(self):
        object.__setattr__(self, "beta", np.array(self.beta, dtype=float))
        object.__setattr__(self, "zeta", np.array(self.zeta, dtype=float))
        self.beta.setflags(write=False)
        self.zeta.setflags(write=False)

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "zeta": self.zeta.tolist(), "camera": self.camera.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SharedCalibration":
        return cls(d["beta"], d["zeta"], CameraParams.from_dict(d["camera"]))


# --------------------------------------------------------------------------
# variable bookkeeping
# --------------------------------------------------------------------------


def _group_indices(tree: KinematicTree, group: str) -> np.ndarray:
    """Indices into ``[pose vector, translation]`` for one variable group."""
    n_pose = 3 + N_SHAPE + N_EXPR + 3 * tree.n_joints
    th0 = 3 + N_SHAPE + N_EXPR
    if group == "zeta":
        return np.arange(3)
    if group == "beta":
        return np.arange(3, 3 + N_SHAPE)
    if group == "psi":
        return np.arange(3 + N_SHAPE, th0)
    if group == "camera":
        return np.arange(n_pose, n_pose + 3)
    if group == "theta":
        joints = np.arange(tree.n_joints)
    elif group.startswith("theta:"):
        key = group.split(":", 1)[1]
        if key not in tree.joint_sets:
            raise FitError(f"tree {tree.name!r} has no joint set {key!r}")
        joints = tree.joint_group(key)
    else:
        raise FitError(f"unknown variable group {group!r}")
    return (th0 + 3 * joints[:, None] + np.arange(3)).ravel()


def stage_indices(tree: KinematicTree, variables) -> np.ndarray:
    return np.unique(np.concatenate([_group_indices(tree, g) for g in variables]))


def _active_stages(tree, schedule: StageSchedule, frozen: tuple[str, ...]):
    """Drop frozen groups; budgets of emptied stages go to the rest by variable count."""
    kept, freed = [], 0
    for st in schedule.stages:
        groups = tuple(g for g in st.variables if g not in frozen)
        if not groups:
            freed += st.iterations
            continue
        kept.append((st, groups, stage_indices(tree, groups)))
    if not kept:
        return []
    sizes = np.array([idx.size for _, _, idx in kept], dtype=float)
    extra = np.floor(freed * sizes / sizes.sum()).astype(int)
    extra[np.argmax(sizes)] += freed - int(extra.sum())
    return [(st, groups, idx, st.iterations + int(e)) for (st, groups, idx), e in zip(kept, extra)]


class _Problem:
    """Objective over a subset of ``[pose vector, translation]`` with the rest held fixed.

    The optimiser sees ``y = x / scale`` where ``scale`` is a diagonal
    Gauss-Newton preconditioner fixed at construction.
    """

    def __init__(self, tree, base, cam, observations, weights, active, frame_weights=None, precondition=True):
        self.tree = tree
        self.base = np.array(base, dtype=float)
        self.cam = cam
        self.obs = observations
        self.w = weights
        self.active = np.asarray(active, dtype=np.int64)
        n_obs = len(observations)
        self.frame_weights = np.ones(n_obs) / n_obs if frame_weights is None else np.asarray(frame_weights)
        self.n_pose = self.base.size - 3
        self.scale = np.ones(self.active.size)
        if precondition and self.active.size:
            self.scale = 1.0 / np.sqrt(self._gn_diagonal())

    def full(self, x):
        v = self.base.copy()
        v[self.active] = x
        return v

    def unpack(self, v):
        pose = PoseParams.from_vector(v[: self.n_pose], self.tree.n_joints)
        cam = self.cam.replace(translation=v[self.n_pose:])
        return pose, cam

    def _camera_points(self, v):
        pose, cam = self.unpack(v)
        return fk_state(self.tree, pose).landmarks @ cam.rotation.T + cam.translation

    def _gn_diagonal(self, step=1e-6):
        """Diagonal of the Gauss-Newton Hessian at the base point (finite differences)."""
        tree, w = self.tree, self.w
        v0 = self.base
        try:
            xc0 = self._camera_points(v0)
        except ProjectionError:
            return np.ones(self.active.size)
        f = self.cam.focal
        up = tree.named("upright") if "upright" in tree.sets and w.upright > 0 else np.zeros(0, dtype=np.int64)
        iu, ju = np.triu_indices(up.size, k=1)
        gamma = landmark_weights(tree, w)
        lm_w = sum(
            fw * gamma * ob.keypoints.confidence for fw, ob in zip(self.frame_weights, self.obs)
        ) * (2.0 / tree.n_landmarks)
        uv0 = f * xc0[:, :2] / xc0[:, 2:3]
        diag = np.zeros(self.active.size)
        for k, i in enumerate(self.active):
            v = v0.copy()
            v[i] += step
            xc = self._camera_points(v)
            duv = (f * xc[:, :2] / xc[:, 2:3] - uv0) / step
            diag[k] = np.sum(lm_w * np.sum(duv * duv, axis=1))
            if iu.size:
                dz = (xc[up, 2] - xc0[up, 2]) / step
                diag[k] += 2.0 * w.upright * np.sum((dz[iu] - dz[ju]) ** 2)
        # parameter-space terms
        th0 = 3 + N_SHAPE + N_EXPR
        n = tree.n_joints
        direct = np.zeros(self.base.size)
        direct[3 : 3 + N_SHAPE] = 2 * w.shape_weight
        direct[3 + N_SHAPE : th0] = 2 * w.expr_weight
        per_joint = np.full(n, 2 * w.prior_weight)
        for fw, ob in zip(self.frame_weights, self.obs):
            unseen = unseen_joints(tree, ob.unseen_landmarks(w.unseen_threshold))
            per_joint[unseen] += fw * 2 * w.unseen
            if ob.prev_theta is not None:
                per_joint += fw * 2 * w.smooth * tree.joint_weight
        direct[th0 : th0 + 3 * n] = np.repeat(per_joint, 3)
        diag += direct[self.active]
        floor = 1e-9 * max(float(diag.max()), 1e-300)
        return np.maximum(diag, floor)

    def value_grad(self, v):
        pose, cam = self.unpack(v)
        val = 0.0
        g = np.zeros(v.size)
        for fw, ob in zip(self.frame_weights, self.obs):
            ev = evaluate(pose, self.tree, cam, ob, self.w)
            val += fw * ev.value
            g[: self.n_pose] += fw * ev.grad
            g[self.n_pose:] += fw * ev.grad_translation
        return val, g

    def to_scaled(self, x):
        return np.asarray(x) / self.scale

    def from_scaled(self, y):
        return np.asarray(y) * self.scale

    def __call__(self, y):
        try:
            val, g = self.value_grad(self.full(self.from_scaled(y)))
        except ProjectionError:
            return math.inf, np.full(y.size, np.nan)
        return val, g[self.active] * self.scale


def _stage_weights(weights: FitWeights, overrides: dict) -> FitWeights:
    if not overrides:
        return weights
    kw = dict(overrides)
    if "sigma" in kw and isinstance(kw["sigma"], dict):
        sig = weights.sigma
        kw["sigma"] = RobustConfig(**{**{"joint": sig.joint, "angle": sig.angle, "depth": sig.depth}, **kw["sigma"]})
    if "landmark_scale" in kw:
        kw["landmark_scale"] = {**weights.landmark_scale, **kw["landmark_scale"]}
    return weights.replace(**kw)


def _run_stages(tree, vec, cam, observations, weights, plan, lbfgs_cfg, frame=None, frame_weights=None):
    trace = []
    for st, groups, idx, iters in plan:
        w = _stage_weights(weights, st.weights)
        prob = _Problem(tree, vec, cam, observations, w, idx, frame_weights)
        cfg = LbfgsConfig(
            memory=lbfgs_cfg.memory,
            max_iters=iters,
            gtol=lbfgs_cfg.gtol,
            ftol=lbfgs_cfg.ftol,
            c1=lbfgs_cfg.c1,
            c2=lbfgs_cfg.c2,
            max_ls=lbfgs_cfg.max_ls,
        )
        try:
            res = lbfgs_minimize(prob, prob.to_scaled(vec[idx]), cfg)
        except OptimizationError as exc:
            raise FitError(f"stage {st.name!r}: {exc}", frame) from exc
        vec = prob.full(prob.from_scaled(res.x))
        cam = prob.unpack(vec)[1]
        trace.append({"stage": st.name, "start": res.history[0], "end": res.value, "iterations": res.iterations})
        log.debug("stage %s: %.6g -> %.6g in %d its (%s)", st.name, res.history[0], res.value, res.iterations, res.message)
    return vec, cam, trace


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------


def subsample_indices(n_frames: int, limit: int = 10) -> np.ndarray:
    return np.unique(np.round(np.linspace(0, n_frames - 1, min(n_frames, limit))).astype(int))


def _unique_frames(frames):
    """Collapse exact duplicates; returns (frames, weights summing to one)."""
    keys, out, counts = {}, [], []
    for kp in frames:
        key = kp.coords.tobytes() + kp.confidence.tobytes()
        if key in keys:
            counts[keys[key]] += 1
        else:
            keys[key] = len(out)
            out.append(kp)
            counts.append(1)
    counts = np.asarray(counts, dtype=float)
    return out, counts / counts.sum()


def _initial_translation(tree, zeta, beta, cam, frames, frame_weights):
    """Linear least-squares camera translation for the rest pose (similar triangles)."""
    pose = rest_pose(tree).replace(zeta=zeta, beta=beta)
    body = fk_state(tree, pose).landmarks @ cam.rotation.T
    rows, rhs = [], []
    for kp, fw in zip(frames, frame_weights):
        w = np.sqrt(fw * kp.confidence * tree.landmark_weight)
        du = kp.coords - cam.principal
        f = cam.focal
        for axis in (0, 1):
            # f*(P + t) = du*(Pz + tz), linear in t
            a = np.zeros((tree.n_landmarks, 3))
            a[:, axis] = f
            a[:, 2] = -du[:, axis]
            rows.append(w[:, None] * a)
            rhs.append(w * (du[:, axis] * body[:, 2] - f * body[:, axis]))
    a, b = np.concatenate(rows), np.concatenate(rhs)
    t, *_ = np.linalg.lstsq(a, b, rcond=None)
    if np.all(np.isfinite(t)) and np.min(body[:, 2] + t[2]) > 0.1:
        return t
    return np.array(cam.translation, dtype=float)


@dataclass(frozen=True)
class CalibrationConfig:
    max_frames: int = 10
    rigid_iters: int = 100
    shape_iters: int = 100
    # tighter than the per-frame scale: moving arms must not drag the shape
    sigma_joint: float | None = 10.0


def precalibrate_video(
    frames,
    tree: KinematicTree,
    camera: CameraParams | None = None,
    weights: FitWeights | None = None,
    config: CalibrationConfig | None = None,
    lbfgs: LbfgsConfig | None = None,
) -> SharedCalibration:
    """Fit beta, zeta and the camera translation with theta at rest.

    The objective is the mean joint loss over a uniform subsample of frames
    plus the prior. Intrinsics and the camera rotation stay fixed.
    """
    kps = [f.keypoints if isinstance(f, FrameObservation) else f for f in frames]
    if not kps:
        raise CalibrationError("calibration needs at least one frame")
    config = config or CalibrationConfig()
    lbfgs = lbfgs or LbfgsConfig(gtol=1e-8, ftol=1e-14)
    pick = subsample_indices(len(kps), config.max_frames)
    sub, frame_weights = _unique_frames([kps[i] for i in pick])
    if all(not np.any(k.confidence > 0) for k in sub):
        raise CalibrationError("all keypoint confidences are zero")
    base_w = weights or FitWeights()
    w = base_w.replace(unseen=0.0, upright=0.0, smooth=0.0)
    if config.sigma_joint is not None:
        w = w.replace(sigma=replace(w.sigma, joint=config.sigma_joint))
    cam = camera or default_camera()
    zeta0, beta0 = np.zeros(3), np.zeros(N_SHAPE)
    t0 = _initial_translation(tree, zeta0, beta0, cam, sub, frame_weights)
    cam = cam.replace(translation=t0)
    vec = np.concatenate([rest_pose(tree).to_vector(), t0])
    obs = [FrameObservation(k) for k in sub]
    plan = [
        (Stage("rigid", ("camera", "zeta"), config.rigid_iters), None, stage_indices(tree, ("camera", "zeta")), config.rigid_iters),
        (
            Stage("shape", ("camera", "zeta", "beta"), config.shape_iters),
            None,
            stage_indices(tree, ("camera", "zeta", "beta")),
            config.shape_iters,
        ),
    ]
    try:
        vec, cam, _ = _run_stages(tree, vec, cam, obs, w, plan, lbfgs, frame_weights=frame_weights)
    except FitError as exc:
        raise CalibrationError(str(exc)) from exc
    pose = PoseParams.from_vector(vec[:-3], tree.n_joints)
    return SharedCalibration(pose.beta, pose.zeta, cam)


# --------------------------------------------------------------------------
# frames and videos
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FrameFit:
    pose: PoseParams
    initial_value: float
    value: float
    trace: list


def _canonical_theta(theta):
    return np.stack([canonicalize_aa(t) for t in np.asarray(theta).reshape(-1, 3)])


def fit_frame(
    obs: FrameObservation,
    shared: SharedCalibration,
    tree: KinematicTree,
    schedule: StageSchedule | None = None,
    weights: FitWeights | None = None,
    frame: int | None = None,
) -> FrameFit:
    """Fit theta and psi for one frame with the shared parameters frozen."""
    schedule = schedule or default_schedule()
    weights = weights or FitWeights()
    if obs.keypoints.coords.shape[0] != tree.n_landmarks:
        raise FitError(f"expected {tree.n_landmarks} keypoints, got {obs.keypoints.coords.shape[0]}", frame)
    if obs.prev_theta is not None:
        theta0 = np.asarray(obs.prev_theta, dtype=float).reshape(tree.n_joints, 3)
    else:
        theta0 = np.zeros((tree.n_joints, 3))
    pose0 = PoseParams(shared.zeta, shared.beta, np.zeros(N_EXPR), theta0)
    cam = shared.camera
    vec = np.concatenate([pose0.to_vector(), cam.translation])
    plan = _active_stages(tree, schedule, SHARED_GROUPS)
    start = _Problem(tree, vec, cam, [obs], weights, np.arange(0), precondition=False)
    try:
        f0 = start.value_grad(vec)[0]
    except ProjectionError as exc:
        raise FitError(f"initial pose does not project: {exc}", frame) from exc
    vec, _, trace = _run_stages(tree, vec, cam, [obs], weights, plan, schedule.lbfgs, frame)
    f1 = start.value_grad(vec)[0]
    pose = PoseParams.from_vector(vec[:-3], tree.n_joints)
    # fold rotations past pi back, unless that costs objective (smooth term)
    canon = pose.replace(theta=_canonical_theta(pose.theta))
    if not np.array_equal(canon.theta, pose.theta):
        try:
            fc = start.value_grad(np.concatenate([canon.to_vector(), cam.translation]))[0]
        except ProjectionError:
            fc = math.inf
        if fc <= f1:
            pose, f1 = canon, fc
    return FrameFit(pose, float(f0), float(f1), trace)


@dataclass(frozen=True, eq=False)
class VideoFit:
    sign: object  # Sign3D
    shared: SharedCalibration
    frames: list  # FrameFit per input frame


def fit_video(
    frames,
    tree: KinematicTree,
    schedule: StageSchedule | None = None,
    weights: FitWeights | None = None,
    camera: CameraParams | None = None,
    shared: SharedCalibration | None = None,
    gloss: str = "",
    source: str = "",
):
    """Calibrate once, then fit frames in order, chaining each theta into the next frame."""
    from .dictionary import Sign3D

    kps = [f.keypoints if isinstance(f, FrameObservation) else f for f in frames]
    if not kps:
        raise FitError("video has no frames")
    if shared is None:
        shared = precalibrate_video(kps, tree, camera, weights)
    poses, fits = [], []
    prev = None
    for i, kp in enumerate(kps):
        res = fit_frame(FrameObservation(kp, prev), shared, tree, schedule, weights, frame=i)
        poses.append(res.pose)
        fits.append(res)
        prev = res.pose.theta
    sign = Sign3D.from_poses(gloss, poses, tree, source=source, camera=shared.camera)
    return VideoFit(sign, shared, fits)
