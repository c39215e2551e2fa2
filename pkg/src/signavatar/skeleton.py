"""Kinematic skeleton: tree config, axis-angle FK, shape scaling, projection."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels
from .kernels import rodrigues_batch

N_SHAPE = 10
N_EXPR = 10
TREE_FORMAT = "signavatar-tree"
TREE_VERSION = 1
MIN_SCALE = 0.1


class SkeletonError(ValueError):
    """Malformed tree config or mismatched pose dimensions."""


class ProjectionError(ValueError):
    """A landmark sits at or behind the camera plane."""


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class KinematicTree:
    """Joint hierarchy plus the landmark surface the fitter observes.

    Joints are stored in topological order (``parent[j] < j``) with a single
    root at index 0. Landmarks are either a joint position or a fixed offset
    expressed in a joint's frame.
    """

    name: str
    joint_names: tuple[str, ...]
    parents: np.ndarray
    rest_offsets: np.ndarray
    shape_basis: np.ndarray
    joint_weight: np.ndarray
    joint_limits: np.ndarray  # (N, 2, 3) lower / upper per axis-angle component
    landmark_names: tuple[str, ...]
    landmark_joint: np.ndarray
    landmark_offset: np.ndarray
    landmark_weight: np.ndarray
    sets: dict = field(default_factory=dict)
    joint_sets: dict = field(default_factory=dict)

    def __post_init__(self):
        for attr, dtype in [
            ("parents", np.int64),
            ("rest_offsets", float),
            ("shape_basis", float),
            ("joint_weight", float),
            ("joint_limits", float),
            ("landmark_joint", np.int64),
            ("landmark_offset", float),
            ("landmark_weight", float),
        ]:
            object.__setattr__(self, attr, _frozen(getattr(self, attr), dtype))
        for attr in ("sets", "joint_sets"):
            object.__setattr__(
                self, attr, {k: tuple(int(i) for i in v) for k, v in getattr(self, attr).items()}
            )
        self._validate()

    def _validate(self):
        n, j = self.n_joints, self.n_landmarks
        if n < 1:
            raise SkeletonError("tree needs at least one joint")
        if len(self.joint_names) != n:
            raise SkeletonError("joint_names length does not match parents")
        if self.parents[0] != -1:
            raise SkeletonError("joint 0 must be the root")
        for i in range(1, n):
            if not 0 <= self.parents[i] < i:
                raise SkeletonError(f"joint {i} parent {self.parents[i]} breaks topological order")
        shapes = {
            "rest_offsets": (n, 3),
            "shape_basis": (n, N_SHAPE),
            "joint_weight": (n,),
            "joint_limits": (n, 2, 3),
            "landmark_joint": (j,),
            "landmark_offset": (j, 3),
            "landmark_weight": (j,),
        }
        for attr, shp in shapes.items():
            if getattr(self, attr).shape != shp:
                raise SkeletonError(f"{attr} has shape {getattr(self, attr).shape}, expected {shp}")
        if len(self.landmark_names) != j:
            raise SkeletonError("landmark_names length does not match landmark_joint")
        if np.any(self.joint_weight < 0) or np.any(self.landmark_weight < 0):
            raise SkeletonError("joint weights must be nonnegative")
        if np.any((self.landmark_joint < 0) | (self.landmark_joint >= n)):
            raise SkeletonError("landmark references an unknown joint")
        for key, idx in self.sets.items():
            if any(not 0 <= i < j for i in idx):
                raise SkeletonError(f"named set {key!r} has an index outside the landmarks")
        for key, idx in self.joint_sets.items():
            if any(not 0 <= i < n for i in idx):
                raise SkeletonError(f"joint set {key!r} has an index outside the joints")

    @property
    def n_joints(self) -> int:
        return int(self.parents.shape[0])

    @property
    def n_landmarks(self) -> int:
        return int(self.landmark_joint.shape[0])

    def named(self, key: str) -> np.ndarray:
        return np.asarray(self.sets[key], dtype=np.int64)

    def joint_group(self, key: str) -> np.ndarray:
        return np.asarray(self.joint_sets[key], dtype=np.int64)

    def to_dict(self) -> dict:
        joints = []
        for i in range(self.n_joints):
            joints.append(
                {
                    "name": self.joint_names[i],
                    "parent": int(self.parents[i]),
                    "offset": self.rest_offsets[i].tolist(),
                    "shape": self.shape_basis[i].tolist(),
                    "weight": float(self.joint_weight[i]),
                    "limit_lower": self.joint_limits[i, 0].tolist(),
                    "limit_upper": self.joint_limits[i, 1].tolist(),
                }
            )
        landmarks = []
        for i in range(self.n_landmarks):
            item = {
                "name": self.landmark_names[i],
                "joint": int(self.landmark_joint[i]),
                "weight": float(self.landmark_weight[i]),
            }
            if np.any(self.landmark_offset[i] != 0):
                item["offset"] = self.landmark_offset[i].tolist()
            landmarks.append(item)
        return {
            "format": TREE_FORMAT,
            "version": TREE_VERSION,
            "name": self.name,
            "joints": joints,
            "landmarks": landmarks,
            "sets": {k: list(v) for k, v in sorted(self.sets.items())},
            "joint_sets": {k: list(v) for k, v in sorted(self.joint_sets.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicTree":
        if d.get("format") != TREE_FORMAT:
            raise SkeletonError(f"not a tree config (format={d.get('format')!r})")
        if d.get("version") != TREE_VERSION:
            raise SkeletonError(f"unsupported tree config version {d.get('version')!r}")
        js, ls = d["joints"], d["landmarks"]
        return cls(
            name=d.get("name", "tree"),
            joint_names=tuple(j["name"] for j in js),
            parents=[j["parent"] for j in js],
            rest_offsets=[j["offset"] for j in js],
            shape_basis=[j.get("shape", [0.0] * N_SHAPE) for j in js],
            joint_weight=[j.get("weight", 1.0) for j in js],
            joint_limits=[
                [j.get("limit_lower", [-np.pi] * 3), j.get("limit_upper", [np.pi] * 3)] for j in js
            ],
            landmark_names=tuple(lm["name"] for lm in ls),
            landmark_joint=[lm["joint"] for lm in ls],
            landmark_offset=[lm.get("offset", [0.0, 0.0, 0.0]) for lm in ls],
            landmark_weight=[lm.get("weight", 1.0) for lm in ls],
            sets=d.get("sets", {}),
            joint_sets=d.get("joint_sets", {}),
        )

    def digest(self) -> str:
        """sha256 of the canonical JSON form; pins dictionaries and models to a tree."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_tree(path: str | Path) -> KinematicTree:
    with open(path, encoding="utf-8") as fh:
        return KinematicTree.from_dict(json.load(fh))


def save_tree(tree: KinematicTree, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree.to_dict(), fh, indent=1)
        fh.write("\n")


_DEFAULT: KinematicTree | None = None


def default_tree() -> KinematicTree:
    """The bundled ``signer54`` tree (54 joints, 118 landmarks)."""
    global _DEFAULT
    if _DEFAULT is None:
        ref = resources.files("signavatar") / "data" / "signer54.json"
        _DEFAULT = KinematicTree.from_dict(json.loads(ref.read_text(encoding="utf-8")))
    return _DEFAULT


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PoseParams:
    """Per-frame optimisation variable.

    ``theta`` is stored as an (N, 3) array of per-joint axis-angle rotations
    relative to the parent; ``zeta`` rotates the whole body about the root.
    ``psi`` is carried along but has no geometric effect.
    """

    zeta: np.ndarray
    beta: np.ndarray
    psi: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        for attr in ("zeta", "beta", "psi", "theta"):
            object.__setattr__(self, attr, _frozen(getattr(self, attr)))
        if self.theta.ndim == 1:
            if self.theta.size % 3:
                raise SkeletonError("theta length must be a multiple of 3")
            object.__setattr__(self, "theta", _frozen(self.theta.reshape(-1, 3)))
        if self.zeta.shape != (3,) or self.beta.shape != (N_SHAPE,) or self.psi.shape != (N_EXPR,):
            raise SkeletonError("pose parameter has the wrong dimension")
        if self.theta.ndim != 2 or self.theta.shape[1] != 3:
            raise SkeletonError(f"theta has shape {self.theta.shape}, expected (N, 3)")
        if not all(np.all(np.isfinite(getattr(self, a))) for a in ("zeta", "beta", "psi", "theta")):
            raise SkeletonError("pose parameters must be finite")

    @property
    def n_joints(self) -> int:
        return int(self.theta.shape[0])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.zeta, self.beta, self.psi, self.theta.ravel()])

    @classmethod
    def from_vector(cls, x, n_joints: int) -> "PoseParams":
        x = np.asarray(x, dtype=float)
        if x.shape != (3 + N_SHAPE + N_EXPR + 3 * n_joints,):
            raise SkeletonError(f"pose vector has length {x.shape}, expected {3 + N_SHAPE + N_EXPR + 3 * n_joints}")
        a = 3 + N_SHAPE
        b = a + N_EXPR
        return cls(x[:3], x[3:a], x[a:b], x[b:].reshape(n_joints, 3))

    def replace(self, **kw) -> "PoseParams":
        vals = {a: getattr(self, a) for a in ("zeta", "beta", "psi", "theta")}
        vals.update(kw)
        return PoseParams(**vals)


@dataclass(frozen=True, eq=False)
class CameraParams:
    focal: float
    principal: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "principal", _frozen(self.principal))
        object.__setattr__(self, "rotation", _frozen(self.rotation))
        object.__setattr__(self, "translation", _frozen(self.translation))
        if not self.focal > 0:
            raise SkeletonError("focal length must be positive")
        r = self.rotation
        if r.shape != (3, 3) or not np.allclose(r.T @ r, np.eye(3), atol=1e-8) or np.linalg.det(r) < 0:
            raise SkeletonError("extrinsic rotation must be a proper rotation matrix")

    def replace(self, **kw) -> "CameraParams":
        vals = dict(
            focal=self.focal, principal=self.principal, rotation=self.rotation, translation=self.translation
        )
        vals.update(kw)
        return CameraParams(**vals)

    def to_dict(self) -> dict:
        return {
            "focal": self.focal,
            "principal": self.principal.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        return cls(d["focal"], d["principal"], d["rotation"], d["translation"])


# World frame: y up, the signer faces +z. The default camera looks down -z.
FRONT_VIEW = np.diag([1.0, -1.0, -1.0])


def default_camera(distance: float = 2.5, height: float = 0.3, focal: float = 1000.0, size: int = 1000):
    """Frontal camera framing the upper body in a ``size``-square image."""
    return CameraParams(focal, [size / 2, size / 2], FRONT_VIEW, [0.0, height, distance])


@dataclass(frozen=True, eq=False)
class Keypoints2D:
    coords: np.ndarray  # (J, 2) pixels
    confidence: np.ndarray  # (J,)

    def __post_init__(self):
        object.__setattr__(self, "coords", _frozen(self.coords))
        object.__setattr__(self, "confidence", _frozen(self.confidence))
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise SkeletonError("keypoint coords must be (J, 2)")
        if self.confidence.shape != (self.coords.shape[0],):
            raise SkeletonError("confidence must be a J-vector")
        if np.any((self.confidence < 0) | (self.confidence > 1)) or not np.all(np.isfinite(self.confidence)):
            raise SkeletonError("confidence must lie in [0, 1]")


# --------------------------------------------------------------------------
# rotations
# --------------------------------------------------------------------------


def rodrigues(aa) -> np.ndarray:
    """Axis-angle 3-vector to rotation matrix (identity below 1e-12 rad)."""
    aa = np.asarray(aa, dtype=float)
    if np.linalg.norm(aa) < 1e-12:
        return np.eye(3)
    return rodrigues_batch(aa)


def canonicalize_aa(aa) -> np.ndarray:
    """Wrap axis-angle vectors so each angle lies in [0, pi].

    Angles are reduced modulo 2*pi; anything past pi is re-expressed as the
    complementary angle about the flipped axis. Works on (..., 3) stacks.
    """
    aa = np.asarray(aa, dtype=float)
    th = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(th > 0, th, 1.0)
    axis = aa / safe
    wrapped = np.mod(th, 2 * np.pi)
    flip = wrapped > np.pi
    wrapped = np.where(flip, 2 * np.pi - wrapped, wrapped)
    axis = np.where(flip, -axis, axis)
    out = axis * wrapped
    return np.where(th > 0, out, 0.0)


def aa_to_quat(aa) -> np.ndarray:
    """Axis-angle (..., 3) to unit quaternions (..., 4) in (w, x, y, z) order."""
    aa = np.asarray(aa, dtype=float)
    th = np.linalg.norm(aa, axis=-1, keepdims=True)
    half = 0.5 * th
    small = th < 1e-8
    k = np.where(small, 0.5 - th * th / 48.0, np.sin(half) / np.where(small, 1.0, th))
    return np.concatenate([np.cos(half), k * aa], axis=-1)


def quat_to_aa(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(q[..., :1] < 0, -q, q)
    vec = q[..., 1:]
    s = np.linalg.norm(vec, axis=-1, keepdims=True)
    th = 2.0 * np.arctan2(s, q[..., :1])
    small = s < 1e-12
    scale = np.where(small, 2.0, th / np.where(small, 1.0, s))
    return vec * scale


def quat_mul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def matrix_to_aa(r) -> np.ndarray:
    """Log map of a rotation matrix via its quaternion."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    cands = np.array(
        [
            [1 + tr, r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]],
            [r[2, 1] - r[1, 2], 1 + r[0, 0] - r[1, 1] - r[2, 2], r[0, 1] + r[1, 0], r[0, 2] + r[2, 0]],
            [r[0, 2] - r[2, 0], r[0, 1] + r[1, 0], 1 - r[0, 0] + r[1, 1] - r[2, 2], r[1, 2] + r[2, 1]],
            [r[1, 0] - r[0, 1], r[0, 2] + r[2, 0], r[1, 2] + r[2, 1], 1 - r[0, 0] - r[1, 1] + r[2, 2]],
        ]
    )
    # row i equals 4 * q_i * q; pick the best-conditioned row
    q = cands[int(np.argmax(np.diag(cands)))]
    return quat_to_aa(q / np.linalg.norm(q))


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------


def shape_scale(tree: KinematicTree, beta) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint bone scale factors and a mask of joints not at the clamp."""
    raw = 1.0 + tree.shape_basis @ np.asarray(beta, dtype=float)
    active = raw > MIN_SCALE
    return np.where(active, raw, MIN_SCALE), active


def apply_shape(tree: KinematicTree, beta) -> np.ndarray:
    """Rest offsets scaled linearly in beta, each factor clamped at 0.1."""
    scale, _ = shape_scale(tree, beta)
    return tree.rest_offsets * scale[:, None]


def _check_pose(tree: KinematicTree, pose: PoseParams):
    if pose.n_joints != tree.n_joints:
        raise SkeletonError(f"pose has {pose.n_joints} joints, tree {tree.name!r} has {tree.n_joints}")


@dataclass(frozen=True, eq=False)
class FKState:
    """Everything the gradient code needs from one forward pass (world frame)."""

    world_rot: np.ndarray
    world_pos: np.ndarray
    landmarks: np.ndarray
    root_rot: np.ndarray
    scale_active: np.ndarray


def fk_state(tree: KinematicTree, pose: PoseParams) -> FKState:
    _check_pose(tree, pose)
    scale, active = shape_scale(tree, pose.beta)
    offsets = tree.rest_offsets * scale[:, None]
    root_rot = rodrigues_batch(pose.zeta)
    theta = np.ascontiguousarray(pose.theta)
    world_rot, world_pos = kernels.fk_chain(tree.parents, offsets, theta, root_rot)
    lj = tree.landmark_joint
    lm = world_pos[lj] + np.einsum("nij,nj->ni", world_rot[lj], tree.landmark_offset)
    return FKState(world_rot, world_pos, lm, root_rot, active)


def to_camera(points, cam: CameraParams) -> np.ndarray:
    return np.asarray(points, dtype=float) @ cam.rotation.T + cam.translation


def forward_kinematics(tree: KinematicTree, pose: PoseParams, cam: CameraParams | None = None) -> np.ndarray:
    """Landmark positions (J, 3).

    World frame by default; with ``cam`` the camera extrinsics are applied
    and the z column is depth.
    """
    lm = fk_state(tree, pose).landmarks
    return lm if cam is None else to_camera(lm, cam)


def project(points_cam, cam: CameraParams, names=None) -> np.ndarray:
    """Pinhole projection of camera-frame points (..., 3) to pixels (..., 2)."""
    p = np.asarray(points_cam, dtype=float)
    z = p[..., 2]
    bad = np.argwhere(~(z > 1e-6))
    if bad.size:
        i = tuple(int(v) for v in bad[0])
        label = names[i[-1]] if names is not None else f"landmark {i[-1]}"
        raise ProjectionError(f"{label} has non-positive depth {z[i]:.3g}")
    return cam.focal * p[..., :2] / z[..., None] + cam.principal


def project_pose(tree: KinematicTree, pose: PoseParams, cam: CameraParams) -> np.ndarray:
    return project(forward_kinematics(tree, pose, cam), cam, tree.landmark_names)


def rest_pose(tree: KinematicTree) -> PoseParams:
    return PoseParams(np.zeros(3), np.zeros(N_SHAPE), np.zeros(N_EXPR), np.zeros((tree.n_joints, 3)))


def rotate_global(pose: PoseParams, delta: float, axis=(0.0, 1.0, 0.0)) -> PoseParams:
    """Pre-compose the global orientation with a rotation of ``delta`` rad about ``axis``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    if delta == 0:
        return pose
    q = quat_mul(aa_to_quat(delta * axis), aa_to_quat(pose.zeta))
    return pose.replace(zeta=quat_to_aa(q))
