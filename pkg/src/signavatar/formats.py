"""Keypoint stream ingestion and animation export (BVH, anim-json)."""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .connector import StitchedSequence
from .skeleton import (
    Keypoints2D,
    KinematicTree,
    PoseParams,
    apply_shape,
    rodrigues,
)

KPS_MAGIC = "#signavatar-keypoints"
KPS_VERSION = 1
ANIM_FORMAT = "signavatar-anim"
ANIM_VERSION = 1
FRAME_TIME = 1.0 / 25.0
EULER_ORDER = "ZXY"  # intrinsic: R = Rz @ Rx @ Ry, matching the channel order
M_TO_CM = 100.0


class FormatError(ValueError):
    """Malformed or mismatching input file."""


# --------------------------------------------------------------------------
# keypoint stream
# --------------------------------------------------------------------------


def write_keypoints(frames, path) -> None:
    """Header line, then one ``frame x y w x y w ...`` record per frame."""
    frames = list(frames)
    n = frames[0].coords.shape[0] if frames else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{KPS_MAGIC} version={KPS_VERSION} landmarks={n}\n")
        for t, kp in enumerate(frames):
            vals = np.column_stack([kp.coords, kp.confidence]).ravel()
            fh.write(str(t) + " " + " ".join(repr(float(v)) for v in vals) + "\n")


def _header_fields(line: str, path) -> dict:
    parts = line.split()
    if not parts or parts[0] != KPS_MAGIC:
        raise FormatError(f"{path}:1: missing '{KPS_MAGIC}' header")
    out = {}
    for item in parts[1:]:
        key, _, val = item.partition("=")
        out[key] = val
    try:
        version = int(out.get("version", ""))
        count = int(out.get("landmarks", ""))
    except ValueError:
        raise FormatError(f"{path}:1: header needs integer version= and landmarks= fields") from None
    if version != KPS_VERSION:
        raise FormatError(f"{path}:1: unsupported keypoint stream version {version}")
    return {"version": version, "landmarks": count}


def load_keypoints(path, tree: KinematicTree | None = None) -> list[Keypoints2D]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"keypoint file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty keypoint file")
    head = _header_fields(lines[0], path)
    count = head["landmarks"]
    if tree is not None and count != tree.n_landmarks:
        raise FormatError(f"{path}: expected {tree.n_landmarks} landmarks for tree {tree.name!r}, found {count}")
    out = []
    for n, line in enumerate(lines[1:], 2):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        try:
            frame = int(parts[0])
            vals = np.array([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: malformed record ({exc})") from None
        if frame != len(out):
            raise FormatError(f"{path}:{n}: frame index {frame}, expected {len(out)}")
        if vals.size != 3 * count:
            raise FormatError(
                f"{path}:{n}: expected {count} landmarks ({3 * count} values), found {vals.size} values"
            )
        if not np.all(np.isfinite(vals)):
            raise FormatError(f"{path}:{n}: non-finite value")
        trip = vals.reshape(count, 3)
        bad = np.flatnonzero((trip[:, 2] < 0) | (trip[:, 2] > 1))
        if bad.size:
            raise FormatError(
                f"{path}:{n}: frame {frame} landmark {int(bad[0])} confidence {trip[bad[0], 2]!r} outside [0, 1]"
            )
        out.append(Keypoints2D(trip[:, :2], trip[:, 2]))
    if not out:
        raise FormatError(f"{path}: no frames")
    return out


# --------------------------------------------------------------------------
# BVH
# --------------------------------------------------------------------------


def _children(tree: KinematicTree) -> list[list[int]]:
    kids = [[] for _ in range(tree.n_joints)]
    for j in range(1, tree.n_joints):
        kids[int(tree.parents[j])].append(j)
    return kids


def _fmt(v: float) -> str:
    return f"{v + 0.0:.6f}"  # + 0.0 folds -0.0 into 0.0


def _euler_zxy(mats) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # gimbal-lock notice
        e = Rotation.from_matrix(mats).as_euler(EULER_ORDER, degrees=True)
    e[np.abs(e) < 1e-9] = 0.0
    return e


def bvh_text(tree: KinematicTree, poses, frame_time: float = FRAME_TIME) -> str:
    """BVH document; the skeleton uses the first frame's shape parameters."""
    poses = list(poses)
    if not poses:
        raise FormatError("cannot export an empty sequence")
    offsets = apply_shape(tree, poses[0].beta) * M_TO_CM
    kids = _children(tree)
    lines = ["HIERARCHY"]
    order = []

    def emit(j, depth):
        pad = "  " * depth
        kind = "ROOT" if j == 0 else "JOINT"
        lines.append(f"{pad}{kind} {tree.joint_names[j]}")
        lines.append(pad + "{")
        lines.append(f"{pad}  OFFSET " + " ".join(_fmt(v) for v in offsets[j]))
        if j == 0:
            lines.append(f"{pad}  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation")
        else:
            lines.append(f"{pad}  CHANNELS 3 Zrotation Xrotation Yrotation")
        order.append(j)
        for c in kids[j]:
            emit(c, depth + 1)
        if not kids[j]:
            lines.append(f"{pad}  End Site")
            lines.append(pad + "  {")
            lines.append(f"{pad}    OFFSET 0.000000 0.000000 0.000000")
            lines.append(pad + "  }")
        lines.append(pad + "}")

    emit(0, 0)
    lines.append("MOTION")
    lines.append(f"Frames: {len(poses)}")
    lines.append(f"Frame Time: {frame_time:.6f}")
    for p in poses:
        mats = np.stack([rodrigues(a) for a in p.theta])
        mats[0] = rodrigues(p.zeta) @ mats[0]
        eul = _euler_zxy(mats)
        row = [_fmt(v) for v in offsets[0]]
        for j in order:
            row += [_fmt(v) for v in eul[j]]
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def export_bvh(tree: KinematicTree, poses, path, frame_time: float = FRAME_TIME) -> None:
    text = bvh_text(tree, poses, frame_time)
    _write_text(path, text)


# --------------------------------------------------------------------------
# anim-json
# --------------------------------------------------------------------------


def anim_document(seq: StitchedSequence, tree: KinematicTree, frame_time: float = FRAME_TIME) -> dict:
    frames = []
    for p, j, tag in zip(seq.poses, seq.joints, seq.tags):
        frames.append(
            {
                "tag": [tag[0], int(tag[1])],
                "zeta": [float(v) for v in p.zeta],
                "beta": [float(v) for v in p.beta],
                "psi": [float(v) for v in p.psi],
                "theta": [[float(v) for v in row] for row in p.theta],
                "landmarks": [[float(v) for v in row] for row in j],
            }
        )
    return {
        "format": ANIM_FORMAT,
        "version": ANIM_VERSION,
        "tree": tree.name,
        "tree_hash": tree.digest(),
        "frame_time": frame_time,
        "glosses": list(seq.glosses),
        "sign_ids": list(seq.sign_ids),
        "durations": [int(d) for d in seq.durations],
        "frames": frames,
    }


def export_anim_json(seq: StitchedSequence, tree: KinematicTree, path, frame_time: float = FRAME_TIME) -> None:
    if seq.n_frames == 0:
        raise FormatError("cannot export an empty sequence")
    # json writes floats with repr, which round-trips float64 exactly
    _write_text(path, json.dumps(anim_document(seq, tree, frame_time), sort_keys=True) + "\n")


def load_anim_json(path) -> StitchedSequence:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read animation {path}: {exc}") from exc
    if doc.get("format") != ANIM_FORMAT:
        raise FormatError(f"{path} is not an animation file")
    if doc.get("version") != ANIM_VERSION:
        raise FormatError(f"unsupported animation version {doc.get('version')!r}")
    poses, joints, tags = [], [], []
    for fr in doc["frames"]:
        poses.append(
            PoseParams(np.array(fr["zeta"]), np.array(fr["beta"]), np.array(fr["psi"]), np.array(fr["theta"]))
        )
        joints.append(np.array(fr["landmarks"]))
        tags.append((fr["tag"][0], fr["tag"][1]))
    return StitchedSequence(poses, np.array(joints), tags, doc["durations"], doc["sign_ids"], doc["glosses"])


def export_animation(seq: StitchedSequence, tree: KinematicTree, fmt: str, path, frame_time: float = FRAME_TIME):
    if seq.n_frames == 0:
        raise FormatError("cannot export an empty sequence")
    if fmt == "bvh":
        export_bvh(tree, seq.poses, path, frame_time)
    elif fmt == "anim-json":
        export_anim_json(seq, tree, path, frame_time)
    else:
        raise FormatError(f"unknown animation format {fmt!r}")


def _write_text(path, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc

