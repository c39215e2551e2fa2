"""Gloss to 3D-sign dictionary with multi-candidate storage and retrieval."""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .skeleton import (
    N_EXPR,
    N_SHAPE,
    CameraParams,
    KinematicTree,
    PoseParams,
    forward_kinematics,
)

INDEX_NAME = "index.json"
DICT_FORMAT = "signavatar-dictionary"
DICT_VERSION = 1
SIGN_MAGIC = b"SAVSIGN\0"
SIGN_VERSION = 1
RESAMPLE_FRAMES = 16


class DictionaryError(ValueError):
    """Bad dictionary contents, unknown gloss, or unreadable dictionary files."""


def _as_f32(a):
    """Round to the nearest float32 so the binary format stores values exactly."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True, eq=False)
class Sign3D:
    """One isolated sign: per-frame pose parameters plus cached landmark positions."""

    gloss: str
    frames: tuple
    joints: np.ndarray  # (F, J, 3) world-frame landmarks
    source: str = ""
    confidence: float | None = None
    camera: CameraParams | None = None
    sign_id: str = ""
    tree_hash: str = ""

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise DictionaryError("a sign needs at least one frame")
        j = np.array(self.joints, dtype=float)
        j.setflags(write=False)
        object.__setattr__(self, "joints", j)
        if j.ndim != 3 or j.shape[0] != len(self.frames) or j.shape[2] != 3:
            raise DictionaryError(f"joint cache has shape {j.shape}, expected ({len(self.frames)}, J, 3)")
        if self.confidence is not None:
            c = float(self.confidence)
            if not 0.0 <= c <= 1.0:
                raise DictionaryError(f"confidence {c} outside [0, 1]")
            object.__setattr__(self, "confidence", c)

    @classmethod
    def from_poses(cls, gloss, poses, tree: KinematicTree, **kw) -> "Sign3D":
        """Build a sign with float32-exact parameters and a fresh joint cache."""
        poses = [
            PoseParams(_as_f32(p.zeta), _as_f32(p.beta), _as_f32(p.psi), _as_f32(p.theta)) for p in poses
        ]
        if not poses:
            raise DictionaryError("a sign needs at least one frame")
        joints = np.stack([forward_kinematics(tree, p) for p in poses])
        kw.setdefault("tree_hash", tree.digest())
        return cls(gloss, tuple(poses), joints, **kw)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def params(self) -> np.ndarray:
        """(F, 3 + 10 + 10 + 3N) parameter matrix."""
        return np.stack([p.to_vector() for p in self.frames])

    def replace(self, **kw) -> "Sign3D":
        vals = {k: getattr(self, k) for k in (
            "gloss", "frames", "joints", "source", "confidence", "camera", "sign_id", "tree_hash"
        )}
        vals.update(kw)
        return Sign3D(**vals)


def resample_trajectory(joints, n: int = RESAMPLE_FRAMES) -> np.ndarray:
    """Linear resampling of an (F, J, 3) trajectory to ``n`` frames."""
    joints = np.asarray(joints, dtype=float)
    f = joints.shape[0]
    if f == 1:
        return np.repeat(joints, n, axis=0)
    pos = np.linspace(0.0, f - 1, n)
    lo = np.minimum(np.floor(pos).astype(int), f - 2)
    frac = (pos - lo)[:, None, None]
    return (1 - frac) * joints[lo] + frac * joints[lo + 1]


def trajectory_distance(a, b, n: int = RESAMPLE_FRAMES) -> float:
    ra, rb = resample_trajectory(a, n), resample_trajectory(b, n)
    return float(np.mean(np.linalg.norm(ra - rb, axis=-1)))


def confidence_scores(cands) -> np.ndarray:
    if any(c.confidence is None for c in cands):
        raise DictionaryError("a candidate has no stored confidence")
    return np.array([c.confidence for c in cands])


def medoid_scores(cands) -> np.ndarray:
    """Negative summed distance to the other candidates (higher is more central)."""
    n = len(cands)
    d = np.zeros((n, n))
    for i in range(n):
        for k in range(i + 1, n):
            d[i, k] = d[k, i] = trajectory_distance(cands[i].joints, cands[k].joints)
    return -d.sum(axis=1)


def auto_scores(cands) -> np.ndarray:
    if all(c.confidence is not None for c in cands):
        return confidence_scores(cands)
    return medoid_scores(cands)


SCORERS = {"auto": auto_scores, "confidence": confidence_scores, "medoid": medoid_scores}


def _safe(gloss: str) -> str:
    return re.sub(r"[^A-Za-z0-9_-]+", "_", gloss) or "_"


class Dictionary:
    """Map gloss -> ordered candidate list, pinned to one kinematic tree."""

    def __init__(self, tree: KinematicTree):
        self.tree = tree
        self.entries: dict[str, list[Sign3D]] = {}
        self._count = 0

    @property
    def size(self) -> int:
        """Number of distinct glosses."""
        return len(self.entries)

    def __len__(self):
        return self.size

    def __contains__(self, gloss):
        return gloss in self.entries

    def glosses(self) -> list[str]:
        return list(self.entries)

    def candidates(self, gloss: str) -> list[Sign3D]:
        if gloss not in self.entries:
            raise DictionaryError(f"gloss {gloss!r} is not in the dictionary")
        return list(self.entries[gloss])

    def all_signs(self):
        for cands in self.entries.values():
            yield from cands

    def insert(self, sign: Sign3D) -> Sign3D:
        """Append a candidate; returns it with its assigned id."""
        digest = self.tree.digest()
        if sign.tree_hash and sign.tree_hash != digest:
            raise DictionaryError(f"sign {sign.gloss!r} was built for a different tree")
        if sign.frames[0].n_joints != self.tree.n_joints or sign.joints.shape[1] != self.tree.n_landmarks:
            raise DictionaryError(f"sign {sign.gloss!r} does not match tree {self.tree.name!r}")
        sid = sign.sign_id or f"{_safe(sign.gloss)}-{self._count:04d}"
        if any(c.sign_id == sid for c in self.all_signs()):
            raise DictionaryError(f"duplicate sign id {sid!r}")
        sign = sign.replace(sign_id=sid, tree_hash=digest)
        self.entries.setdefault(sign.gloss, []).append(sign)
        self._count += 1
        return sign

    def retrieve(self, gloss: str, scorer="auto") -> Sign3D:
        """Highest-scoring candidate; ties go to the earliest inserted."""
        cands = self.candidates(gloss)
        if len(cands) == 1:
            return cands[0]
        fn = SCORERS[scorer] if isinstance(scorer, str) else scorer
        scores = np.asarray(fn(cands), dtype=float)
        return cands[int(np.argmax(scores))]

    def set_confidences(self, scores: dict) -> None:
        for gloss, cands in self.entries.items():
            self.entries[gloss] = [
                c.replace(confidence=scores[c.sign_id]) if c.sign_id in scores else c for c in cands
            ]

    # ----------------------------------------------------------------- I/O

    def save(self, root) -> None:
        root = Path(root)
        (root / "signs").mkdir(parents=True, exist_ok=True)
        items = []
        for sign in self.all_signs():
            rel = f"signs/{sign.sign_id}.bin"
            write_sign(sign, root / rel)
            items.append(
                {
                    "id": sign.sign_id,
                    "gloss": sign.gloss,
                    "file": rel,
                    "frames": sign.n_frames,
                    "source": sign.source,
                    "confidence": sign.confidence,
                    "camera": None if sign.camera is None else sign.camera.to_dict(),
                }
            )
        index = {
            "format": DICT_FORMAT,
            "version": DICT_VERSION,
            "tree_hash": self.tree.digest(),
            "tree": self.tree.to_dict(),
            "signs": items,
        }
        with open(root / INDEX_NAME, "w", encoding="utf-8") as fh:
            json.dump(index, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, root) -> "Dictionary":
        root = Path(root)
        path = root / INDEX_NAME
        if not path.is_file():
            raise DictionaryError(f"no dictionary index at {path}")
        try:
            with open(path, encoding="utf-8") as fh:
                index = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DictionaryError(f"corrupt dictionary index {path}: {exc}") from exc
        if index.get("format") != DICT_FORMAT:
            raise DictionaryError(f"{path} is not a dictionary index")
        if index.get("version") != DICT_VERSION:
            raise DictionaryError(f"unsupported dictionary version {index.get('version')!r} in {path}")
        tree = KinematicTree.from_dict(index["tree"])
        if tree.digest() != index.get("tree_hash"):
            raise DictionaryError("embedded tree does not match its recorded hash")
        out = cls(tree)
        for item in index["signs"]:
            sign = read_sign(root / item["file"], tree)
            if sign.gloss != item["gloss"] or sign.sign_id != item["id"]:
                raise DictionaryError(f"sign file {item['file']} disagrees with the index")
            cam = item.get("camera")
            sign = sign.replace(
                source=item.get("source", ""),
                confidence=item.get("confidence"),
                camera=None if cam is None else CameraParams.from_dict(cam),
            )
            out.entries.setdefault(sign.gloss, []).append(sign)
            out._count += 1
        return out


def write_sign(sign: Sign3D, path) -> None:
    header = json.dumps(
        {
            "gloss": sign.gloss,
            "id": sign.sign_id,
            "frames": sign.n_frames,
            "joints": sign.frames[0].n_joints,
            "tree_hash": sign.tree_hash,
        },
        sort_keys=True,
    ).encode()
    payload = sign.params().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(SIGN_MAGIC)
        fh.write(struct.pack("<II", SIGN_VERSION, len(header)))
        fh.write(header)
        fh.write(payload.tobytes())


def read_sign(path, tree: KinematicTree) -> Sign3D:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DictionaryError(f"cannot read sign file {path}: {exc}") from exc
    if blob[:8] != SIGN_MAGIC:
        raise DictionaryError(f"{path} is not a sign file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != SIGN_VERSION:
        raise DictionaryError(f"unsupported sign file version {version} in {path}")
    head = json.loads(blob[16 : 16 + hlen])
    if head["tree_hash"] != tree.digest():
        raise DictionaryError(f"{path} was built for a different tree")
    width = 3 + N_SHAPE + N_EXPR + 3 * head["joints"]
    data = np.frombuffer(blob[16 + hlen :], dtype="<f4")
    if data.size != head["frames"] * width:
        raise DictionaryError(f"{path} payload is truncated")
    params = data.reshape(head["frames"], width).astype(np.float64)
    poses = [PoseParams.from_vector(row, head["joints"]) for row in params]
    joints = np.stack([forward_kinematics(tree, p) for p in poses])
    return Sign3D(head["gloss"], tuple(poses), joints, sign_id=head["id"], tree_hash=head["tree_hash"])


def load_confidences(path) -> dict:
    """Sidecar lines ``sign-id score``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DictionaryError(f"{path}:{n}: expected 'sign-id score'")
            out[parts[0]] = float(parts[1])
    return out
