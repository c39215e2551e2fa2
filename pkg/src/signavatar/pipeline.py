"""Text to 3D signs, keypoint augmentation, multi-view projection and metrics."""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .connector import MlpModel, StitchedSequence, stitch
from .dictionary import Dictionary, Sign3D
from .skeleton import (
    CameraParams,
    Keypoints2D,
    KinematicTree,
    project,
    project_pose,
    rotate_global,
    to_camera,
)


class TranslationError(ValueError):
    pass


class MetricError(ValueError):
    pass


# --------------------------------------------------------------------------
# text to gloss
# --------------------------------------------------------------------------


class Text2GlossTranslator:
    """Interface: ``translate(text) -> list of glosses``."""

    def translate(self, text: str) -> list[str]:  # pragma: no cover - interface
        raise NotImplementedError


_PUNCT = re.compile(r"[^\w\s'-]+")


def normalise_text(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


class LexiconTranslator(Text2GlossTranslator):
    """Word table lookup after lowercasing and stripping punctuation."""

    def __init__(self, table: dict, unknown: str = "skip"):
        if unknown not in ("skip", "error"):
            raise ValueError("unknown-word policy must be 'skip' or 'error'")
        self.table = {k.lower(): v for k, v in table.items()}
        self.unknown = unknown
        self.skipped: list[str] = []

    @classmethod
    def from_file(cls, path, unknown: str = "skip") -> "LexiconTranslator":
        table = {}
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise TranslationError(f"{path}:{n}: expected 'word<TAB>gloss'")
                table[parts[0].strip()] = parts[1].strip()
        return cls(table, unknown)

    def translate(self, text: str) -> list[str]:
        out = []
        self.skipped = []
        for word in normalise_text(text):
            if word in self.table:
                out.append(self.table[word])
            elif self.unknown == "error":
                raise TranslationError(f"word {word!r} is not in the lexicon")
            else:
                self.skipped.append(word)
        return out


class FileTranslator(Text2GlossTranslator):
    """Pre-computed gloss sequences keyed by sentence id."""

    def __init__(self, table: dict):
        self.table = dict(table)

    @classmethod
    def from_file(cls, path) -> "FileTranslator":
        table = {}
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise TranslationError(f"{path}:{n}: expected 'sentence-id<TAB>gloss gloss ...'")
                table[parts[0].strip()] = parts[1].split()
        return cls(table)

    def translate(self, text: str) -> list[str]:
        if text not in self.table:
            raise TranslationError(f"no gloss prediction for sentence {text!r}")
        return list(self.table[text])


def text2gloss(translator: Text2GlossTranslator, text: str) -> list[str]:
    return translator.translate(text)


@dataclass(eq=False)
class Translation:
    sequence: StitchedSequence
    manifest: dict
    warnings: list = field(default_factory=list)


def translate(
    text: str,
    translator: Text2GlossTranslator,
    dictionary: Dictionary,
    model: MlpModel | None,
    mode: str = "pose",
    unknown: str = "skip",
    scorer="auto",
) -> Translation:
    """Text -> glosses -> retrieved signs -> stitched sequence plus a manifest."""
    glosses = text2gloss(translator, text)
    notes = [f"unknown word skipped: {w}" for w in getattr(translator, "skipped", [])]
    signs, used = [], []
    for g in glosses:
        if g not in dictionary:
            if unknown == "error":
                raise TranslationError(f"gloss {g!r} is not in the dictionary")
            notes.append(f"gloss not in dictionary, skipped: {g}")
            continue
        signs.append(dictionary.retrieve(g, scorer))
        used.append(g)
    if not signs:
        raise TranslationError(f"no signs to produce for {text!r}")
    seq = stitch(signs, model, dictionary.tree, mode)
    manifest = {
        "text": text,
        "glosses": glosses,
        "used_glosses": used,
        "candidates": [s.sign_id for s in signs],
        "durations": list(seq.durations),
        "mode": mode,
        "frames": seq.n_frames,
        "blocks": [
            {"kind": kind, "index": k, "start": start, "length": length}
            for kind, k, start, length in seq.blocks()
        ],
        "warnings": notes,
    }
    for msg in notes:
        warnings.warn(msg, stacklevel=2)
    return Translation(seq, manifest, notes)


# --------------------------------------------------------------------------
# augmentation and views
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    max_angle: float = math.radians(20.0)  # radians
    axis: tuple = (0.0, 1.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.max_angle < 0:
            raise ValueError("augmentation range must be nonnegative")

    def sample(self) -> float:
        if self.max_angle == 0:
            return 0.0
        return float(np.random.default_rng(self.seed).uniform(-self.max_angle, self.max_angle))


@dataclass(eq=False)
class Augmented:
    delta: float  # radians
    keypoints: list


def augment_3d(
    sign: Sign3D, cfg: AugmentConfig, cam: CameraParams, tree: KinematicTree, delta: float | None = None
) -> Augmented:
    """Rotate every frame's global orientation by one sampled angle and project.

    ``delta`` overrides the sampled angle.
    """
    d = cfg.sample() if delta is None else float(delta)
    ones = np.ones(tree.n_landmarks)
    kps = [Keypoints2D(project_pose(tree, rotate_global(p, d, cfg.axis), cam), ones) for p in sign.frames]
    return Augmented(d, kps)


def _axis_rotation(angle: float, axis) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def multiview_project(
    sign: Sign3D, cam: CameraParams, tree: KinematicTree, angles_deg=(0.0, 60.0), axis=(0.0, 1.0, 0.0)
) -> list[list[Keypoints2D]]:
    """One 2D sequence per view angle, rotating the cached landmarks about the root."""
    ones = np.ones(tree.n_landmarks)
    out = []
    for ang in angles_deg:
        rot = _axis_rotation(math.radians(ang), axis)
        out.append(
            [Keypoints2D(project(to_camera(j @ rot.T, cam), cam, tree.landmark_names), ones) for j in sign.joints]
        )
    return out


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def metric_2d_kl(pred, ref) -> float:
    """Confidence-weighted mean pixel distance between two keypoint sequences."""
    pred, ref = list(pred), list(ref)
    if len(pred) != len(ref):
        raise MetricError(f"sequence lengths differ: {len(pred)} vs {len(ref)}")
    if not pred:
        raise MetricError("empty sequences")
    num = den = 0.0
    for p, r in zip(pred, ref):
        if p.coords.shape != r.coords.shape:
            raise MetricError("landmark counts differ")
        dist = np.linalg.norm(p.coords - r.coords, axis=1)
        num += float(np.sum(r.confidence * dist))
        den += float(np.sum(r.confidence))
    if den == 0:
        raise MetricError("reference confidences are all zero")
    return num / den


def metric_tc(frames) -> float:
    """Mean cosine similarity of consecutive flattened frames."""
    vecs = [np.asarray(f.coords if isinstance(f, Keypoints2D) else f, dtype=float).ravel() for f in frames]
    if len(vecs) < 2:
        raise MetricError("temporal consistency needs at least two frames")
    norms = [float(np.linalg.norm(v)) for v in vecs]
    sims = []
    for k in range(len(vecs) - 1):
        if norms[k] == 0 or norms[k + 1] == 0:
            warnings.warn(f"zero frame near index {k}; pair skipped", stacklevel=2)
            continue
        sims.append(float(vecs[k] @ vecs[k + 1]) / (norms[k] * norms[k + 1]))
    if not sims:
        raise MetricError("every frame pair involves a zero frame")
    return float(np.mean(sims))


def project_sequence(joints, cam: CameraParams, tree: KinematicTree) -> list[Keypoints2D]:
    """World-frame landmark frames (F, J, 3) to keypoint frames with unit confidence."""
    ones = np.ones(tree.n_landmarks)
    return [Keypoints2D(project(to_camera(j, cam), cam, tree.landmark_names), ones) for j in joints]
