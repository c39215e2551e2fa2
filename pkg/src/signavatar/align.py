"""CTC forced alignment over frame posteriors, segmentation, co-articulation mining.

Class 0 of every posterior matrix is the blank (background) class. Frame
indices are 0-based and segment ranges are inclusive.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .skeleton import KinematicTree

BLANK = 0
BLANK_NAME = "<blank>"
POST_MAGIC = b"SAVPOST\0"
POST_VERSION = 1
COAR_MAGIC = b"SAVCOAR\0"
COAR_VERSION = 1


class AlignmentError(ValueError):
    """Infeasible alignment, bad labels or malformed posterior files."""


@dataclass(frozen=True, eq=False)
class PosteriorMatrix:
    probs: np.ndarray  # (T, C) rows sum to one, column 0 is blank
    class_names: tuple[str, ...]

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if p.ndim != 2 or p.shape[1] < 2 or p.shape[0] < 1:
            raise AlignmentError(f"posterior matrix must be (T >= 1, C >= 2), got {p.shape}")
        if len(self.class_names) != p.shape[1]:
            raise AlignmentError("class name table does not match the column count")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise AlignmentError("posteriors must be finite and nonnegative")
        bad = np.flatnonzero(np.abs(p.sum(axis=1) - 1.0) > 1e-6)
        if bad.size:
            raise AlignmentError(f"posterior row {int(bad[0])} sums to {p[bad[0]].sum():.8f}, not 1")

    @property
    def n_frames(self) -> int:
        return int(self.probs.shape[0])

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise AlignmentError(f"gloss {name!r} is not a posterior class") from None

    def encode(self, glosses) -> np.ndarray:
        return np.array([self.class_index(g) if isinstance(g, str) else int(g) for g in glosses], dtype=np.int64)


@dataclass(frozen=True)
class Segment:
    label: int
    start: int
    end: int  # inclusive

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise AlignmentError(f"bad segment range [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True, eq=False)
class CoarticulationSample:
    d_pre: np.ndarray  # (|J_SC|, 3) last frame of the earlier sign
    duration: int
    d_next: np.ndarray  # (|J_SC|, 3) first frame of the later sign
    source: str = ""

    def __post_init__(self):
        if self.duration < 0:
            raise AlignmentError("co-articulation duration must be nonnegative")
        if np.shape(self.d_pre) != np.shape(self.d_next):
            raise AlignmentError("boundary joint arrays differ in shape")


# --------------------------------------------------------------------------
# paths
# --------------------------------------------------------------------------


def path_probability(post: PosteriorMatrix, path) -> tuple[float, float]:
    """(probability, log-probability) of a per-frame labelling."""
    path = np.asarray(path, dtype=np.int64)
    if path.shape != (post.n_frames,):
        raise AlignmentError(f"path has length {path.size}, expected {post.n_frames}")
    if np.any((path < 0) | (path >= post.probs.shape[1])):
        raise AlignmentError("path label out of range")
    with np.errstate(divide="ignore"):
        logs = np.log(post.probs[np.arange(path.size), path])
    logp = 0.0
    for v in logs:  # time order, matching the lattice accumulation
        logp += v
    return math.exp(logp), float(logp)


def collapse(path, blank: int = BLANK) -> list[int]:
    out, prev = [], None
    for lab in np.asarray(path).tolist():
        if lab != prev and lab != blank:
            out.append(lab)
        prev = lab
    return out


def min_frames(glosses) -> int:
    g = list(glosses)
    return len(g) + sum(1 for a, b in zip(g, g[1:]) if a == b)


def lattice(post: PosteriorMatrix, glosses) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Emission log-probs (T, 2N+1), skip mask, and state labels."""
    g = np.asarray(glosses, dtype=np.int64)
    labels = np.zeros(2 * g.size + 1, dtype=np.int64)
    labels[1::2] = g
    can_skip = np.zeros(labels.size, dtype=np.bool_)
    for k in range(1, g.size):
        can_skip[2 * k + 1] = g[k] != g[k - 1]
    with np.errstate(divide="ignore"):
        emit = np.log(post.probs[:, labels])
    return np.ascontiguousarray(emit), can_skip, labels


def forced_align(post: PosteriorMatrix, glosses) -> np.ndarray:
    """Most probable labelling whose collapse equals ``glosses``.

    Ties between equally probable paths go to the lower lattice state,
    resolved from the last frame backwards.
    """
    g = post.encode(glosses)
    if g.size == 0:
        raise AlignmentError("gloss sequence is empty")
    if np.any((g <= BLANK) | (g >= post.probs.shape[1])):
        raise AlignmentError("gloss ids must name non-blank classes")
    need = min_frames(g.tolist())
    if post.n_frames < need:
        raise AlignmentError(f"{post.n_frames} frames cannot hold {g.size} glosses (need {need})")
    emit, can_skip, labels = lattice(post, g)
    states, ok = kernels.ctc_viterbi(emit, can_skip)
    if not ok:  # pragma: no cover - excluded by the length check
        raise AlignmentError("no feasible alignment")
    return labels[states]


def segments_from_path(path, blank: int = BLANK) -> list[Segment]:
    """Maximal runs of one non-blank label."""
    out = []
    path = np.asarray(path, dtype=np.int64)
    t = 0
    while t < path.size:
        lab = int(path[t])
        e = t
        while e + 1 < path.size and path[e + 1] == lab:
            e += 1
        if lab != blank:
            out.append(Segment(lab, t, e))
        t = e + 1
    return out


def path_from_segments(segments, n_frames: int, blank: int = BLANK) -> np.ndarray:
    path = np.full(n_frames, blank, dtype=np.int64)
    for s in segments:
        path[s.start : s.end + 1] = s.label
    return path


def extract_coarticulations(segments, video_joints, tree: KinematicTree, source: str = "") -> list[CoarticulationSample]:
    """One sample per adjacent segment pair, restricted to the connector landmarks."""
    joints = np.asarray(video_joints, dtype=float)
    sc = tree.named("connector")
    out = []
    for prev, nxt in zip(segments, segments[1:]):
        if prev.end >= joints.shape[0] or nxt.start >= joints.shape[0]:
            raise AlignmentError(f"segment frame beyond the {joints.shape[0]} fitted frames")
        gap = nxt.start - prev.end - 1
        if gap < 0:
            raise AlignmentError("segments overlap or are out of order")
        out.append(CoarticulationSample(joints[prev.end, sc].copy(), gap, joints[nxt.start, sc].copy(), source))
    return out


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def write_posteriors(post: PosteriorMatrix, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(post.class_names)
            for row in post.probs:
                w.writerow([repr(float(v)) for v in row])
        return
    with open(path, "wb") as fh:
        fh.write(POST_MAGIC)
        fh.write(struct.pack("<III", POST_VERSION, post.n_frames, post.probs.shape[1]))
        for name in post.class_names:
            b = name.encode()
            fh.write(struct.pack("<H", len(b)))
            fh.write(b)
        fh.write(post.probs.astype("<f4").tobytes())


def _renormalise(p):
    # float32 storage perturbs row sums by ~1e-7; restore exact normalisation
    p = np.asarray(p, dtype=np.float64)
    return p / p.sum(axis=1, keepdims=True)


def read_posteriors(path) -> PosteriorMatrix:
    path = Path(path)
    if not path.is_file():
        raise AlignmentError(f"posterior file not found: {path}")
    if path.suffix.lower() == ".csv":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise AlignmentError(f"{path}: empty posterior file")
        names = rows[0]
        try:
            data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        except ValueError as exc:
            raise AlignmentError(f"{path}: {exc}") from exc
        return PosteriorMatrix(data.reshape(-1, len(names)), names)
    blob = path.read_bytes()
    if blob[:8] != POST_MAGIC:
        raise AlignmentError(f"{path} is not a posterior file")
    version, t_len, c = struct.unpack("<III", blob[8:20])
    if version != POST_VERSION:
        raise AlignmentError(f"unsupported posterior file version {version}")
    off = 20
    names = []
    for _ in range(c):
        (n,) = struct.unpack("<H", blob[off : off + 2])
        names.append(blob[off + 2 : off + 2 + n].decode())
        off += 2 + n
    data = np.frombuffer(blob[off:], dtype="<f4")
    if data.size != t_len * c:
        raise AlignmentError(f"{path}: payload is truncated")
    return PosteriorMatrix(_renormalise(data.reshape(t_len, c)), names)


def read_gloss_manifest(path) -> dict[str, list[str]]:
    """Lines ``video-id gloss gloss ...``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) < 2:
                raise AlignmentError(f"{path}:{n}: video {parts[0]!r} has no glosses")
            out[parts[0]] = parts[1:]
    return out


def save_coarticulations(samples, path, connector_hash: str = "") -> None:
    if not samples:
        raise AlignmentError("no co-articulation samples to save")
    shape = np.shape(samples[0].d_pre)
    head = json.dumps(
        {"count": len(samples), "landmarks": shape[0], "connector": connector_hash,
         "sources": [s.source for s in samples]},
        sort_keys=True,
    ).encode()
    dur = np.array([s.duration for s in samples], dtype="<i4")
    pre = np.stack([s.d_pre for s in samples]).astype("<f8")
    nxt = np.stack([s.d_next for s in samples]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(COAR_MAGIC)
        fh.write(struct.pack("<II", COAR_VERSION, len(head)))
        fh.write(head)
        fh.write(dur.tobytes())
        fh.write(pre.tobytes())
        fh.write(nxt.tobytes())


def load_coarticulations(path) -> list[CoarticulationSample]:
    path = Path(path)
    if not path.is_file():
        raise AlignmentError(f"co-articulation file not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != COAR_MAGIC:
        raise AlignmentError(f"{path} is not a co-articulation file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != COAR_VERSION:
        raise AlignmentError(f"unsupported co-articulation file version {version}")
    head = json.loads(blob[16 : 16 + hlen])
    n, j = head["count"], head["landmarks"]
    off = 16 + hlen
    dur = np.frombuffer(blob[off : off + 4 * n], dtype="<i4")
    off += 4 * n
    size = n * j * 3 * 8
    pre = np.frombuffer(blob[off : off + size], dtype="<f8").reshape(n, j, 3)
    nxt = np.frombuffer(blob[off + size : off + 2 * size], dtype="<f8").reshape(n, j, 3)
    if nxt.shape[0] != n:
        raise AlignmentError(f"{path}: payload is truncated")
    return [
        CoarticulationSample(pre[i].copy(), int(dur[i]), nxt[i].copy(), head["sources"][i]) for i in range(n)
    ]
