"""Generate the bundled three-gloss toy dataset: ``python -m signavatar.toy DIR``.

Two synthetic continuous videos (keypoint streams plus frame posteriors),
a lexicon, predicted gloss sequences and a run config with a reduced
fitting budget. With ``--prebuild`` the align, build-dict and
train-connector commands are run on it and their dictionary and connector
model are stored next to the inputs.
"""

from __future__ import annotations

import argparse
import json
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .align import BLANK_NAME, PosteriorMatrix, write_posteriors
from .connector import interpolate
from .formats import write_keypoints
from .skeleton import KinematicTree, default_camera, default_tree, rest_pose
from .synthetic import render_keypoints

GLOSSES = ("HELLO", "RAIN", "NORTH")
LEXICON = {"hello": "HELLO", "rain": "RAIN", "north": "NORTH", "rainy": "RAIN"}
SIGN_FRAMES = 6

# (video id, gloss order, transition lengths, amplitude)
VIDEOS = (
    ("video01", ("HELLO", "RAIN", "NORTH"), (3, 4), 1.0),
    ("video02", ("NORTH", "HELLO", "RAIN"), (5, 2), 0.85),
)

# joint -> (start rotation, end rotation) in axis-angle, before amplitude scaling
_MOTIONS = {
    "HELLO": {
        "right_shoulder": ((0.0, 0.0, 1.1), (0.0, 0.3, 1.2)),
        "right_elbow": ((0.0, -1.2, 0.0), (0.0, -1.0, 0.0)),
        "right_wrist": ((0.0, 0.0, -0.4), (0.0, 0.0, 0.4)),
    },
    "RAIN": {
        "left_shoulder": ((-0.6, 0.0, -0.3), (-0.4, 0.0, -0.1)),
        "right_shoulder": ((-0.6, 0.0, 0.3), (-0.4, 0.0, 0.1)),
        "left_elbow": ((0.0, 1.0, 0.0), (0.0, 0.7, 0.0)),
        "right_elbow": ((0.0, -1.0, 0.0), (0.0, -0.7, 0.0)),
        "left_index1": ((0.0, 0.0, 0.0), (0.0, 0.0, -0.6)),
        "right_index1": ((0.0, 0.0, 0.0), (0.0, 0.0, 0.6)),
    },
    "NORTH": {
        "right_shoulder": ((0.0, 0.0, 1.4), (0.0, 0.0, 1.6)),
        "right_elbow": ((0.0, -0.3, 0.0), (0.0, -0.1, 0.0)),
        "right_middle1": ((0.0, 0.0, 0.8), (0.0, 0.0, 0.8)),
        "right_ring1": ((0.0, 0.0, 0.8), (0.0, 0.0, 0.8)),
        "right_pinky1": ((0.0, 0.0, 0.8), (0.0, 0.0, 0.8)),
    },
}


def sign_poses(tree: KinematicTree, gloss: str, amplitude: float = 1.0, n_frames: int = SIGN_FRAMES):
    idx = {n: i for i, n in enumerate(tree.joint_names)}
    lo, hi = tree.joint_limits[:, 0], tree.joint_limits[:, 1]
    out = []
    for t in np.linspace(0.0, 1.0, n_frames):
        theta = np.zeros((tree.n_joints, 3))
        for name, (a, b) in _MOTIONS[gloss].items():
            theta[idx[name]] = amplitude * ((1 - t) * np.asarray(a) + t * np.asarray(b))
        out.append(rest_pose(tree).replace(theta=np.clip(theta, lo, hi)))
    return out


def continuous_video(tree: KinematicTree, glosses, gaps, amplitude: float, lead: int = 2):
    """Poses and per-frame labels (0 = blank, k = 1-based gloss class)."""
    poses, labels = [], []
    rest = rest_pose(tree)
    prev_end = rest
    for k, g in enumerate(glosses):
        sign = sign_poses(tree, g, amplitude)
        gap = lead if k == 0 else gaps[k - 1]
        poses += interpolate(prev_end, sign[0], gap)
        labels += [0] * gap
        poses += sign
        labels += [GLOSSES.index(g) + 1] * len(sign)
        prev_end = sign[-1]
    poses += interpolate(prev_end, rest, lead)
    labels += [0] * lead
    return poses, np.array(labels)


def posteriors_for(labels, rng: np.random.Generator, peak: float = 0.8) -> PosteriorMatrix:
    n_cls = len(GLOSSES) + 1
    rest = rng.dirichlet(np.ones(n_cls - 1), size=labels.size) * (1.0 - peak)
    probs = np.empty((labels.size, n_cls))
    for t, lab in enumerate(labels):
        others = [c for c in range(n_cls) if c != lab]
        probs[t, lab] = peak
        probs[t, others] = rest[t]
    probs = probs.astype(np.float32).astype(np.float64)
    probs /= probs.sum(axis=1, keepdims=True)
    return PosteriorMatrix(probs, (BLANK_NAME,) + GLOSSES)


def toy_config() -> dict:
    return {
        "seed": 0,
        "paths": {
            "lexicon": "lexicon.tsv",
            "predictions": "predictions.tsv",
            "glosses": "glosses.txt",
            "posteriors": ".",
            "keypoints_dir": ".",
            "dictionary": "dictionary",
            "model": "connector.bin",
        },
        "schedule": {
            "stages": [
                {"name": "global", "variables": ["camera", "zeta"], "iterations": 20, "weights": {}},
                {"name": "shape", "variables": ["beta"], "iterations": 10, "weights": {}},
                {"name": "body", "variables": ["theta:body"], "iterations": 30, "weights": {"sigma": {"joint": 1000.0}}},
                {"name": "hands", "variables": ["theta:hands", "theta:face"], "iterations": 20,
                 "weights": {"sigma": {"joint": 1000.0}}},
                {"name": "refine", "variables": ["theta", "psi"], "iterations": 40, "weights": {}},
            ]
        },
        "calibration": {"max_frames": 6, "rigid_iters": 60, "shape_iters": 60},
        "connector": {"learning_rate": 1e-3, "epochs": 150, "batch_size": None, "max_duration": 12},
    }


def write_fixture(root, seed: int = 0) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tree = default_tree()
    cam = default_camera()
    rng = np.random.default_rng(seed)
    manifest = []
    for vid, glosses, gaps, amp in VIDEOS:
        poses, labels = continuous_video(tree, glosses, gaps, amp)
        kps = render_keypoints(tree, poses, cam, noise_px=0.5, rng=rng, confidence=0.95)
        write_keypoints(kps, root / f"{vid}.kps")
        post = posteriors_for(labels, rng)
        # one video in each posterior container format
        write_posteriors(post, root / (f"{vid}.post" if vid == "video01" else f"{vid}.csv"))
        manifest.append(f"{vid} {' '.join(glosses)}")
    (root / "glosses.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    (root / "lexicon.tsv").write_text(
        "".join(f"{w}\t{g}\n" for w, g in sorted(LEXICON.items())), encoding="utf-8"
    )
    (root / "predictions.tsv").write_text(
        "s1\tHELLO RAIN NORTH\ns2\tNORTH RAIN\ns3\tRAIN\n", encoding="utf-8"
    )
    (root / "config.json").write_text(json.dumps(toy_config(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return root


def prebuild(root, workers: int = 1) -> None:
    """Run align, build-dict and train-connector; keep the dictionary and model."""
    from .cli import run

    root = Path(root)
    cfg = str(root / "config.json")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        steps = [
            ["align", "--config", cfg, "--out", str(tmp / "align"), "--workers", str(workers)],
            ["build-dict", "--config", cfg, "--alignments", str(tmp / "align"), "--out", str(tmp / "dict")],
            ["train-connector", "--config", cfg, "--coarticulations", str(tmp / "align" / "coarticulations.bin"),
             "--out", str(tmp / "conn")],
        ]
        for argv in steps:
            code = run(argv)
            if code:
                raise RuntimeError(f"toy prebuild step {argv[0]} failed with exit code {code}")
        shutil.rmtree(root / "dictionary", ignore_errors=True)
        shutil.copytree(tmp / "dict" / "dictionary", root / "dictionary")
        shutil.copyfile(tmp / "align" / "coarticulations.bin", root / "coarticulations.bin")
        shutil.copyfile(tmp / "conn" / "connector.bin", root / "connector.bin")


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--prebuild", action="store_true")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)
    write_fixture(args.root, args.seed)
    if args.prebuild:
        prebuild(args.root, args.workers)


if __name__ == "__main__":
    main()
