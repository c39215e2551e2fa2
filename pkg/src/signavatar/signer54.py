"""Builder for the bundled ``signer54`` tree config.

22 body joints, one jaw and one eye placeholder, 15 joints per hand. The
118 landmarks follow the body-25 + 2x21 hand + 51 face layout. Regenerate
the shipped JSON with ``python -m signavatar.signer54 src/signavatar/data/signer54.json``.
"""

from __future__ import annotations

import sys

import numpy as np

from .skeleton import N_SHAPE, KinematicTree, save_tree

# name, parent, offset (metres, y up, signer faces +z, left is +x)
BODY = [
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("left_hip", 0, (0.09, -0.08, 0.0)),
    ("right_hip", 0, (-0.09, -0.08, 0.0)),
    ("spine1", 0, (0.0, 0.11, -0.01)),
    ("left_knee", 1, (0.0, -0.38, 0.0)),
    ("right_knee", 2, (0.0, -0.38, 0.0)),
    ("spine2", 3, (0.0, 0.13, 0.0)),
    ("left_ankle", 4, (0.0, -0.40, -0.02)),
    ("right_ankle", 5, (0.0, -0.40, -0.02)),
    ("spine3", 6, (0.0, 0.06, 0.02)),
    ("left_foot", 7, (0.0, -0.05, 0.12)),
    ("right_foot", 8, (0.0, -0.05, 0.12)),
    ("neck", 9, (0.0, 0.21, -0.01)),
    ("left_collar", 9, (0.07, 0.12, -0.01)),
    ("right_collar", 9, (-0.07, 0.12, -0.01)),
    ("head", 12, (0.0, 0.09, 0.04)),
    ("left_shoulder", 13, (0.11, 0.04, -0.01)),
    ("right_shoulder", 14, (-0.11, 0.04, -0.01)),
    ("left_elbow", 16, (0.26, 0.0, 0.0)),
    ("right_elbow", 17, (-0.26, 0.0, 0.0)),
    ("left_wrist", 18, (0.25, 0.0, 0.0)),
    ("right_wrist", 19, (-0.25, 0.0, 0.0)),
    ("jaw", 15, (0.0, -0.02, 0.03)),
    ("eyes", 15, (0.0, 0.06, 0.07)),
]

# finger base offset from the wrist, unit direction, phalanx lengths, tip length
FINGERS = {
    "index": ((0.090, 0.0, 0.025), (1.0, 0.0, 0.05), (0.035, 0.022, 0.020)),
    "middle": ((0.095, 0.0, 0.005), (1.0, 0.0, 0.0), (0.040, 0.025, 0.022)),
    "pinky": ((0.080, 0.0, -0.035), (1.0, 0.0, -0.08), (0.025, 0.018, 0.018)),
    "ring": ((0.090, 0.0, -0.015), (1.0, 0.0, -0.04), (0.038, 0.023, 0.020)),
    "thumb": ((0.025, -0.010, 0.030), (0.7, -0.1, 0.7), (0.030, 0.030, 0.025)),
}
FINGER_ORDER = ["index", "middle", "pinky", "ring", "thumb"]  # joint order
HAND_LANDMARK_ORDER = ["thumb", "index", "middle", "ring", "pinky"]  # landmark order

BODY25 = [
    ("nose", "head", (0.0, 0.02, 0.10)),
    ("neck", "neck", None),
    ("right_shoulder", "right_shoulder", None),
    ("right_elbow", "right_elbow", None),
    ("right_wrist", "right_wrist", None),
    ("left_shoulder", "left_shoulder", None),
    ("left_elbow", "left_elbow", None),
    ("left_wrist", "left_wrist", None),
    ("mid_hip", "pelvis", None),
    ("right_hip", "right_hip", None),
    ("right_knee", "right_knee", None),
    ("right_ankle", "right_ankle", None),
    ("left_hip", "left_hip", None),
    ("left_knee", "left_knee", None),
    ("left_ankle", "left_ankle", None),
    ("right_eye", "eyes", (-0.032, 0.0, 0.0)),
    ("left_eye", "eyes", (0.032, 0.0, 0.0)),
    ("right_ear", "head", (-0.075, 0.04, 0.0)),
    ("left_ear", "head", (0.075, 0.04, 0.0)),
    ("left_big_toe", "left_foot", (0.02, -0.02, 0.08)),
    ("left_small_toe", "left_foot", (0.06, -0.02, 0.06)),
    ("left_heel", "left_ankle", (0.0, -0.06, -0.06)),
    ("right_big_toe", "right_foot", (-0.02, -0.02, 0.08)),
    ("right_small_toe", "right_foot", (-0.06, -0.02, 0.06)),
    ("right_heel", "right_ankle", (0.0, -0.06, -0.06)),
]

SHAPE_GROUPS = {
    # component index -> (joint-name predicate, coefficient)
    0: (lambda n: True, 0.10),
    1: (lambda n: any(k in n for k in ("elbow", "wrist")), 0.12),
    2: (lambda n: n.startswith("spine") or n == "neck", 0.10),
    3: (lambda n: any(k in n for k in ("hip", "knee", "ankle", "foot")), 0.10),
    4: (lambda n: any(f in n for f in FINGERS), 0.10),
    5: (lambda n: "collar" in n or "shoulder" in n, 0.10),
    6: (lambda n: n in ("head", "jaw", "eyes"), 0.10),
    7: (lambda n: n.startswith("left_") and any(k in n for k in ("elbow", "wrist")), 0.05),
    8: (lambda n: "elbow" in n, 0.06),
    9: (lambda n: "thumb" in n, 0.08),
}


def _limit(name: str) -> float:
    if name == "pelvis":
        return np.pi
    if name.startswith("spine"):
        return 0.8
    if name in ("neck", "head"):
        return 1.0
    if "collar" in name:
        return 0.6
    if "shoulder" in name:
        return 2.8
    if "elbow" in name:
        return 2.6
    if "wrist" in name:
        return 1.6
    if name in ("jaw", "eyes"):
        return 0.4
    if any(f in name for f in FINGERS):
        return 1.6
    return 2.5


def _face_points():
    """51 face landmarks: (name, joint, offset) relative to head / eyes / jaw."""
    pts = []
    for side, sx in (("right", -1.0), ("left", 1.0)):
        for k, x in enumerate(np.linspace(0.055, 0.015, 5)):
            y = 0.085 + 0.008 * np.sin(np.pi * k / 4)
            pts.append((f"{side}_brow_{k}", "head", (sx * x, y, 0.085)))
    for k, (y, z) in enumerate([(0.07, 0.100), (0.055, 0.105), (0.04, 0.110), (0.03, 0.115)]):
        pts.append((f"nose_bridge_{k}", "head", (0.0, y, z)))
    for k, x in enumerate(np.linspace(-0.02, 0.02, 5)):
        pts.append((f"nose_base_{k}", "head", (float(x), 0.02, 0.098)))
    for side, sx in (("right", -1.0), ("left", 1.0)):
        for k in range(6):
            ang = 2 * np.pi * k / 6
            pts.append(
                (f"{side}_eye_{k}", "eyes", (sx * 0.032 + 0.012 * np.cos(ang), 0.005 * np.sin(ang), 0.015))
            )
    for k in range(12):
        ang = 2 * np.pi * k / 12
        pts.append((f"mouth_outer_{k}", "jaw", (0.025 * np.cos(ang), 0.012 * np.sin(ang), 0.065)))
    for k in range(8):
        ang = 2 * np.pi * k / 8
        pts.append((f"mouth_inner_{k}", "jaw", (0.016 * np.cos(ang), 0.005 * np.sin(ang), 0.066)))
    return pts


def build_signer54() -> KinematicTree:
    names, parents, offsets = [], [], []
    for name, par, off in BODY:
        names.append(name)
        parents.append(par)
        offsets.append(off)
    finger_joint = {}
    for side, sx in (("left", 1.0), ("right", -1.0)):
        wrist = names.index(f"{side}_wrist")
        for finger in FINGER_ORDER:
            base, direction, lengths = FINGERS[finger]
            d = np.asarray(direction) / np.linalg.norm(direction)
            d = d * [sx, 1.0, 1.0]
            prev = wrist
            for k in range(3):
                off = np.asarray(base) * [sx, 1.0, 1.0] if k == 0 else d * lengths[k - 1]
                nm = f"{side}_{finger}{k + 1}"
                names.append(nm)
                parents.append(prev)
                offsets.append(tuple(float(v) for v in off))
                prev = len(names) - 1
                finger_joint[nm] = prev
            finger_joint[f"{side}_{finger}_tip"] = (prev, tuple(float(v) for v in d * lengths[2]))
    n = len(names)
    assert n == 54, n

    basis = np.zeros((n, N_SHAPE))
    for comp, (pred, coef) in SHAPE_GROUPS.items():
        for i, nm in enumerate(names):
            if i and pred(nm):
                basis[i, comp] = coef
    weight = np.array(
        [2.0 if any(f in nm for f in FINGERS) or "wrist" in nm else 0.5 if nm in ("jaw", "eyes") else 1.0 for nm in names]
    )
    lim = np.array([_limit(nm) for nm in names])
    limits = np.stack([-np.repeat(lim[:, None], 3, 1), np.repeat(lim[:, None], 3, 1)], axis=1)

    lm_names, lm_joint, lm_off, lm_w = [], [], [], []

    def add(name, joint, off, w):
        lm_names.append(name)
        lm_joint.append(joint)
        lm_off.append(off if off is not None else (0.0, 0.0, 0.0))
        lm_w.append(w)

    for name, jname, off in BODY25:
        add(name, names.index(jname), off, 1.0)
    hands = {}
    for side in ("left", "right"):
        start = len(lm_names)
        add(f"{side}_hand_wrist", names.index(f"{side}_wrist"), None, 2.0)
        for finger in HAND_LANDMARK_ORDER:
            for k in range(3):
                add(f"{side}_hand_{finger}{k + 1}", finger_joint[f"{side}_{finger}{k + 1}"], None, 2.0)
            j, off = finger_joint[f"{side}_{finger}_tip"]
            add(f"{side}_hand_{finger}_tip", j, off, 2.0)
        hands[side] = list(range(start, len(lm_names)))
    face_start = len(lm_names)
    for name, jname, off in _face_points():
        add(name, names.index(jname), tuple(float(v) for v in off), 0.5)
    assert len(lm_names) == 118, len(lm_names)

    sets = {
        "body": list(range(25)),
        "left_hand": hands["left"],
        "right_hand": hands["right"],
        "face": list(range(face_start, 118)),
        "upright": [lm_names.index("neck"), lm_names.index("mid_hip")],
        "connector": sorted(
            [lm_names.index("left_elbow"), lm_names.index("right_elbow")] + hands["left"] + hands["right"]
        ),
    }
    return KinematicTree(
        name="signer54",
        joint_names=tuple(names),
        parents=parents,
        rest_offsets=offsets,
        shape_basis=basis,
        joint_weight=weight,
        joint_limits=limits,
        landmark_names=tuple(lm_names),
        landmark_joint=lm_joint,
        landmark_offset=lm_off,
        landmark_weight=lm_w,
        sets=sets,
        joint_sets={
            "body": list(range(22)),
            "face": [names.index("jaw"), names.index("eyes")],
            "hands": list(range(24, 54)),
            "left_hand": list(range(24, 39)),
            "right_hand": list(range(39, 54)),
        },
    )


if __name__ == "__main__":
    save_tree(build_signer54(), sys.argv[1])
