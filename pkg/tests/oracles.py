"""Independent reference implementations used as test oracles.

Each one follows the textbook definition as directly as possible and shares
no code with the package beyond plain data types.
"""

from __future__ import annotations

import itertools

import numpy as np


def expm_series(aa, terms: int = 40) -> np.ndarray:
    """Rotation matrix as the truncated power series of exp([aa]x)."""
    x, y, z = aa
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    out = np.eye(3)
    term = np.eye(3)
    for n in range(1, terms):
        term = term @ k / n
        out = out + term
    return out


def homogeneous(rot, trans) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = trans
    return m


def fk_4x4(parents, offsets, theta, zeta) -> np.ndarray:
    """World joint positions by chaining 4x4 transforms, one joint at a time.

    The global rotation acts about the root joint, after its own rotation.
    """
    n = len(parents)
    world = [None] * n
    for j in range(n):
        if parents[j] < 0:
            world[j] = homogeneous(np.eye(3), offsets[j]) @ homogeneous(
                expm_series(zeta) @ expm_series(theta[j]), np.zeros(3)
            )
        else:
            world[j] = world[parents[j]] @ homogeneous(expm_series(theta[j]), offsets[j])
    return np.array([w[:3, 3] for w in world])


def project_scalar(point, focal, cx, cy):
    x, y, z = (float(v) for v in point)
    return focal * x / z + cx, focal * y / z + cy


def ctc_feasible(path, glosses, blank=0) -> bool:
    out, prev = [], None
    for lab in path:
        if lab != prev and lab != blank:
            out.append(lab)
        prev = lab
    return out == list(glosses)


def ctc_brute_force(probs, glosses, blank=0):
    """Best feasible labelling by enumerating every labelling of length T.

    Ties are broken like the package's documented rule: among equally likely
    paths, compare lattice states from the last frame backwards and prefer
    the lower one. Log-probabilities are summed in time order.
    """
    t_len, n_cls = probs.shape
    g = list(glosses)
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    best = None
    alphabet = sorted({blank, *g})
    for path in itertools.product(alphabet, repeat=t_len):
        if not ctc_feasible(path, g, blank):
            continue
        states = _lattice_states(path, g, blank)
        lp = 0.0
        for t, lab in enumerate(path):
            lp += logp[t, lab]
        key = (lp, tuple(-s for s in reversed(states)))
        if best is None or key > best[0]:
            best = (key, path)
    return None if best is None else np.array(best[1])


def random_ctc_instance(rng, max_t=6, max_n=3, max_v=3):
    """Strictly positive posteriors; a third of them use small integers to force ties."""
    from signavatar.align import BLANK_NAME, PosteriorMatrix, min_frames

    while True:
        v = int(rng.integers(1, max_v + 1))
        n = int(rng.integers(1, max_n + 1))
        t_len = int(rng.integers(1, max_t + 1))
        g = rng.integers(1, v + 1, n).tolist()
        if t_len >= min_frames(g):
            break
    if rng.random() < 1 / 3:
        p = rng.integers(1, 4, (t_len, v + 1)).astype(float)
    else:
        p = rng.random((t_len, v + 1)) + 1e-3
    p /= p.sum(axis=1, keepdims=True)
    return PosteriorMatrix(p, (BLANK_NAME,) + tuple(f"G{i}" for i in range(1, v + 1))), g


def _lattice_states(path, glosses, blank):
    """Map a feasible path to its CTC lattice states (blank 2k, gloss 2k+1)."""
    states, k, prev = [], -1, None
    for lab in path:
        if lab == blank:
            states.append(2 * (k + 1))
        else:
            if lab != prev:
                k += 1
            states.append(2 * k + 1)
        prev = lab
    return states


def mlp_manual(weights, biases, x):
    """Scalar-by-scalar forward pass with ReLU between layers."""
    h = list(map(float, x))
    for k, (w, b) in enumerate(zip(weights, biases)):
        nxt = []
        for o in range(w.shape[1]):
            acc = float(b[o])
            for i in range(w.shape[0]):
                acc += h[i] * float(w[i, o])
            if k < len(weights) - 1:
                acc = max(acc, 0.0)
            nxt.append(acc)
        h = nxt
    return h[0]


def axis_rotation(angle, axis) -> np.ndarray:
    """Rotation about a unit axis via the exponential series."""
    a = np.asarray(axis, dtype=float)
    return expm_series(angle * a / np.linalg.norm(a))


def rotate_then_project(world_points, angle, axis, cam_rot, cam_t, focal, principal):
    rot = axis_rotation(angle, axis)
    out = []
    for p in world_points:
        q = cam_rot @ (rot @ p) + cam_t
        out.append(project_scalar(q, focal, principal[0], principal[1]))
    return np.array(out)


def central_difference(f, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def objective_case(tree, cam, rng):
    """Random pose, noisy partly-unseen keypoints and a random predecessor."""
    from signavatar.objective import FrameObservation
    from signavatar.skeleton import Keypoints2D, PoseParams, project_pose

    n = tree.n_joints

    def draw():
        return PoseParams(rng.normal(0, 0.2, 3), rng.normal(0, 0.3, 10), rng.normal(0, 0.5, 10), rng.normal(0, 0.4, (n, 3)))

    pose = draw()
    kp = Keypoints2D(project_pose(tree, draw(), cam) + rng.normal(0, 20, (tree.n_landmarks, 2)),
                     rng.uniform(0, 1, tree.n_landmarks))
    return pose, FrameObservation(kp, prev_theta=rng.normal(0, 0.4, (n, 3)))


def objective_fd(tree, cam, pose, obs, weights, step=1e-6):
    """Central differences of every term and of the total over (pose vector, translation)."""
    from signavatar.objective import TERMS, evaluate
    from signavatar.skeleton import PoseParams

    x0 = np.concatenate([pose.to_vector(), cam.translation])
    n = tree.n_joints

    def values(x):
        ev = evaluate(PoseParams.from_vector(x[:-3], n), tree, cam.replace(translation=x[-3:]), obs, weights)
        return np.array([ev.terms[t] for t in TERMS] + [ev.value])

    out = np.zeros((len(TERMS) + 1, x0.size))
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = step
        out[:, i] = (values(x0 + e) - values(x0 - e)) / (2 * step)
    return {name: out[k] for k, name in enumerate(TERMS + ("total",))}


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def gm(e, sigma):
    return sigma**2 * e**2 / (sigma**2 + e**2)


def slerp_angle_check(angle_a, angle_b, t):
    return (1 - t) * angle_a + t * angle_b


__all__ = [name for name in dir() if not name.startswith("_") and name not in ("itertools", "math", "np")]
