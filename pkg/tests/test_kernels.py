from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from signavatar import kernels
from signavatar.align import PosteriorMatrix, BLANK_NAME, lattice
from signavatar.skeleton import fk_state
from signavatar.synthetic import random_pose

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba unavailable")


def test_rodrigues_batch_small_angle_branch():
    tiny = np.array([1e-9, -2e-9, 3e-9])
    r = kernels.rodrigues_batch(tiny)
    assert np.allclose(r, np.eye(3) + np.array([[0, -tiny[2], tiny[1]], [tiny[2], 0, -tiny[0]], [-tiny[1], tiny[0], 0]]))


@needs_numba
def test_fk_chain_backends_agree(tree, rng):
    for _ in range(5):
        pose = random_pose(tree, rng)
        args = (tree.parents, np.array(tree.rest_offsets), np.ascontiguousarray(pose.theta),
                kernels.rodrigues_batch(rng.normal(0, 0.3, 3)))
        r1, p1 = kernels.fk_chain_numba(*args)
        r2, p2 = kernels.fk_chain_numpy(*args)
        assert np.allclose(r1, r2, atol=1e-12) and np.allclose(p1, p2, atol=1e-12)


@needs_numba
def test_pose_vjp_backends_agree(tree, rng):
    pose = random_pose(tree, rng).replace(zeta=rng.normal(0, 0.3, 3))
    st = fk_state(tree, pose)
    g = rng.normal(size=st.landmarks.shape)
    args = (tree.parents, st.world_rot, st.world_pos, np.ascontiguousarray(pose.theta),
            np.ascontiguousarray(pose.zeta), st.root_rot, tree.landmark_joint, st.landmarks, g)
    for a, b in zip(kernels.pose_vjp_numba(*args), kernels.pose_vjp_numpy(*args)):
        assert np.allclose(a, b, atol=1e-10)


@needs_numba
def test_ctc_backends_agree(rng):
    for _ in range(50):
        t_len = int(rng.integers(3, 12))
        g = rng.integers(1, 4, int(rng.integers(1, 4)))
        p = rng.random((t_len, 4)) + 1e-3
        post = PosteriorMatrix(p / p.sum(1, keepdims=True), (BLANK_NAME, "A", "B", "C"))
        emit, skip, _ = lattice(post, g)
        s1, ok1 = kernels.ctc_viterbi_numba(emit, skip)
        s2, ok2 = kernels.ctc_viterbi_numpy(emit, skip)
        assert ok1 == ok2
        if ok1:
            assert np.array_equal(s1, s2)


def test_numpy_backend_selected_by_env():
    env = dict(os.environ, SIGNAVATAR_NO_NUMBA="1")
    code = "from signavatar import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
