"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 200]

Also checks that both backends agree on every input before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from signavatar import kernels
from signavatar.align import PosteriorMatrix, lattice
from signavatar.skeleton import default_tree, fk_state
from signavatar.synthetic import random_pose


def best_of(fn, args, repeat):
    fn(*args)  # warm-up (and jit compile)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba unavailable (or disabled); nothing to compare")

    rng = np.random.default_rng(0)
    tree = default_tree()
    pose = random_pose(tree, rng)
    st = fk_state(tree, pose)
    offsets = tree.rest_offsets
    theta = np.ascontiguousarray(pose.theta)
    g_lm = rng.normal(size=st.landmarks.shape)
    vjp_args = (tree.parents, st.world_rot, st.world_pos, theta, np.ascontiguousarray(pose.zeta),
                st.root_rot, tree.landmark_joint, st.landmarks, g_lm)

    probs = rng.dirichlet(np.ones(40), size=300)
    post = PosteriorMatrix(probs, tuple(f"G{i}" for i in range(40)))
    emit, can_skip, _ = lattice(post, rng.integers(1, 40, size=25))

    cases = {
        "fk_chain": (kernels.fk_chain_numba, kernels.fk_chain_numpy, (tree.parents, offsets, theta, st.root_rot)),
        "pose_vjp": (kernels.pose_vjp_numba, kernels.pose_vjp_numpy, vjp_args),
        "ctc_viterbi (T=300, N=25)": (kernels.ctc_viterbi_numba, kernels.ctc_viterbi_numpy, (emit, can_skip)),
    }
    print(f"{'kernel':28s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}")
    for name, (fast, slow, a) in cases.items():
        for x, y in zip(fast(*a), slow(*a)):
            assert np.allclose(x, y), f"{name}: backends disagree"
        tf, ts = best_of(fast, a, args.repeat), best_of(slow, a, args.repeat)
        print(f"{name:28s} {tf * 1e6:8.1f}us {ts * 1e6:8.1f}us {ts / tf:7.1f}x")


if __name__ == "__main__":
    main()
