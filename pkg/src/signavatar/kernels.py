"""Hot numeric kernels.

Every kernel exists twice: a loop version compiled with numba and a
vectorised numpy version. The public names (``fk_chain``, ``pose_vjp``,
``ctc_viterbi``) are bound to the numba variant unless numba is missing or
``SIGNAVATAR_NO_NUMBA`` is set. Both variants are importable directly so the
benchmark and the equivalence tests can compare them.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ._accel import HAVE_NUMBA, njit

SMALL_ANGLE = 1e-6


# --------------------------------------------------------------------------
# numba variants
# --------------------------------------------------------------------------


@njit(cache=True)
def _rodrigues_nb(v, out):
    th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    th = np.sqrt(th2)
    if th < SMALL_ANGLE:
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
    else:
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / th2
    x, y, z = v[0], v[1], v[2]
    out[0, 0] = 1.0 - b * (y * y + z * z)
    out[0, 1] = -a * z + b * x * y
    out[0, 2] = a * y + b * x * z
    out[1, 0] = a * z + b * x * y
    out[1, 1] = 1.0 - b * (x * x + z * z)
    out[1, 2] = -a * x + b * y * z
    out[2, 0] = -a * y + b * x * z
    out[2, 1] = a * x + b * y * z
    out[2, 2] = 1.0 - b * (x * x + y * y)


@njit(cache=True)
def _left_jac_t_apply_nb(v, w, out):
    # out = J_l(v)^T w, J_l^T = I - b[v] + c[v]^2
    th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    th = np.sqrt(th2)
    if th < SMALL_ANGLE:
        b = 0.5 - th2 / 24.0
        c = 1.0 / 6.0 - th2 / 120.0
    else:
        b = (1.0 - np.cos(th)) / th2
        c = (th - np.sin(th)) / (th2 * th)
    # v x w
    c1x = v[1] * w[2] - v[2] * w[1]
    c1y = v[2] * w[0] - v[0] * w[2]
    c1z = v[0] * w[1] - v[1] * w[0]
    # v x (v x w)
    c2x = v[1] * c1z - v[2] * c1y
    c2y = v[2] * c1x - v[0] * c1z
    c2z = v[0] * c1y - v[1] * c1x
    out[0] = w[0] - b * c1x + c * c2x
    out[1] = w[1] - b * c1y + c * c2y
    out[2] = w[2] - b * c1z + c * c2z


@njit(cache=True)
def fk_chain_numba(parents, offsets, aa, root_rot):
    n = parents.shape[0]
    world_rot = np.empty((n, 3, 3))
    world_pos = np.empty((n, 3))
    local = np.empty((3, 3))
    for j in range(n):
        _rodrigues_nb(aa[j], local)
        p = parents[j]
        if p < 0:
            world_rot[j] = root_rot @ local
            world_pos[j] = offsets[j]
        else:
            world_rot[j] = world_rot[p] @ local
            for r in range(3):
                world_pos[j, r] = (
                    world_pos[p, r]
                    + world_rot[p, r, 0] * offsets[j, 0]
                    + world_rot[p, r, 1] * offsets[j, 1]
                    + world_rot[p, r, 2] * offsets[j, 2]
                )
    return world_rot, world_pos


@njit(cache=True)
def pose_vjp_numba(parents, world_rot, world_pos, aa, zeta, root_rot, lm_joint, lm_pos, g_lm):
    n = parents.shape[0]
    force = np.zeros((n, 3))
    moment = np.zeros((n, 3))
    for i in range(lm_joint.shape[0]):
        j = lm_joint[i]
        p = lm_pos[i]
        g = g_lm[i]
        force[j, 0] += g[0]
        force[j, 1] += g[1]
        force[j, 2] += g[2]
        moment[j, 0] += p[1] * g[2] - p[2] * g[1]
        moment[j, 1] += p[2] * g[0] - p[0] * g[2]
        moment[j, 2] += p[0] * g[1] - p[1] * g[0]
    for j in range(n - 1, 0, -1):
        p = parents[j]
        for r in range(3):
            force[p, r] += force[j, r]
            moment[p, r] += moment[j, r]
    g_theta = np.empty((n, 3))
    g_zeta = np.empty(3)
    torque = np.empty(3)
    local = np.empty(3)
    out = np.empty(3)
    for a in range(n):
        q = world_pos[a]
        f = force[a]
        torque[0] = moment[a, 0] - (q[1] * f[2] - q[2] * f[1])
        torque[1] = moment[a, 1] - (q[2] * f[0] - q[0] * f[2])
        torque[2] = moment[a, 2] - (q[0] * f[1] - q[1] * f[0])
        p = parents[a]
        if p < 0:
            _left_jac_t_apply_nb(zeta, torque, g_zeta)
            pr = root_rot
        else:
            pr = world_rot[p]
        for r in range(3):
            local[r] = pr[0, r] * torque[0] + pr[1, r] * torque[1] + pr[2, r] * torque[2]
        _left_jac_t_apply_nb(aa[a], local, out)
        g_theta[a] = out
    return g_zeta, g_theta, force


@njit(cache=True)
def ctc_viterbi_numba(emit, can_skip):
    t_len, s_len = emit.shape
    neg_inf = -np.inf
    score = np.full((t_len, s_len), neg_inf)
    reach = np.zeros((t_len, s_len), dtype=np.bool_)
    back = np.zeros((t_len, s_len), dtype=np.int64)
    reach[0, 0] = True
    score[0, 0] = emit[0, 0]
    if s_len > 1:
        reach[0, 1] = True
        score[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        for s in range(s_len):
            best = neg_inf
            arg = -1
            lo = s - 2 if can_skip[s] else s - 1
            if lo < 0:
                lo = 0
            for q in range(lo, s + 1):
                if not reach[t - 1, q]:
                    continue
                v = score[t - 1, q]
                if arg < 0 or v > best:
                    best = v
                    arg = q
            if arg >= 0:
                reach[t, s] = True
                score[t, s] = best + emit[t, s]
                back[t, s] = arg
    path = np.empty(t_len, dtype=np.int64)
    last = t_len - 1
    end = -1
    lo = s_len - 2 if s_len > 1 else 0
    for s in range(lo, s_len):
        if reach[last, s] and (end < 0 or score[last, s] > score[last, end]):
            end = s
    if end < 0:
        return path, False
    path[last] = end
    for t in range(last, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, True


# --------------------------------------------------------------------------
# numpy variants
# --------------------------------------------------------------------------


def _skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _trig_coeffs(th2):
    th = np.sqrt(th2)
    small = th < SMALL_ANGLE
    safe = np.where(small, 1.0, th)
    a = np.where(small, 1.0 - th2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - th2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    c = np.where(small, 1.0 / 6.0 - th2 / 120.0, (safe - np.sin(safe)) / safe**3)
    return a, b, c


def rodrigues_batch(aa):
    """Rotation matrices for a stack of axis-angle vectors, shape (..., 3)."""
    aa = np.asarray(aa, dtype=float)
    th2 = np.sum(aa * aa, axis=-1)
    a, b, _ = _trig_coeffs(th2)
    k = _skew(aa)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def left_jacobian_t_apply(aa, w):
    """``J_l(aa)^T @ w`` for stacked inputs."""
    aa = np.asarray(aa, dtype=float)
    th2 = np.sum(aa * aa, axis=-1)
    _, b, c = _trig_coeffs(th2)
    c1 = np.cross(aa, w)
    c2 = np.cross(aa, c1)
    return w - b[..., None] * c1 + c[..., None] * c2


@lru_cache(maxsize=32)
def _levels(parents_key: bytes, n: int):
    parents = np.frombuffer(parents_key, dtype=np.int64, count=n)
    depth = np.zeros(n, dtype=np.int64)
    for j in range(n):
        if parents[j] >= 0:
            depth[j] = depth[parents[j]] + 1
    levels = [np.flatnonzero(depth == d) for d in range(int(depth.max()) + 1)]
    # subtree membership: anc[j, a] true when a is j or an ancestor of j
    anc = np.zeros((n, n))
    for j in range(n):
        a = j
        while a >= 0:
            anc[j, a] = 1.0
            a = parents[a]
    return levels, anc


def _tree_cache(parents):
    parents = np.ascontiguousarray(parents, dtype=np.int64)
    return _levels(parents.tobytes(), parents.shape[0])


def fk_chain_numpy(parents, offsets, aa, root_rot):
    levels, _ = _tree_cache(parents)
    n = parents.shape[0]
    local = rodrigues_batch(aa)
    world_rot = np.empty((n, 3, 3))
    world_pos = np.empty((n, 3))
    root = levels[0]
    world_rot[root] = root_rot @ local[root]
    world_pos[root] = offsets[root]
    for idx in levels[1:]:
        par = parents[idx]
        world_rot[idx] = world_rot[par] @ local[idx]
        world_pos[idx] = world_pos[par] + np.einsum("nij,nj->ni", world_rot[par], offsets[idx])
    return world_rot, world_pos


def pose_vjp_numpy(parents, world_rot, world_pos, aa, zeta, root_rot, lm_joint, lm_pos, g_lm):
    _, anc = _tree_cache(parents)
    n = parents.shape[0]
    owner = np.zeros((lm_joint.shape[0], n))
    owner[np.arange(lm_joint.shape[0]), lm_joint] = 1.0
    member = owner @ anc  # (J, N): landmark l lies in subtree of joint a
    force = member.T @ g_lm
    moment = member.T @ np.cross(lm_pos, g_lm)
    torque = moment - np.cross(world_pos, force)
    par_rot = np.where(parents[:, None, None] < 0, root_rot, world_rot[np.maximum(parents, 0)])
    local = np.einsum("nji,nj->ni", par_rot, torque)
    g_theta = left_jacobian_t_apply(aa, local)
    root = int(np.flatnonzero(parents < 0)[0])
    g_zeta = left_jacobian_t_apply(np.asarray(zeta, dtype=float), torque[root])
    return g_zeta, g_theta, force


def ctc_viterbi_numpy(emit, can_skip):
    t_len, s_len = emit.shape
    neg_inf = -np.inf
    score = np.full(s_len, neg_inf)
    reach = np.zeros(s_len, dtype=bool)
    back = np.zeros((t_len, s_len), dtype=np.int64)
    reach[0] = True
    score[0] = emit[0, 0]
    if s_len > 1:
        reach[1] = True
        score[1] = emit[0, 1]
    idx = np.arange(s_len)
    # candidate predecessor order is (s-2, s-1, s): ties go to the lowest index
    pred = np.stack([idx - 2, idx - 1, idx])
    valid = pred >= 0
    valid[0] &= can_skip
    pred_c = np.maximum(pred, 0)
    for t in range(1, t_len):
        r = valid & reach[pred_c]
        sc = np.where(r, score[pred_c], neg_inf)
        best = sc.max(axis=0)
        hit = r & (sc == best)
        choice = np.argmax(hit, axis=0)
        new_reach = r.any(axis=0)
        back[t] = pred_c[choice, idx]
        score = np.where(new_reach, best + emit[t], neg_inf)
        reach = new_reach
    path = np.empty(t_len, dtype=np.int64)
    ends = [s for s in range(max(s_len - 2, 0), s_len) if reach[s]]
    if not ends:
        return path, False
    end = ends[0]
    for s in ends[1:]:
        if score[s] > score[end]:
            end = s
    path[-1] = end
    for t in range(t_len - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, True


if HAVE_NUMBA:
    fk_chain = fk_chain_numba
    pose_vjp = pose_vjp_numba
    ctc_viterbi = ctc_viterbi_numba
else:  # pragma: no cover - exercised with SIGNAVATAR_NO_NUMBA=1
    fk_chain = fk_chain_numpy
    pose_vjp = pose_vjp_numpy
    ctc_viterbi = ctc_viterbi_numpy

BACKEND = "numba" if HAVE_NUMBA else "numpy"
