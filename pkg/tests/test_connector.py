from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, mlp_manual, rel_err
from signavatar.align import CoarticulationSample
from signavatar.connector import (
    ConnectorError,
    ConnectorTrainConfig,
    MlpModel,
    evaluate_l1,
    featurize,
    fixed_duration,
    init_mlp,
    interpolate,
    load_model,
    mlp_backward,
    mlp_forward,
    predict_duration,
    save_model,
    stitch,
    train_connector,
)
from signavatar.dictionary import Sign3D
from signavatar.skeleton import rest_pose, rodrigues
from signavatar.synthetic import coarticulation_dataset, random_pose

coords = arrays(np.float64, (2, 3), elements=st.floats(-5, 5, allow_nan=False))


# features ------------------------------------------------------------------


def test_featurize_examples(tree):
    a = np.array([[1.0, 0, 0]])
    b = np.array([[0.0, 1, 0]])
    assert featurize(a, b).tolist() == [1, 0, 0, 0, 1, 0, 1, -1, 0]
    same = np.ones((3, 3))
    assert not np.any(featurize(same, same)[18:])
    sc = len(tree.named("connector"))
    assert featurize(np.zeros((sc, 3)), np.zeros((sc, 3))).size == 396


def test_featurize_without_difference():
    a, b = np.zeros((2, 3)), np.ones((2, 3))
    assert featurize(a, b, include_difference=False).size == 12


def test_featurize_shape_mismatch():
    with pytest.raises(ConnectorError):
        featurize(np.zeros((2, 3)), np.zeros((3, 3)))


@given(coords, coords, coords, coords)
def test_featurize_injective(a, b, c, d):
    if not (np.array_equal(a, c) and np.array_equal(b, d)):
        assert not np.array_equal(featurize(a, b), featurize(c, d))


# model -----------------------------------------------------------------------


def small_model(rng, widths=(5, 4, 3, 2)):
    m = init_mlp(widths[0], widths[1:], rng)
    m.biases = [rng.normal(0, 0.5, b.shape) for b in m.biases]
    return m


def test_zero_model_outputs_zero(rng):
    m = init_mlp(6, (4, 3, 2), rng)
    m.weights = [np.zeros_like(w) for w in m.weights]
    assert mlp_forward(m, rng.normal(size=6))[0] == 0.0


def test_default_model_has_four_layers():
    m = init_mlp(396)
    assert m.layer_shapes == [(396, 512), (512, 256), (256, 128), (128, 1)]


def test_hand_computed_single_unit_chain():
    ws = [np.array([[2.0]]), np.array([[3.0]]), np.array([[-1.0]]), np.array([[0.5]])]
    bs = [np.array([1.0]), np.array([-4.0]), np.array([10.0]), np.array([0.25])]
    m = MlpModel(ws, bs, np.zeros(1), np.ones(1))
    # x=2: relu(5)=5 -> relu(11)=11 -> relu(-1)=0 -> 0.25
    assert mlp_forward(m, [2.0])[0] == 0.25
    # x=0: relu(1)=1 -> relu(-1)=0 -> relu(10)=10 -> 5.25
    assert mlp_forward(m, [0.0])[0] == 5.25


def test_forward_matches_manual_evaluation(rng):
    m = small_model(rng)
    for _ in range(10):
        x = rng.normal(size=5)
        assert mlp_forward(m, x)[0] == pytest.approx(mlp_manual(m.weights, m.biases, x), rel=1e-12)


def test_feature_standardisation_applied(rng):
    m = small_model(rng)
    m.feature_mean = rng.normal(size=5)
    m.feature_scale = rng.uniform(0.5, 2.0, 5)
    x = rng.normal(size=5)
    want = mlp_manual(m.weights, m.biases, (x - m.feature_mean) / m.feature_scale)
    assert mlp_forward(m, x)[0] == pytest.approx(want, rel=1e-12)


def test_batch_matches_single(rng):
    m = small_model(rng)
    xs = rng.normal(size=(6, 5))
    batch, _ = mlp_forward(m, xs)
    assert np.allclose(batch, [mlp_forward(m, x)[0] for x in xs], rtol=1e-14)


def test_backward_matches_finite_differences(rng):
    m = small_model(rng, (7, 6, 5, 4))
    xs = rng.normal(size=(3, 7))
    gout = rng.normal(size=3)
    _, acts = mlp_forward(m, xs)
    grads = mlp_backward(m, acts, gout)
    params = m.parameters()
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        orig = flat.copy()

        def f(v, flat=flat):
            flat[:] = v
            out = float(np.sum(gout * mlp_forward(m, xs)[0]))
            return out

        fd = central_difference(f, orig)
        flat[:] = orig
        assert rel_err(g.reshape(-1), fd) < 1e-4


def test_model_validation(rng):
    with pytest.raises(ConnectorError):
        MlpModel([np.zeros((3, 2))], [np.zeros(2)], np.zeros(3), np.ones(3))


def test_model_file_round_trip(rng, tmp_path):
    m = train_connector(samples_of(rng, [1, 2, 3]), ConnectorTrainConfig(epochs=2, hidden=(8, 8, 8)), "abc").model
    save_model(m, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    for a, b in zip(m.parameters() + [m.feature_mean, m.feature_scale],
                    back.parameters() + [back.feature_mean, back.feature_scale]):
        assert np.array_equal(a, b)
    assert (back.max_duration, back.include_difference, back.connector) == (m.max_duration, m.include_difference, m.connector)


def test_model_file_errors(tmp_path):
    with pytest.raises(ConnectorError, match="not found"):
        load_model(tmp_path / "missing.bin")
    (tmp_path / "junk.bin").write_bytes(b"hello world, not a model")
    with pytest.raises(ConnectorError):
        load_model(tmp_path / "junk.bin")


# training ----------------------------------------------------------------------


def samples_of(rng, durations, j=3):
    return [CoarticulationSample(rng.normal(size=(j, 3)), d, rng.normal(size=(j, 3))) for d in durations]


def test_overfit_single_sample(rng):
    s = samples_of(rng, [5])
    res = train_connector(s, ConnectorTrainConfig(learning_rate=1e-3, epochs=200, hidden=(16, 16, 16)))
    assert res.trace[-1][1] < 0.1


def test_duplicated_dataset_same_model(rng):
    s = samples_of(rng, [1, 3, 4, 7, 2])
    cfg = ConnectorTrainConfig(learning_rate=1e-3, epochs=20, batch_size=None, hidden=(8, 8, 8))
    a = train_connector(s, cfg).model
    b = train_connector(s + s, cfg).model
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.allclose(p, q, rtol=1e-6, atol=1e-7)


def test_long_durations_filtered(rng):
    s = samples_of(rng, [1, 3, 4, 2])
    extreme = samples_of(rng, [40])
    cfg = ConnectorTrainConfig(learning_rate=1e-3, epochs=5, hidden=(8, 8, 8), max_duration=12)
    with_extreme = train_connector(s + extreme, cfg)
    without = train_connector(s, cfg)
    assert with_extreme.n_used == 4 and with_extreme.n_filtered == 1
    assert with_extreme.trace == without.trace
    for p, q in zip(with_extreme.model.parameters(), without.model.parameters()):
        assert np.array_equal(p, q)


def test_all_filtered_raises(rng):
    with pytest.raises(ConnectorError):
        train_connector(samples_of(rng, [20, 30]), ConnectorTrainConfig(max_duration=12))


def test_fixed_seed_reproducible(rng):
    s = samples_of(rng, [1, 2, 3, 4, 5, 6])
    cfg = ConnectorTrainConfig(learning_rate=1e-3, epochs=4, batch_size=2, hidden=(8, 8, 8), seed=3)
    assert train_connector(s, cfg).trace == train_connector(s, cfg).trace


def test_trained_params_are_float32(rng):
    m = train_connector(samples_of(rng, [1, 2]), ConnectorTrainConfig(epochs=1, hidden=(4, 4, 4))).model
    for p in m.parameters():
        assert np.array_equal(p, p.astype(np.float32).astype(float))


def test_full_model_beats_fixed_baseline_on_training_data(tree):
    rng = np.random.default_rng(0)
    data = coarticulation_dataset(tree, rng, 200)
    res = train_connector(data, ConnectorTrainConfig(learning_rate=1e-3, epochs=15))
    base = fixed_duration(data, 12)
    kept = [s for s in data if s.duration <= 12]
    assert evaluate_l1(res.model, kept) <= np.mean([abs(base - s.duration) for s in kept])


def test_fixed_duration_is_rounded_mean(rng):
    assert fixed_duration(samples_of(rng, [1, 2, 6, 50]), 12) == 3


def test_config_validation():
    with pytest.raises(ConnectorError):
        ConnectorTrainConfig(learning_rate=0.0)
    with pytest.raises(ConnectorError):
        ConnectorTrainConfig(max_duration=0)


# duration rounding -----------------------------------------------------------------


def constant_model(value, width, cap=12):
    """Raw output ``value`` for any difference-free input of ``width`` features."""
    ws = [np.zeros((width, 2)), np.zeros((2, 1))]
    bs = [np.zeros(2), np.array([value])]
    return MlpModel(ws, bs, np.zeros(width), np.ones(width), max_duration=cap, include_difference=False)


@pytest.mark.parametrize("raw, want", [(-0.4, 0), (3.5, 4), (2.5, 2), (99.0, 12), (0.49, 0)])
def test_predict_duration_rounding(raw, want):
    assert predict_duration(constant_model(raw, 6), np.zeros((1, 3)), np.ones((1, 3))) == want


# interpolation ---------------------------------------------------------------------


def test_interpolate_zero_length(tree):
    assert interpolate(rest_pose(tree), rest_pose(tree), 0) == []


def test_joint_midpoint(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    (mid,) = interpolate(a, b, 1, "joint")
    assert np.allclose(mid, (a + b) / 2)


def test_pose_midpoint_is_half_angle(tree):
    theta = np.zeros((tree.n_joints, 3))
    theta[3] = [0, 0, math.pi / 2]
    a = rest_pose(tree).replace(theta=theta)
    (mid,) = interpolate(a, rest_pose(tree), 1)
    assert np.allclose(rodrigues(mid.theta[3]), rodrigues([0, 0, math.pi / 4]), atol=1e-12)


def test_pose_endpoints_converge(tree, rng):
    a, b = random_pose(tree, rng), random_pose(tree, rng)
    gaps = []
    for n in (1, 4, 16, 64):
        frames = interpolate(a, b, n)
        gaps.append((np.max(np.abs(frames[0].theta - a.theta)), np.max(np.abs(frames[-1].theta - b.theta))))
    assert all(x[0] > y[0] and x[1] > y[1] for x, y in zip(gaps, gaps[1:]))
    assert gaps[-1][0] < 0.05 and gaps[-1][1] < 0.05


@given(arrays(np.float64, (3, 3), elements=st.floats(-5, 5)), arrays(np.float64, (3, 3), elements=st.floats(-5, 5)),
       st.integers(1, 8))
def test_joint_mode_inside_bounding_box(a, b, n):
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    for f in interpolate(a, b, n, "joint"):
        assert np.all(f >= lo - 1e-12) and np.all(f <= hi + 1e-12)


def test_interpolate_rejects_negative_and_unknown_mode(tree):
    with pytest.raises(ConnectorError):
        interpolate(rest_pose(tree), rest_pose(tree), -1)
    with pytest.raises(ConnectorError):
        interpolate(rest_pose(tree), rest_pose(tree), 1, "cubic")


# stitching ----------------------------------------------------------------------------


def signs_for(tree, rng, k, n=4):
    return [Sign3D.from_poses(f"G{i}", [random_pose(tree, rng) for _ in range(n)], tree, sign_id=f"s{i}")
            for i in range(k)]


def test_stitch_single_sign_unchanged(tree, rng):
    (s,) = signs_for(tree, rng, 1)
    seq = stitch([s], None, tree)
    assert seq.n_frames == s.n_frames and seq.durations == []
    assert np.array_equal(seq.joints, s.joints)


def test_stitch_counts(tree, rng):
    signs = signs_for(tree, rng, 3)
    seq = stitch(signs, None, tree, durations=[2, 5])
    kinds = [b[0] for b in seq.blocks()]
    assert kinds == ["sign", "coart", "sign", "coart", "sign"]
    assert seq.n_frames == sum(s.n_frames for s in signs) + 7


@pytest.mark.parametrize("mode", ["pose", "joint"])
def test_stitch_with_model(tree, rng, mode):
    signs = signs_for(tree, rng, 3)
    model = constant_model(3.0, 6 * len(tree.named("connector")))
    seq = stitch(signs, model, tree, mode)
    assert seq.durations == [3, 3]
    assert seq.n_frames == 12 + 6


def test_identical_signs_need_no_transition(tree):
    rng = np.random.default_rng(1)
    sc = tree.named("connector")
    zero = []
    for _ in range(40):
        j = rng.normal(0, 0.2, (len(sc), 3))
        zero.append(CoarticulationSample(j, 0, j.copy()))
    res = train_connector(zero, ConnectorTrainConfig(learning_rate=1e-3, epochs=30, hidden=(16, 16, 16)))
    s = Sign3D.from_poses("A", [random_pose(tree, rng) for _ in range(3)], tree)
    seq = stitch([s, s], res.model, tree)
    assert seq.durations == [0] and seq.n_frames == 6


def test_stitch_needs_model_for_several_signs(tree, rng):
    with pytest.raises(ConnectorError):
        stitch(signs_for(tree, rng, 2), None, tree)
    with pytest.raises(ConnectorError):
        stitch([], None, tree)
