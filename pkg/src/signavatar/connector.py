"""Sign connector: a small MLP that predicts transition lengths, plus stitching."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .skeleton import KinematicTree, PoseParams, aa_to_quat, forward_kinematics, quat_to_aa

MODEL_MAGIC = b"SAVMLP\0\0"
MODEL_VERSION = 1


class ConnectorError(ValueError):
    pass


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------


def featurize(d_pre, d_next, include_difference: bool = True) -> np.ndarray:
    """Flat (pre, next, pre - next) blocks; the difference block is optional."""
    a = np.asarray(d_pre, dtype=float)
    b = np.asarray(d_next, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ConnectorError(f"boundary joints must be matching (J, 3) arrays, got {a.shape} and {b.shape}")
    blocks = [a.ravel(), b.ravel()]
    if include_difference:
        blocks.append((a - b).ravel())
    return np.concatenate(blocks)


def connector_hash(tree: KinematicTree) -> str:
    idx = tree.named("connector")
    names = [tree.landmark_names[i] for i in idx]
    return hashlib.sha256(json.dumps([idx.tolist(), names]).encode()).hexdigest()


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass(eq=False)
class MlpModel:
    """Affine layers with ReLU between them and a linear scalar output.

    Inputs are standardised with the stored feature mean and scale.
    """

    weights: list  # (in, out) matrices
    biases: list  # (out,) vectors
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    max_duration: int = 12
    include_difference: bool = True
    connector: str = ""

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConnectorError("need matching, nonempty weight and bias lists")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConnectorError(f"layer {k} has weight {w.shape} and bias {b.shape}")
            if k and w.shape[0] != self.weights[k - 1].shape[1]:
                raise ConnectorError(f"layer {k} input width does not chain")
        if self.weights[-1].shape[1] != 1:
            raise ConnectorError("output layer must be scalar")
        if self.feature_mean.shape != (self.input_width,) or self.feature_scale.shape != (self.input_width,):
            raise ConnectorError("feature statistics do not match the input width")

    @property
    def input_width(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [tuple(int(v) for v in w.shape) for w in self.weights]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.feature_mean.copy(),
            self.feature_scale.copy(),
            self.max_duration,
            self.include_difference,
            self.connector,
        )


def init_mlp(input_width: int, hidden=(512, 256, 128), rng=None, **kw) -> MlpModel:
    """He-normal weights, zero biases, identity feature standardisation."""
    rng = rng if rng is not None else np.random.default_rng(0)
    widths = [input_width, *hidden, 1]
    ws, bs = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        ws.append(rng.normal(0.0, np.sqrt(2.0 / a), (a, b)))
        bs.append(np.zeros(b))
    return MlpModel(ws, bs, np.zeros(input_width), np.ones(input_width), **kw)


def mlp_forward(model: MlpModel, x):
    """Scalar prediction(s) and the activations needed for backprop.

    ``x`` is one feature vector or a (B, D) batch.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != model.input_width:
        raise ConnectorError(f"input has width {xb.shape[1]}, model expects {model.input_width}")
    h = (xb - model.feature_mean) / model.feature_scale
    acts = [h]
    n = len(model.weights)
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if k < n - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    y = h[:, 0]
    return (float(y[0]) if single else y), acts


def mlp_backward(model: MlpModel, acts, grad_out) -> list[np.ndarray]:
    """Gradients of sum(grad_out * y) w.r.t. (W1, b1, W2, b2, ...)."""
    g = np.asarray(grad_out, dtype=float).reshape(-1, 1)
    grads = []
    n = len(model.weights)
    for k in range(n - 1, -1, -1):
        if k < n - 1:
            g = g * (acts[k + 1] > 0)
        grads.append(g.sum(axis=0))
        grads.append(acts[k].T @ g)
        if k:
            g = g @ model.weights[k].T
    return grads[::-1]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConnectorTrainConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int | None = 32  # None = full batch
    max_duration: int = 12
    hidden: tuple = (512, 256, 128)
    include_difference: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConnectorError("learning rate must be positive")
        if self.max_duration < 1:
            raise ConnectorError("duration cap must be at least 1")
        if self.epochs < 1:
            raise ConnectorError("need at least one epoch")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "max_duration": self.max_duration,
            "hidden": list(self.hidden),
            "include_difference": self.include_difference,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConnectorTrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass(eq=False)
class TrainResult:
    model: MlpModel
    trace: list = field(default_factory=list)  # (epoch, mean L1) per epoch
    n_used: int = 0
    n_filtered: int = 0


def dataset(samples, include_difference: bool = True, max_duration: int | None = None):
    """Feature matrix and duration targets, dropping durations above the cap."""
    keep = [s for s in samples if max_duration is None or s.duration <= max_duration]
    if not keep:
        return np.zeros((0, 0)), np.zeros(0), len(samples)
    x = np.stack([featurize(s.d_pre, s.d_next, include_difference) for s in keep])
    y = np.array([s.duration for s in keep], dtype=float)
    return x, y, len(samples) - len(keep)


def _round_f32(model: MlpModel) -> MlpModel:
    f = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
    return MlpModel(
        [f(w) for w in model.weights],
        [f(b) for b in model.biases],
        f(model.feature_mean),
        f(model.feature_scale),
        model.max_duration,
        model.include_difference,
        model.connector,
    )


def train_connector(samples, cfg: ConnectorTrainConfig | None = None, connector: str = "") -> TrainResult:
    """Minibatch Adam on the mean absolute duration error.

    Features are standardised with training statistics and the output bias
    starts at the mean training duration. Parameters are rounded to float32
    at the end so the saved model equals the returned one.
    """
    cfg = cfg or ConnectorTrainConfig()
    x, y, n_filtered = dataset(samples, cfg.include_difference, cfg.max_duration)
    if y.size == 0:
        raise ConnectorError(f"no samples left after dropping durations above {cfg.max_duration}")
    rng = np.random.default_rng(cfg.seed)
    model = init_mlp(
        x.shape[1], cfg.hidden, rng,
        max_duration=cfg.max_duration, include_difference=cfg.include_difference, connector=connector,
    )
    model.feature_mean = x.mean(axis=0)
    spread = x.std(axis=0)
    model.feature_scale = np.where(spread > 1e-12, spread, 1.0)
    model.biases[-1][:] = y.mean()

    params = model.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    n = y.size
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if bs < n else np.arange(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            pred, acts = mlp_forward(model, x[idx])
            err = pred - y[idx]
            total += float(np.sum(np.abs(err)))
            grads = mlp_backward(model, acts, np.sign(err) / idx.size)
            step += 1
            c1 = 1.0 - cfg.beta1**step
            c2 = 1.0 - cfg.beta2**step
            for p, g, mk, vk in zip(params, grads, m, v):
                mk *= cfg.beta1
                mk += (1 - cfg.beta1) * g
                vk *= cfg.beta2
                vk += (1 - cfg.beta2) * g * g
                p -= cfg.learning_rate * (mk / c1) / (np.sqrt(vk / c2) + cfg.eps)
        trace.append((epoch, total / n))
    return TrainResult(_round_f32(model), trace, int(n), int(n_filtered))


def evaluate_l1(model: MlpModel, samples) -> float:
    """Mean absolute error of the raw (unrounded) output."""
    x, y, _ = dataset(samples, model.include_difference)
    pred, _ = mlp_forward(model, x)
    return float(np.mean(np.abs(pred - y)))


def fixed_duration(samples, max_duration: int | None = None) -> int:
    """Constant baseline: the rounded mean training duration."""
    d = [s.duration for s in samples if max_duration is None or s.duration <= max_duration]
    if not d:
        raise ConnectorError("no samples for the fixed-duration baseline")
    return int(np.rint(np.mean(d)))


def predict_duration(model: MlpModel, d_pre, d_next) -> int:
    raw, _ = mlp_forward(model, featurize(d_pre, d_next, model.include_difference))
    return int(np.clip(np.rint(raw), 0, model.max_duration))


# --------------------------------------------------------------------------
# model files
# --------------------------------------------------------------------------


def save_model(model: MlpModel, path) -> None:
    head = json.dumps(
        {
            "layers": model.layer_shapes,
            "max_duration": model.max_duration,
            "include_difference": model.include_difference,
            "connector": model.connector,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(head)))
        fh.write(head)
        for arr in [model.feature_mean, model.feature_scale, *model.parameters()]:
            fh.write(np.asarray(arr, dtype="<f4").tobytes())


def load_model(path) -> MlpModel:
    path = Path(path)
    if not path.is_file():
        raise ConnectorError(f"model file not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != MODEL_MAGIC:
        raise ConnectorError(f"{path} is not a connector model")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != MODEL_VERSION:
        raise ConnectorError(f"unsupported model version {version}")
    head = json.loads(blob[16 : 16 + hlen])
    data = np.frombuffer(blob[16 + hlen :], dtype="<f4").astype(np.float64)
    shapes = [tuple(s) for s in head["layers"]]
    d = shapes[0][0]
    need = 2 * d + sum(a * b + b for a, b in shapes)
    if data.size != need:
        raise ConnectorError(f"{path}: expected {need} floats, found {data.size}")
    off = 2 * d
    ws, bs = [], []
    for a, b in shapes:
        ws.append(data[off : off + a * b].reshape(a, b).copy())
        off += a * b
        bs.append(data[off : off + b].copy())
        off += b
    return MlpModel(
        ws, bs, data[:d].copy(), data[d : 2 * d].copy(),
        head["max_duration"], head["include_difference"], head["connector"],
    )


def write_training_log(trace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,l1\n")
        for epoch, l1 in trace:
            fh.write(f"{epoch},{l1!r}\n")


# --------------------------------------------------------------------------
# interpolation and stitching
# --------------------------------------------------------------------------


def slerp_quat(qa, qb, t: float) -> np.ndarray:
    """Shortest-arc spherical interpolation of unit quaternions (..., 4)."""
    qa = np.asarray(qa, dtype=float)
    qb = np.array(qb, dtype=float)
    dot = np.sum(qa * qb, axis=-1, keepdims=True)
    qb = np.where(dot < 0, -qb, qb)
    dot = np.abs(dot)
    omega = np.arccos(np.clip(dot, -1.0, 1.0))
    so = np.sin(omega)
    near = so < 1e-9
    safe = np.where(near, 1.0, so)
    wa = np.where(near, 1.0 - t, np.sin((1.0 - t) * omega) / safe)
    wb = np.where(near, t, np.sin(t * omega) / safe)
    q = wa * qa + wb * qb
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def _slerp_aa(a, b, t):
    return quat_to_aa(slerp_quat(aa_to_quat(a), aa_to_quat(b), t))


def interpolate(frame_a, frame_b, n: int, mode: str = "pose") -> list:
    """``n`` in-between frames at fractions i / (n + 1).

    "pose" takes PoseParams and slerps every rotation, linear in beta/psi.
    "joint" takes (J, 3) landmark arrays and interpolates linearly.
    """
    if n < 0:
        raise ConnectorError("interpolation length must be nonnegative")
    fracs = [i / (n + 1) for i in range(1, n + 1)]
    if mode == "joint":
        a = np.asarray(frame_a, dtype=float)
        b = np.asarray(frame_b, dtype=float)
        return [(1 - t) * a + t * b for t in fracs]
    if mode != "pose":
        raise ConnectorError(f"unknown interpolation mode {mode!r}")
    out = []
    for t in fracs:
        out.append(
            PoseParams(
                _slerp_aa(frame_a.zeta, frame_b.zeta, t),
                (1 - t) * frame_a.beta + t * frame_b.beta,
                (1 - t) * frame_a.psi + t * frame_b.psi,
                _slerp_aa(frame_a.theta, frame_b.theta, t),
            )
        )
    return out


@dataclass(eq=False)
class StitchedSequence:
    poses: list
    joints: np.ndarray  # (F, J, 3)
    tags: list  # ("sign", k) or ("coart", k) per frame
    durations: list  # predicted transition length before sign k, k >= 1
    sign_ids: list
    glosses: list

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def blocks(self) -> list[tuple[str, int, int, int]]:
        """(kind, index, first frame, length) per contiguous block."""
        out = []
        for f, tag in enumerate(self.tags):
            if out and out[-1][0] == tag[0] and out[-1][1] == tag[1]:
                kind, k, start, length = out[-1]
                out[-1] = (kind, k, start, length + 1)
            else:
                out.append((tag[0], tag[1], f, 1))
        return out


def stitch(signs, model: MlpModel | None, tree: KinematicTree, mode: str = "pose", durations=None) -> StitchedSequence:
    """Interleave signs with predicted transitions.

    Joint mode replaces the transition landmarks by straight-line blends; its
    pose parameters still come from pose interpolation so it can be exported.
    ``durations`` overrides the model (e.g. all zeros for plain concatenation).
    """
    signs = list(signs)
    if not signs:
        raise ConnectorError("nothing to stitch")
    digest = tree.digest()
    for s in signs:
        if s.tree_hash and s.tree_hash != digest:
            raise ConnectorError(f"sign {s.sign_id or s.gloss!r} was built for a different tree")
    if model is not None and model.connector and model.connector != connector_hash(tree):
        raise ConnectorError("connector model was trained on a different landmark subset")
    sc = tree.named("connector")
    poses, joints, tags, lens = [], [], [], []
    for k, sign in enumerate(signs):
        if k:
            prev = signs[k - 1]
            if durations is not None:
                n = int(durations[k - 1])
            elif model is None:
                raise ConnectorError("stitching several signs needs a connector model")
            else:
                n = predict_duration(model, prev.joints[-1, sc], sign.joints[0, sc])
            lens.append(n)
            mid = interpolate(prev.frames[-1], sign.frames[0], n, "pose")
            if mode == "joint":
                mid_j = interpolate(prev.joints[-1], sign.joints[0], n, "joint")
            elif mode == "pose":
                mid_j = [forward_kinematics(tree, p) for p in mid]
            else:
                raise ConnectorError(f"unknown stitching mode {mode!r}")
            poses += mid
            joints += list(mid_j)
            tags += [("coart", k)] * n
        poses += list(sign.frames)
        joints += list(sign.joints)
        tags += [("sign", k)] * sign.n_frames
    return StitchedSequence(
        poses, np.stack(joints), tags, lens, [s.sign_id for s in signs], [s.gloss for s in signs]
    )
