"""A small permutation-invariant point-set classifier written directly in numpy.

Architecture: a shared per-point MLP (3 -> 64 -> 128 -> 256, ReLU), a
feature-wise max over points, then a fully connected head (256 -> 128 ReLU ->
num_classes). Forward and backward passes are hand-written so the attack can
ask for exact gradients of the logits with respect to point coordinates.
"""

from __future__ import annotations

import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateDataset,
    EmptyCloud,
    FormatVersionMismatch,
    InvalidClass,
    ModelIOError,
    StateMismatch,
)
from .geometry import as_points

logger = logging.getLogger(__name__)

MAGIC = b"G3PC"
FORMAT_VERSION = 1
ARCH_TAG = "shared-mlp-maxpool/v1"


@dataclass
class ClassifierModel:
    point_layers: list[tuple[np.ndarray, np.ndarray]]
    head_layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def num_classes(self) -> int:
        return self.head_layers[-1][0].shape[1]

    @property
    def arch(self) -> str:
        return ARCH_TAG

    def layer_dims(self) -> list[tuple[int, int]]:
        return [w.shape for w, _ in self.point_layers + self.head_layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in self.point_layers + self.head_layers:
            out += [w, b]
        return out

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(
            [(w.copy(), b.copy()) for w, b in self.point_layers],
            [(w.copy(), b.copy()) for w, b in self.head_layers],
        )

    def __eq__(self, other):
        if not isinstance(other, ClassifierModel):
            return NotImplemented
        if len(self.point_layers) != len(other.point_layers):
            return False
        a, b = self.params(), other.params()
        return len(a) == len(b) and all(
            x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b)
        )


def init_model(
    num_classes: int,
    point_widths: Sequence[int] = (64, 128, 256),
    head_widths: Sequence[int] = (128,),
    seed: int = 0,
) -> ClassifierModel:
    """He-initialised weights, zero biases."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)

    def layer(fan_in, fan_out):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        return w, np.zeros(fan_out)

    dims = [3, *point_widths]
    point = [layer(i, o) for i, o in zip(dims[:-1], dims[1:])]
    dims = [point_widths[-1], *head_widths, num_classes]
    head = [layer(i, o) for i, o in zip(dims[:-1], dims[1:])]
    return ClassifierModel(point, head)


@dataclass
class ForwardCache:
    points: np.ndarray  # (B, n, 3)
    point_acts: list[np.ndarray] = field(default_factory=list)  # post-ReLU, (B*n, c)
    argmax: Optional[np.ndarray] = None  # (B, c)
    head_inputs: list[np.ndarray] = field(default_factory=list)
    logits: Optional[np.ndarray] = None


def forward_batch(model: ClassifierModel, points: np.ndarray, keep: bool = False):
    """Logits for a ``(B, n, 3)`` batch; with ``keep`` also returns the cache."""
    points = np.asarray(points, dtype=np.float64)
    bsz, n, _ = points.shape
    if n == 0:
        raise EmptyCloud("cannot classify an empty cloud")
    h = points.reshape(bsz * n, 3)
    acts = []
    for w, b in model.point_layers:
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    feats = h.reshape(bsz, n, -1)
    argmax = feats.argmax(axis=1)
    g = np.take_along_axis(feats, argmax[:, None, :], axis=1)[:, 0, :]
    head_inputs = []
    last = len(model.head_layers) - 1
    for i, (w, b) in enumerate(model.head_layers):
        head_inputs.append(g)
        g = g @ w + b
        if i < last:
            g = np.maximum(g, 0.0)
    if not keep:
        return g
    return g, ForwardCache(points, acts, argmax, head_inputs, g)


def backward_batch(
    model: ClassifierModel, cache: ForwardCache, dlogits: np.ndarray, want_params: bool = True
):
    """Reverse pass. Returns ``(param_grads, input_grad)``.

    ``param_grads`` follows the order of :meth:`ClassifierModel.params`.
    The max-pool routes each feature's gradient to the point that attained the
    maximum (lowest index on ties).
    """
    bsz, n, _ = cache.points.shape
    grads_head = []
    g = np.asarray(dlogits, dtype=np.float64).reshape(bsz, -1)
    last = len(model.head_layers) - 1
    for i in range(last, -1, -1):
        w, _ = model.head_layers[i]
        x = cache.head_inputs[i]
        if i < last:
            # x of layer i+1 is the ReLU output of layer i
            g = g * (cache.head_inputs[i + 1] > 0)
        if want_params:
            grads_head.append((x.T @ g, g.sum(axis=0)))
        g = g @ w.T

    c = g.shape[1]
    if not want_params:
        return [], _input_grad_sparse(model, cache, g)
    dfeat = np.zeros((bsz, n, c))
    np.put_along_axis(dfeat, cache.argmax[:, None, :], g[:, None, :], axis=1)
    d = dfeat.reshape(bsz * n, c)

    grads_point = []
    inputs = [cache.points.reshape(bsz * n, 3)] + cache.point_acts[:-1]
    for i in range(len(model.point_layers) - 1, -1, -1):
        w, _ = model.point_layers[i]
        d = d * (cache.point_acts[i] > 0)
        if want_params:
            grads_point.append((inputs[i].T @ d, d.sum(axis=0)))
        d = d @ w.T
    input_grad = d.reshape(bsz, n, 3)

    param_grads = []
    if want_params:
        for gw, gb in reversed(grads_point):
            param_grads += [gw, gb]
        for gw, gb in reversed(grads_head):
            param_grads += [gw, gb]
    return param_grads, input_grad


def _input_grad_sparse(model: ClassifierModel, cache: ForwardCache, g: np.ndarray) -> np.ndarray:
    # Only points that win at least one max-pool channel receive gradient, so
    # the point-wise layers are back-propagated over those rows alone.
    bsz, n, _ = cache.points.shape
    c = g.shape[1]
    flat = (cache.argmax + np.arange(bsz)[:, None] * n).reshape(-1)
    rows, inv = np.unique(flat, return_inverse=True)
    d = np.zeros((len(rows), c))
    d[inv, np.tile(np.arange(c), bsz)] = g.reshape(-1)
    for i in range(len(model.point_layers) - 1, -1, -1):
        w, _ = model.point_layers[i]
        d = d * (cache.point_acts[i][rows] > 0)
        d = d @ w.T
    out = np.zeros((bsz * n, 3))
    out[rows] = d
    return out.reshape(bsz, n, 3)


def forward(model: ClassifierModel, cloud, return_cache: bool = False):
    """Logits of a single cloud."""
    pts = as_points(cloud)
    if len(pts) == 0:
        raise EmptyCloud("cannot classify an empty cloud")
    out = forward_batch(model, pts[None], keep=return_cache)
    if return_cache:
        return out[0][0], out[1]
    return out[0]


def backward_input(
    model: ClassifierModel, cloud, dlogits, cache: Optional[ForwardCache] = None
) -> np.ndarray:
    """Gradient of ``<logits(cloud), dlogits>`` w.r.t. the cloud's coordinates."""
    pts = as_points(cloud)
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != (model.num_classes,):
        raise StateMismatch(f"dlogits must have shape ({model.num_classes},)")
    if cache is None:
        _, cache = forward(model, pts, return_cache=True)
    elif cache.points.shape[0] != 1 or not np.array_equal(cache.points[0], pts):
        raise StateMismatch("forward cache was computed for a different cloud")
    return backward_batch(model, cache, dlogits[None], want_params=False)[1][0]


def predict(model: ClassifierModel, cloud) -> int:
    return int(np.argmax(forward(model, cloud)))


def predict_batch(model: ClassifierModel, points: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(points), batch_size):
        out.append(forward_batch(model, points[i : i + batch_size]).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_targeted(logits, target: int) -> tuple[float, np.ndarray]:
    """Cross-entropy towards ``target``; returns the value and d/dlogits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < len(logits):
        raise InvalidClass(f"class {target} outside [0, {len(logits)})")
    logp = _log_softmax(logits)
    grad = np.exp(logp)
    grad[target] -= 1.0
    return float(-logp[target]), grad


def loss_untargeted(logits, true_class: int) -> tuple[float, np.ndarray]:
    """Log-probability of the true class; minimising it pushes the prediction away."""
    value, grad = loss_targeted(logits, true_class)
    return -value, -grad


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    rotate: bool = True  # random rotation about the z (gravity) axis
    jitter: bool = True
    jitter_sigma: float = 0.005
    lr_decay: float = 0.9  # per-epoch multiplicative decay

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive and finite")


@dataclass
class TrainReport:
    train_accuracy: float
    test_accuracy: float
    epoch_losses: list[float]
    seconds: float


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def _augment(batch: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    out = batch
    if cfg.rotate:
        theta = rng.uniform(0.0, 2 * np.pi, size=len(batch))
        c, s = np.cos(theta), np.sin(theta)
        rot = np.zeros((len(batch), 3, 3))
        rot[:, 0, 0], rot[:, 0, 1] = c, -s
        rot[:, 1, 0], rot[:, 1, 1] = s, c
        rot[:, 2, 2] = 1.0
        out = np.einsum("bnj,bij->bni", out, rot)
    if cfg.jitter:
        out = out + np.clip(rng.normal(0.0, cfg.jitter_sigma, size=out.shape), -0.02, 0.02)
    return out


def batch_loss_and_grads(model: ClassifierModel, points: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over a batch and its parameter gradients."""
    logits, cache = forward_batch(model, points, keep=True)
    logp = _log_softmax(logits)
    bsz = len(labels)
    loss = -logp[np.arange(bsz), labels].mean()
    d = np.exp(logp)
    d[np.arange(bsz), labels] -= 1.0
    grads, _ = backward_batch(model, cache, d / bsz)
    return float(loss), grads


def accuracy(model: ClassifierModel, points: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict_batch(model, points) == labels))


def train(model_init: ClassifierModel, dataset, cfg: TrainConfig = TrainConfig()):
    """Mini-batch Adam on cross-entropy. Returns ``(model, TrainReport)``.

    ``dataset`` needs ``train_points``/``train_labels``/``test_points``/
    ``test_labels`` arrays. ``model_init`` is never modified.
    """
    x = np.asarray(dataset.train_points, dtype=np.float64)
    y = np.asarray(dataset.train_labels, dtype=np.intp)
    if len(x) == 0 or len(np.unique(y)) < 2:
        raise DegenerateDataset("training split needs at least two classes")
    if y.max() >= model_init.num_classes:
        raise DegenerateDataset("labels exceed the model's class count")

    model = model_init.copy()
    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    opt = _Adam(params, cfg.learning_rate)
    losses = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = _augment(x[idx], cfg, rng)
            loss, grads = batch_loss_and_grads(model, batch, y[idx])
            opt.step(params, grads)
            total += loss * len(idx)
        losses.append(total / len(x))
        opt.lr *= cfg.lr_decay
        logger.info("epoch %d loss %.4f", epoch + 1, losses[-1])
    report = TrainReport(
        train_accuracy=accuracy(model, x, y),
        test_accuracy=accuracy(
            model,
            np.asarray(dataset.test_points, dtype=np.float64),
            np.asarray(dataset.test_labels, dtype=np.intp),
        ),
        epoch_losses=losses,
        seconds=time.perf_counter() - t0,
    )
    return model, report


def _serialize(model: ClassifierModel) -> bytes:
    dims = model.layer_dims()
    parts = [
        MAGIC,
        struct.pack("<IIII", FORMAT_VERSION, model.num_classes, len(model.point_layers), len(model.head_layers)),
    ]
    parts += [struct.pack("<II", i, o) for i, o in dims]
    for p in model.params():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save(model: ClassifierModel, path) -> None:
    from .fileio import atomic_write_bytes

    atomic_write_bytes(path, _serialize(model))


def loads(blob: bytes) -> ClassifierModel:
    if len(blob) < 24 or blob[:4] != MAGIC:
        raise FormatVersionMismatch("not a model file (bad magic)")
    version, num_classes, n_point, n_head = struct.unpack_from("<IIII", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"model format version {version}, expected {FORMAT_VERSION}")
    off = 20
    n_layers = n_point + n_head
    if len(blob) < off + 8 * n_layers + 4:
        raise ModelIOError("model file truncated")
    dims = [struct.unpack_from("<II", blob, off + 8 * i) for i in range(n_layers)]
    off += 8 * n_layers
    expected = off + sum(8 * (i * o + o) for i, o in dims) + 4
    if len(blob) != expected:
        raise ModelIOError(f"model file has {len(blob)} bytes, expected {expected}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise ModelIOError("model file checksum mismatch")
    layers = []
    for i, o in dims:
        w = np.frombuffer(blob, dtype="<f8", count=i * o, offset=off).reshape(i, o).astype(np.float64)
        off += 8 * i * o
        b = np.frombuffer(blob, dtype="<f8", count=o, offset=off).astype(np.float64)
        off += 8 * o
        layers.append((w, b))
    model = ClassifierModel(layers[:n_point], layers[n_point:])
    if model.num_classes != num_classes:
        raise ModelIOError("layer table disagrees with the class count")
    return model


def load(path) -> ClassifierModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ModelIOError(f"cannot read {path}: {exc}") from exc
    return loads(blob)
