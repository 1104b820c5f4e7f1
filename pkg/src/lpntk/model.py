"""Feed-forward classifier with hand-written backprop.

Parameters live in one flat float64 vector; layer ``l`` contributes its weight
matrix (``out x in``, row-major) followed by its bias.  Hidden layers apply the
activation, the last layer emits raw logits ``z``; probabilities are
``softmax(z)``.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .numerics import argmax_tiebreak, make_rng

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh")
LOSS_FLOOR = 1e-300


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"training diverged (non-finite loss) at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class NetworkSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ModelError("a network needs at least an input and an output layer")
        if min(self.layer_widths) < 1:
            raise ModelError("all layer widths must be >= 1")
        if self.layer_widths[-1] < 2:
            raise ModelError("need at least two output classes")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")

    @property
    def p(self) -> int:
        return self.layer_widths[0]

    @property
    def K(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def layer_slices(self) -> list[tuple[slice, slice | None]]:
        """(weight slice, bias slice) into the flat vector, per layer."""
        out, offset = [], 0
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset = w.stop
            b = None
            if self.bias:
                b = slice(offset, offset + fan_out)
                offset = b.stop
            out.append((w, b))
        return out

    @property
    def n_params(self) -> int:
        w, b = self.layer_slices()[-1]
        return (b or w).stop


def unflatten(params: np.ndarray, spec: NetworkSpec):
    """List of (W, b) views into ``params``; ``b`` is None without biases."""
    if params.shape != (spec.n_params,):
        raise ModelError(f"expected {spec.n_params} parameters, got {params.shape}")
    layers = []
    for (ws, bs), fan_in, fan_out in zip(spec.layer_slices(), spec.layer_widths[:-1], spec.layer_widths[1:]):
        layers.append((params[ws].reshape(fan_out, fan_in), None if bs is None else params[bs]))
    return layers


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """LeCun normal weights, N(0, 1/fan_in); zero biases."""
    params = np.zeros(spec.n_params)
    for (ws, _), fan_in in zip(spec.layer_slices(), spec.layer_widths[:-1]):
        params[ws] = rng.standard_normal(ws.stop - ws.start) / np.sqrt(fan_in)
    return params


def _act(h, kind):
    return np.maximum(h, 0.0) if kind == "relu" else np.tanh(h)


def _act_grad(h, kind):
    if kind == "relu":
        return (h > 0.0).astype(np.float64)
    t = np.tanh(h)
    return 1.0 - t * t


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardTrace:
    logits: np.ndarray
    probs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]

    @property
    def predicted(self) -> int:
        return argmax_tiebreak(self.probs)


def _forward(layers, X, kind, per_sample=False):
    """Batched pass; returns pre-activations and layer inputs (post[0] = X).

    ``per_sample`` runs one product per row so that each row's bits do not
    depend on the batch it was computed in.
    """
    post = [X]
    pre = []
    a = X
    for i, (W, b) in enumerate(layers):
        h = (a[:, None, :] @ W.T)[:, 0, :] if per_sample else a @ W.T
        if b is not None:
            h = h + b
        pre.append(h)
        a = h if i == len(layers) - 1 else _act(h, kind)
        post.append(a)
    return pre, post


def _check_inputs(X, spec):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != spec.p:
        raise ModelError(f"input has {X.shape[-1]} features, network expects {spec.p}")
    if not np.all(np.isfinite(X)):
        raise ModelError("non-finite input")
    return X


def forward(params: np.ndarray, spec: NetworkSpec, x: np.ndarray) -> ForwardTrace:
    x = _check_inputs(x, spec)
    pre, post = _forward(unflatten(params, spec), x[None, :], spec.activation)
    z = pre[-1][0]
    return ForwardTrace(z, softmax(z), [h[0] for h in pre], [a[0] for a in post])


def logits_batch(params: np.ndarray, spec: NetworkSpec, X: np.ndarray) -> np.ndarray:
    X = _check_inputs(X, spec)
    return _forward(unflatten(params, spec), X, spec.activation)[0][-1]


def predict_proba(params, spec, X) -> np.ndarray:
    return softmax(logits_batch(params, spec, X))


def predict(params, spec, X) -> np.ndarray:
    # np.argmax picks the first maximum, matching argmax_tiebreak
    return np.argmax(logits_batch(params, spec, X), axis=1)


def accuracy(params, spec, ds: LabeledDataset) -> float:
    if ds.n == 0:
        raise ModelError("accuracy on an empty dataset")
    return float(np.mean(predict(params, spec, ds.features) == ds.labels))


def softmax_jacobian(q: np.ndarray) -> np.ndarray:
    """``diag(q) - q q^T``, the (negated) softmax derivative; symmetric PSD."""
    q = np.asarray(q, dtype=np.float64)
    return np.diag(q) - np.outer(q, q)


def cross_entropy(q: np.ndarray, y: int) -> float:
    qy = float(q[y])
    if qy < LOSS_FLOOR:
        log.warning("probability of the true class underflowed; clamping loss")
        qy = LOSS_FLOOR
    return -np.log(qy)


def cross_entropy_batch(Q: np.ndarray, y: np.ndarray) -> np.ndarray:
    return -np.log(np.maximum(Q[np.arange(len(y)), y], LOSS_FLOOR))


def _backprop(layers, pre, post, seeds, kind):
    """Per-sample, per-seed parameter gradients of ``seeds . z``.

    ``seeds`` has shape (N, S, K); returns (N, S, d).
    """
    N, S, _ = seeds.shape
    blocks = []
    delta = seeds
    for i in range(len(layers) - 1, -1, -1):
        W, b = layers[i]
        a = post[i]
        gw = (delta[:, :, :, None] * a[:, None, None, :]).reshape(N, S, -1)
        blocks.append([gw] if b is None else [gw, delta])
        if i:
            delta = (delta @ W) * _act_grad(pre[i - 1], kind)[:, None, :]
    return np.concatenate([g for blk in reversed(blocks) for g in blk], axis=2)


def _vjp(layers, pre, post, seeds, kind):
    """Sum over samples of ``J_i^T seeds_i``; ``seeds`` is (N, K)."""
    grads = []
    delta = seeds
    for i in range(len(layers) - 1, -1, -1):
        W, b = layers[i]
        gw = (delta.T @ post[i]).ravel()
        grads.append([gw] if b is None else [gw, delta.sum(axis=0)])
        if i:
            delta = (delta @ W) * _act_grad(pre[i - 1], kind)
    return np.concatenate([g for blk in reversed(grads) for g in blk])


def logit_jacobians(params: np.ndarray, spec: NetworkSpec, X: np.ndarray) -> np.ndarray:
    """Stacked per-sample logit Jacobians, shape (N, K, d)."""
    X = _check_inputs(np.atleast_2d(X), spec)
    layers = unflatten(params, spec)
    pre, post = _forward(layers, X, spec.activation, per_sample=True)
    seeds = np.broadcast_to(np.eye(spec.K), (X.shape[0], spec.K, spec.K))
    return _backprop(layers, pre, post, seeds, spec.activation)


def logit_jacobian(params: np.ndarray, spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """K x d matrix whose row k is the gradient of logit k."""
    return logit_jacobians(params, spec, np.asarray(x)[None, :])[0]


def output_vjp(params: np.ndarray, spec: NetworkSpec, X: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """``sum_i J(x_i)^T seeds_i`` without materialising any Jacobian."""
    X = _check_inputs(np.atleast_2d(X), spec)
    layers = unflatten(params, spec)
    pre, post = _forward(layers, X, spec.activation)
    return _vjp(layers, pre, post, np.asarray(seeds, dtype=np.float64), spec.activation)


def loss_gradient(params: np.ndarray, spec: NetworkSpec, x: np.ndarray, y: int) -> np.ndarray:
    """Gradient of ``-log q_y(x)`` with respect to the flat parameters."""
    return batch_loss_gradient(params, spec, np.asarray(x)[None, :], np.array([y]))[0]


def batch_loss_gradient(params, spec, X, y):
    """(mean gradient, per-sample losses, probabilities) for a mini-batch."""
    X = _check_inputs(np.atleast_2d(X), spec)
    y = np.asarray(y, dtype=np.int64)
    layers = unflatten(params, spec)
    pre, post = _forward(layers, X, spec.activation)
    Q = softmax(pre[-1])
    err = Q.copy()
    err[np.arange(len(y)), y] -= 1.0
    grad = _vjp(layers, pre, post, err / len(y), spec.activation)
    return grad, cross_entropy_batch(Q, y), Q


def penultimate_backprop(params: np.ndarray, spec: NetworkSpec, x: np.ndarray):
    """Pieces of the eNTK of the last hidden representation ``g(x)``.

    Returns ``(g, parts)`` with one ``(B, a, has_bias)`` per layer below the
    readout, top layer first.  ``B`` is d g / d pre-activation of that layer
    (a 1-d diagonal for the layer producing ``g``, else width_g x fan_out) and
    ``a`` is the layer input, so the lower-layer eNTK is
    ``sum_l B_l(x) B_l(x')^T * (a_l . a_l' + has_bias)``.
    """
    if spec.n_layers < 2:
        raise ModelError("network has no hidden layer")
    layers = unflatten(params, spec)
    pre, post = _forward(layers, _check_inputs(np.asarray(x)[None, :], spec), spec.activation)
    L = len(layers) - 1  # index of the readout layer
    g = post[L][0]
    top = _act_grad(pre[L - 1][0], spec.activation)
    parts = [(top, post[L - 1][0], layers[L - 1][1] is not None)]
    if L >= 2:
        B = top[:, None] * layers[L - 1][0]
        for i in range(L - 2, -1, -1):
            B = B * _act_grad(pre[i][0], spec.activation)[None, :]
            parts.append((B, post[i][0], layers[i][1] is not None))
            if i:
                B = B @ layers[i][0]
    return g, parts


def lower_entk(parts, parts2) -> np.ndarray:
    """Assemble the lower-layer eNTK from two :func:`penultimate_backprop` outputs."""
    width = parts[0][0].shape[0]
    Kg = np.zeros((width, width))
    for (B, a, has_b), (B2, a2, _) in zip(parts, parts2):
        c = float(a @ a2) + float(has_b)
        if B.ndim == 1:
            Kg[np.diag_indices(width)] += c * B * B2
        else:
            Kg += c * (B @ B2.T)
    return Kg


# --- training ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    shuffle: bool = True
    # number of leading SGD iterations whose predictions and parameters are recorded
    track_iterations: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ModelError("learning rate must be positive")
        if self.batch_size < 1:
            raise ModelError("batch size must be >= 1")
        if self.epochs < 0:
            raise ModelError("epochs must be >= 0")


@dataclass
class TrainLog:
    sample_ids: np.ndarray
    labels: np.ndarray
    losses: np.ndarray  # (epochs, n): loss of each sample when its batch was visited
    checkpoints: list = field(default_factory=list)  # params after epoch e+1
    val_accuracy: list = field(default_factory=list)
    iter_batches: list = field(default_factory=list)  # positions used by update t
    iter_predictions: list = field(default_factory=list)  # predictions under w^u, u = 0..T
    iter_params: list = field(default_factory=list)  # w^u, u = 0..T

    @property
    def epochs(self) -> int:
        return self.losses.shape[0]


def train(dataset: LabeledDataset, spec: NetworkSpec, cfg: TrainConfig,
          rng: np.random.Generator | None = None, params0: np.ndarray | None = None,
          valset: LabeledDataset | None = None):
    """Plain mini-batch SGD on the mean cross-entropy.

    The generator drives both initialisation (when ``params0`` is None) and the
    per-epoch shuffles, so a (seed, config) pair fixes the run completely.
    """
    if dataset.n == 0:
        raise ModelError("cannot train on an empty dataset")
    if dataset.p != spec.p or dataset.K != spec.K:
        raise ModelError("dataset shape does not match the network")
    rng = make_rng(cfg.seed) if rng is None else rng
    params = init_params(spec, rng) if params0 is None else np.array(params0, dtype=np.float64)
    n = dataset.n
    X, y = dataset.features, dataset.labels
    tlog = TrainLog(dataset.ids.copy(), y.copy(), np.zeros((cfg.epochs, n)))
    tracking = cfg.track_iterations > 0
    if tracking:
        tlog.iter_predictions.append(predict(params, spec, X))
        tlog.iter_params.append(params.copy())
    it = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grad, losses, _ = batch_loss_gradient(params, spec, X[batch], y[batch])
            if not np.all(np.isfinite(losses)) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(it)
            tlog.losses[epoch, batch] = losses
            params = params - cfg.learning_rate * grad
            it += 1
            if tracking and it <= cfg.track_iterations:
                tlog.iter_batches.append(batch.copy())
                tlog.iter_predictions.append(predict(params, spec, X))
                tlog.iter_params.append(params.copy())
        tlog.checkpoints.append(params.copy())
        if valset is not None:
            tlog.val_accuracy.append(accuracy(params, spec, valset))
    return params, tlog


def best_index(accuracies) -> int:
    """Position of the highest accuracy; earliest wins ties."""
    return argmax_tiebreak(accuracies)


def select_best(tlog: TrainLog, valset: LabeledDataset, spec: NetworkSpec) -> np.ndarray:
    """Checkpoint with the best validation accuracy (earliest epoch on ties)."""
    if valset.n == 0:
        raise ModelError("empty validation set")
    if not tlog.checkpoints:
        raise ModelError("training log holds no checkpoints")
    accs = [accuracy(w, spec, valset) for w in tlog.checkpoints]
    return tlog.checkpoints[best_index(accs)]


# --- checkpoint file ----------------------------------------------------------------

CKPT_MAGIC = b"LPW1"


def checkpoint_bytes(params: np.ndarray, spec: NetworkSpec) -> bytes:
    widths = spec.layer_widths
    body = CKPT_MAGIC + struct.pack(f"<I{len(widths)}I", len(widths), *widths)
    body += struct.pack("<BB", ACTIVATIONS.index(spec.activation), int(spec.bias))
    body += np.asarray(params, dtype="<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, params: np.ndarray, spec: NetworkSpec) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, spec))


def parse_checkpoint(raw: bytes):
    if raw[:4] != CKPT_MAGIC:
        raise ModelError("not a checkpoint file (bad magic)")
    if len(raw) < 12:
        raise ModelError("truncated checkpoint")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise ModelError("checkpoint CRC mismatch")
    (n,) = struct.unpack("<I", raw[4:8])
    widths = struct.unpack(f"<{n}I", raw[8:8 + 4 * n])
    off = 8 + 4 * n
    act, bias = struct.unpack("<BB", raw[off:off + 2])
    spec = NetworkSpec(widths, ACTIVATIONS[act], bool(bias))
    params = np.frombuffer(raw[off + 2:-4], dtype="<f8").astype(np.float64)
    if params.size != spec.n_params:
        raise ModelError(f"checkpoint holds {params.size} values, spec needs {spec.n_params}")
    return params, spec


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
