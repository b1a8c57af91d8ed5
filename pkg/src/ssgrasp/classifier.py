"""Minimal PointNet-style grasp quality classifier, trained from scratch.

Per-point shared MLP (3 -> 64 -> 128, ReLU), max-pool over points, then a
128 -> 64 -> 2 head. Everything runs in float64 with hand-written
backpropagation.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .geom_core import InputError
from .grasp_sampling import CRC_POINTS

log = logging.getLogger(__name__)

LAYER_SIZES = (3, 64, 128, 64, 2)
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")
MAGIC = "GQNET1"


def _shapes(sizes):
    d, h1, h2, h3, k = sizes
    return {"w1": (d, h1), "b1": (h1,), "w2": (h1, h2), "b2": (h2,),
            "w3": (h2, h3), "b3": (h3,), "w4": (h3, k), "b4": (k,)}


@dataclass
class ClassifierModel:
    params: dict
    sizes: tuple = LAYER_SIZES

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) != 5:
            raise InputError("sizes must be (in, hidden1, hidden2, head_hidden, classes)")
        for name, shape in _shapes(self.sizes).items():
            if self.params[name].shape != shape:
                raise InputError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def initialize(cls, sizes=LAYER_SIZES, rng_seed=0) -> "ClassifierModel":
        """He-normal weights scaled by fan-in, zero biases."""
        rng = np.random.default_rng(rng_seed)
        params = {}
        for name, shape in _shapes(sizes).items():
            if name.startswith("w"):
                params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
            else:
                params[name] = np.zeros(shape)
        return cls(params, sizes)

    @classmethod
    def zeros(cls, sizes=LAYER_SIZES) -> "ClassifierModel":
        return cls({n: np.zeros(s) for n, s in _shapes(sizes).items()}, sizes)

    def copy(self) -> "ClassifierModel":
        return ClassifierModel({k: v.copy() for k, v in self.params.items()}, self.sizes)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in PARAM_NAMES])

    def to_bytes(self) -> bytes:
        header = (MAGIC + " " + " ".join(str(s) for s in self.sizes) + "\n").encode("ascii")
        return header + self.flat().astype("<f8").tobytes()

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        with open(path, "rb") as f:
            tok = f.readline().decode("ascii").split()
            if not tok or tok[0] != MAGIC or len(tok) != 6:
                raise InputError(f"{path}: not a {MAGIC} model file")
            sizes = tuple(int(t) for t in tok[1:])
            flat = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
        params, pos = {}, 0
        for name, shape in _shapes(sizes).items():
            n = int(np.prod(shape))
            if pos + n > flat.size:
                raise InputError(f"{path}: truncated weight block {name}")
            params[name] = flat[pos:pos + n].reshape(shape).copy()
            pos += n
        return cls(params, sizes)


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise InputError("invalid training configuration")


def _forward(p, X):
    """X: (B, N, d). Returns logits and the cache needed for backprop."""
    z1 = X @ p["w1"] + p["b1"]
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ p["w2"] + p["b2"]
    h2 = np.maximum(z2, 0.0)
    arg = np.argmax(h2, axis=1)  # (B, C); first index on ties
    g = np.take_along_axis(h2, arg[:, None, :], axis=1)[:, 0, :]
    z3 = g @ p["w3"] + p["b3"]
    a3 = np.maximum(z3, 0.0)
    logits = a3 @ p["w4"] + p["b4"]
    return logits, (X, h1, arg, g, a3)


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(points):
    X = np.asarray(points, dtype=np.float64)
    single = X.ndim == 2
    return (X[None] if single else X), single


def forward(model: ClassifierModel, points):
    """Logits and class probabilities for one cloud (1024, 3) or a batch."""
    X, single = _as_batch(points)
    if X.ndim != 3 or X.shape[1] != CRC_POINTS or X.shape[2] != model.sizes[0]:
        raise InputError(f"expected ({CRC_POINTS}, {model.sizes[0]}) points, got {X.shape[-2:]}")
    logits, _ = _forward(model.params, X)
    probs = _softmax(logits)
    return (logits[0], probs[0]) if single else (logits, probs)


def loss_and_grad(model: ClassifierModel, X, y):
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    loss, grads, _ = _loss_grad_logits(model.params, X, y)
    return loss, grads


def _loss_grad_logits(p, X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    B = X.shape[0]
    logits, (X, h1, arg, g, a3) = _forward(p, X)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(B), y]))

    dlogits = np.exp(z - logsum[:, None])
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    grads = {"w4": a3.T @ dlogits, "b4": dlogits.sum(axis=0)}
    dz3 = (dlogits @ p["w4"].T) * (a3 > 0)
    grads["w3"] = g.T @ dz3
    grads["b3"] = dz3.sum(axis=0)
    # max-pool routes each feature's gradient to its argmax point only
    dzg = (dz3 @ p["w3"].T) * (g > 0)  # (B, C)
    bidx = np.arange(B)[:, None]
    h1g = h1[bidx, arg]  # (B, C, H1)
    grads["w2"] = np.einsum("bck,bc->kc", h1g, dzg)
    grads["b2"] = dzg.sum(axis=0)
    dh1 = np.zeros_like(h1)
    np.add.at(dh1, (np.broadcast_to(bidx, arg.shape), arg), dzg[:, :, None] * p["w2"].T[None])
    dz1 = dh1 * (h1 > 0)
    grads["w1"] = X.reshape(-1, X.shape[2]).T @ dz1.reshape(-1, dz1.shape[2])
    grads["b1"] = dz1.sum(axis=(0, 1))
    return loss, grads, logits


@dataclass
class EvalResult:
    accuracy: float
    precision: tuple
    recall: tuple
    scores: np.ndarray = field(repr=False)
    predictions: np.ndarray = field(repr=False)


def predict_scores(model: ClassifierModel, X, chunk: int = 64) -> np.ndarray:
    """Positive-class probability per sample."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(len(X))
    for s in range(0, len(X), chunk):
        _, probs = forward(model, X[s:s + chunk])
        out[s:s + chunk] = probs[:, 1]
    return out


def evaluate(model: ClassifierModel, X, y) -> EvalResult:
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise InputError("evaluation split is empty")
    X = np.asarray(X, dtype=np.float64)
    probs = np.empty((len(X), model.sizes[-1]))
    for s in range(0, len(X), 64):
        probs[s:s + 64] = forward(model, X[s:s + 64])[1]
    pred = np.argmax(probs, axis=1)
    prec, rec = [], []
    for c in range(model.sizes[-1]):
        tp = np.sum((pred == c) & (y == c))
        prec.append(float(tp / max(np.sum(pred == c), 1)))
        rec.append(float(tp / max(np.sum(y == c), 1)))
    return EvalResult(float(np.mean(pred == y)), tuple(prec), tuple(rec),
                      probs[:, 1].copy() if probs.shape[1] > 1 else probs[:, 0].copy(), pred)


def train(X, y, cfg: TrainConfig = TrainConfig(), X_test=None, y_test=None,
          sizes=LAYER_SIZES):
    """SGD with momentum over seeded shuffled mini-batches.

    Returns ``(model, history)``; history holds one dict per epoch with
    ``epoch, train_loss, train_acc, test_acc``. Train loss and accuracy are
    accumulated over the epoch's mini-batches; test_acc is NaN without a test
    split.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise InputError(f"training split has a single class ({np.unique(y).tolist()}); "
                         "need both positive and negative samples")
    rng = np.random.default_rng(cfg.seed)
    model = ClassifierModel.initialize(sizes, rng_seed=int(rng.integers(2**63)))
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X))
        total, correct = 0.0, 0
        for s in range(0, len(X), cfg.batch_size):
            bi = order[s:s + cfg.batch_size]
            loss, grads, logits = _loss_grad_logits(model.params, X[bi], y[bi])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            total += loss * len(bi)
            correct += int(np.sum(np.argmax(logits, axis=1) == y[bi]))
            for k in PARAM_NAMES:
                velocity[k] = cfg.momentum * velocity[k] - cfg.lr * grads[k]
                model.params[k] += velocity[k]
        train_acc = correct / len(X)
        test_acc = float("nan")
        if X_test is not None and len(X_test):
            test_acc = evaluate(model, X_test, y_test).accuracy
        history.append({"epoch": epoch, "train_loss": total / len(X),
                        "train_acc": train_acc, "test_acc": test_acc})
        log.info("epoch %d loss %.4f train %.3f test %.3f", epoch, total / len(X),
                 train_acc, test_acc)
    return model, history


def write_history_csv(path, history):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "test_acc"])
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["train_acc"]), repr(h["test_acc"])])
