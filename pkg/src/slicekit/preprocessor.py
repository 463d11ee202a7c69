"""Transfer-layer insertion, retraining and head/tail export.

The TL pair (2x2 max pool on the device, 2x nearest-neighbour upsample on the
edge) has no weights. Retraining therefore updates the surrounding layers,
all of them, with plain SGD on a softmax cross-entropy loss.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from slicekit import tensor as tc
from slicekit.errors import DivergedLoss, InvalidSplit, NotTlEligible, ShapeError
from slicekit.graph import LayerGraph, enumerate_split_points, slice_graph
from slicekit.tensor import DeviceTL, EdgeTL

TOY_SIZE = 16


@dataclass(frozen=True)
class TLModel:
    base: LayerGraph
    split_index: int
    graph: LayerGraph

    @property
    def device_tl_index(self) -> int:
        return self.split_index + 1

    def with_graph(self, graph: LayerGraph) -> "TLModel":
        return TLModel(self.base, self.split_index, graph)


def tl_name(base_name: str, split_index: int) -> str:
    return f"{base_name}-tl{split_index}"


def insert_tl(graph: LayerGraph, split_index: int) -> TLModel:
    """Place DeviceTL after unit ``split_index`` and EdgeTL right after it."""
    points = {p.index: p for p in enumerate_split_points(graph) if p.kind == "interior"}
    if split_index not in points:
        raise InvalidSplit(f"split {split_index} is not an interior split of {graph.name} "
                           f"(0..{graph.n - 2})")
    if not points[split_index].tl_eligible:
        raise NotTlEligible(f"split {split_index} of {graph.name} has odd spatial dims "
                            f"{points[split_index].output_shape}")
    cut = split_index + 1
    layers = graph.layers[:cut] + (DeviceTL(), EdgeTL()) + graph.layers[cut:]
    params = graph.params[:cut] + (None, None) + graph.params[cut:]
    tl = LayerGraph(tl_name(graph.name, split_index), graph.input_shape, layers, params)
    if tl.shapes()[cut + 1] != graph.shapes()[split_index]:
        raise ShapeError(cut + 1, graph.shapes()[split_index], tl.shapes()[cut + 1])
    return TLModel(graph, split_index, tl)


def strip_tl(model: TLModel) -> LayerGraph:
    """Drop the TL pair, keeping whatever weights the TL graph now holds."""
    g, cut = model.graph, model.device_tl_index
    assert isinstance(g.layers[cut], DeviceTL) and isinstance(g.layers[cut + 1], EdgeTL)
    return LayerGraph(model.base.name, g.input_shape, g.layers[:cut] + g.layers[cut + 2:],
                      g.params[:cut] + g.params[cut + 2:])


def split_model(model: TLModel) -> Tuple[LayerGraph, LayerGraph]:
    """Head ending at DeviceTL, tail starting at EdgeTL."""
    return slice_graph(model.graph, model.device_tl_index)


# ---------------------------------------------------------------------------
# Toy dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    classes: int


def make_toy_dataset(seed: int = 0, classes: int = 4, samples_per_class: int = 400,
                     val_fraction: float = 0.2, noise: float = 0.5) -> ToyDataset:
    """Noisy 3x16x16 sinusoidal gratings; the class is the grating orientation.

    Phase, frequency and per-channel contrast are random, so neither a single
    pixel nor the mean colour carries the label.
    """
    if not 2 <= classes <= 10:
        raise ValueError(f"classes must be in [2, 10], got {classes}")
    if samples_per_class < 2:
        raise ValueError("need at least 2 samples per class")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:TOY_SIZE, 0:TOY_SIZE].astype(np.float64)
    n_val = max(1, int(round(samples_per_class * val_fraction)))
    parts = {"train": ([], []), "val": ([], [])}
    for c in range(classes):
        theta = math.pi * c / classes
        phase = rng.uniform(0, 2 * math.pi, samples_per_class)
        freq = rng.uniform(0.6, 1.0, samples_per_class)
        contrast = rng.uniform(0.5, 1.0, (samples_per_class, 3, 1, 1))
        proj = math.cos(theta) * xx + math.sin(theta) * yy
        wave = np.sin(freq[:, None, None] * proj + phase[:, None, None])[:, None]
        x = contrast * wave + noise * rng.standard_normal((samples_per_class, 3, TOY_SIZE, TOY_SIZE))
        for name, sl in (("val", slice(0, n_val)), ("train", slice(n_val, None))):
            parts[name][0].append(x[sl])
            parts[name][1].append(np.full(len(x[sl]), c))
    out = {}
    for name, (xs, ys) in parts.items():
        x, y = np.concatenate(xs).astype(np.float32), np.concatenate(ys).astype(np.int64)
        order = rng.permutation(len(y))
        out[name] = (np.ascontiguousarray(x[order]), y[order])
    return ToyDataset(*out["train"], *out["val"], classes)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainLog:
    epochs: List[EpochStats] = field(default_factory=list)

    @property
    def final(self) -> EpochStats:
        return self.epochs[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.train_acc), repr(e.val_acc)])
        return buf.getvalue()


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean loss over the batch and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.log(np.maximum(p[np.arange(n), labels], 1e-30)).mean())
    grad = p
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


def _sgd(p, g, lr):
    if p is None:
        return None
    if isinstance(p, tuple) and len(p) and (p[0] is None or isinstance(p[0], tuple)):
        return tuple(_sgd(a, b, lr) for a, b in zip(p, g))
    w, b = p
    return ((w - lr * g[0]).astype(w.dtype), (b - lr * g[1]).astype(b.dtype))


def predict(graph: LayerGraph, x: np.ndarray, batch: int = 256) -> np.ndarray:
    out = [graph.run(x[i:i + batch]).reshape(len(x[i:i + batch]), -1) for i in range(0, len(x), batch)]
    return np.concatenate(out).argmax(axis=1)


def evaluate(graph: LayerGraph, x: np.ndarray, y: np.ndarray) -> float:
    return float((predict(graph, x) == y).mean())


def train(graph: LayerGraph, data: ToyDataset, cfg: TrainConfig = TrainConfig()):
    """Plain minibatch SGD on every weight; returns ``(trained graph, TrainLog)``."""
    out_shape = graph.output_shape
    if out_shape[1:] != (1, 1) or out_shape[0] != data.classes:
        raise ShapeError(graph.n - 1, (data.classes, 1, 1), out_shape)
    rng = np.random.default_rng(cfg.seed)
    params = list(graph.params)
    log = TrainLog()
    n = len(data.y_train)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = data.x_train[idx], data.y_train[idx]
            caches = []
            for layer, p in zip(graph.layers, params):
                x, c = tc.forward_batch(layer, x, p)
                caches.append(c)
            logits = x.reshape(len(idx), -1).astype(np.float64)
            loss, dlogits = softmax_cross_entropy(logits, y)
            if not math.isfinite(loss):
                raise DivergedLoss(epoch, loss)
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
            dy = dlogits.astype(np.float32).reshape(x.shape)
            for i in reversed(range(graph.n)):
                dy, grads = tc.backward_batch(graph.layers[i], caches[i], params[i], dy)
                params[i] = _sgd(params[i], grads, cfg.learning_rate)
        current = graph.with_params(params)
        epoch_loss = loss_sum / n
        if not math.isfinite(epoch_loss):
            raise DivergedLoss(epoch, epoch_loss)
        log.epochs.append(EpochStats(epoch, epoch_loss, correct / n,
                                     evaluate(current, data.x_val, data.y_val)))
    return graph.with_params(params), log


def retrain(model: TLModel, data: ToyDataset, cfg: TrainConfig = TrainConfig()):
    """Fine-tune the whole TL-bearing graph, starting from its current weights."""
    graph, log = train(model.graph, data, cfg)
    return model.with_graph(graph), log

