"""Reverse-mode gradients for sequential networks, SGD with momentum, and the
fine-tuning loop."""

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container
from .distill import cross_entropy, sp_loss, sp_loss_grad
from .errors import NonFiniteError
from .netgraph import (AvgPool2d, Conv2d, Flatten, Linear, MaxPool2d, ReLU, Softmax,
                       bias_key, conv_backward, forward_trace, layer_forward, pool_backward,
                       predict, weight_key)

log = logging.getLogger(__name__)

MODES = ("vanilla_finetune", "overparam_finetune", "overparam_finetune_kd", "train_from_scratch")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple = (15, 25)
    lr_decay: float = 0.1
    seed: int = 0
    mode: str = "overparam_finetune_kd"
    dtype: str = "float32"
    checkpoint_every: int = 0
    checkpoint_dir: str = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)

    def lr_at(self, epoch):
        drops = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr * self.lr_decay**drops

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d


class TrainingDiverged(NonFiniteError):
    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


def _logits_index(net):
    last = len(net.layers) - 1
    # a trailing Softmax is folded into the cross-entropy
    return last - 1 if last >= 0 and isinstance(net.layers[last], Softmax) else last


def _first_nonfinite(acts):
    for i, a in enumerate(acts):
        if not np.all(np.isfinite(a)):
            return i
    return None


def backward(net, weights, x, labels, distill=None, teacher_acts=None):
    """Loss components and gradients of cross-entropy (+ gamma * SP loss).

    ``distill`` is a :class:`~rpk.distill.DistillConfig`; teacher activations
    are computed from ``distill.teacher`` unless passed in.  Returns
    ``(components, grads)`` with ``grads`` keyed like ``weights``.
    """
    try:
        acts, caches = forward_trace(net, weights, x)
    except NonFiniteError:
        acts = []
        h = x
        with np.errstate(over="ignore", invalid="ignore"):
            for i, layer in enumerate(net.layers):
                h, _ = layer_forward(layer, weights, i, h)
                acts.append(h)
        bad = _first_nonfinite(acts)
        raise NonFiniteError(f"non-finite activation at layer {bad}") from None
    top = _logits_index(net)
    task, dy = cross_entropy(acts[top], labels)
    extra = {}
    sp = 0.0
    if distill is not None and distill.pairs:
        if teacher_acts is None:
            tnet, tw = distill.teacher
            teacher_acts = forward_trace(tnet, tw, x)[0]
        sp = sp_loss(teacher_acts, acts, distill.pairs)
        if distill.gamma:
            extra = sp_loss_grad(teacher_acts, acts, distill.pairs, distill.gamma)
        for s in extra:
            if s > top:
                raise ValueError(f"distillation hook on layer {s} lies past the logits")
    gamma = distill.gamma if distill is not None else 0.0
    total = task + gamma * sp
    if not np.isfinite(total):
        bad = _first_nonfinite(acts)
        raise NonFiniteError(f"non-finite loss (first non-finite activation: layer {bad})")

    grads = {}
    for i in range(top, -1, -1):
        if i in extra:
            dy = dy + extra[i]
        layer = net.layers[i]
        x_in = acts[i - 1] if i > 0 else x
        if isinstance(layer, Conv2d):
            dy, dw, db = conv_backward(layer, weights[weight_key(i)], caches[i], x_in.shape, dy)
            grads[weight_key(i)] = dw
            if db is not None:
                grads[bias_key(i)] = db
        elif isinstance(layer, Linear):
            grads[weight_key(i)] = dy.T @ x_in
            if layer.bias:
                grads[bias_key(i)] = dy.sum(axis=0)
            dy = dy @ weights[weight_key(i)]
        elif isinstance(layer, ReLU):
            dy = dy * (x_in > 0)
        elif isinstance(layer, Flatten):
            dy = dy.reshape(x_in.shape)
        elif isinstance(layer, Softmax):
            p = acts[i]
            dy = p * (dy - np.sum(dy * p, axis=-1, keepdims=True))
        elif isinstance(layer, (MaxPool2d, AvgPool2d)):
            dy = pool_backward(layer, caches[i], x_in.shape, dy)
        else:
            raise TypeError(f"no backward rule for {layer!r}")
    for key, w in weights.items():
        grads[key] = np.asarray(grads.get(key, np.zeros_like(w)), dtype=w.dtype)
    return {"task": task, "sp": sp, "total": total}, grads


def sgd_step(weights, grads, state, lr, momentum=0.9, weight_decay=0.0):
    """One SGD-with-momentum update; returns new ``(weights, state)`` dicts.

    ``v <- momentum * v + grad + weight_decay * w``; ``w <- w - lr * v``.
    """
    new_w, new_state = {}, {}
    for key, w in weights.items():
        g = grads[key] + weight_decay * w
        v = momentum * state[key] + g if key in state else g
        v = v.astype(w.dtype, copy=False)
        new_state[key] = v
        new_w[key] = (w - lr * v).astype(w.dtype, copy=False)
    return new_w, new_state


def accuracy(net, weights, x, y, batch_size=256):
    if len(x) == 0:
        return 0.0
    dtype = next(iter(weights.values())).dtype if weights else x.dtype
    correct = 0
    for s in range(0, len(x), batch_size):
        out = predict(net, weights, x[s:s + batch_size].astype(dtype, copy=False))
        correct += int(np.sum(out.argmax(axis=1) == y[s:s + batch_size]))
    return correct / len(x)


@dataclass
class History:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def write_csv(self, path):
        _write_rows(path, ["step", "L_task", "L_SP", "total", "lr"], self.steps)

    def write_epochs_csv(self, path):
        cols = ["epoch", "lr", "loss", "task", "sp", "train_acc", "val_acc"]
        _write_rows(path, cols, self.epochs)


def _write_rows(path, cols, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def finetune(net, weights, teacher, data, cfg, distill=None, val=None, meta=None):
    """Train ``weights`` on ``data = (x, y)``; returns ``(weights, History)``.

    ``teacher`` is the frozen ``(network, weights)`` pair used by ``distill``;
    distillation is active only when ``distill`` is given.  Shuffling is
    seeded from ``cfg.seed`` so identical inputs give identical histories.
    """
    dtype = np.dtype(cfg.dtype)
    weights = {k: np.asarray(v, dtype=dtype).copy() for k, v in weights.items()}
    x, y = data
    x = np.asarray(x, dtype=dtype)
    y = np.asarray(y)
    if distill is not None:
        if cfg.batch_size < 2:
            raise ValueError("distillation needs batch_size >= 2")
        if teacher is not None:
            tnet, tw = teacher
            distill = replace(distill, teacher=(tnet, {k: np.asarray(v, dtype=dtype)
                                                       for k, v in tw.items()}))
        if distill.teacher is None:
            raise ValueError("distillation requires a teacher network")
    rng = np.random.default_rng(cfg.seed)
    state = {}
    history = History()
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(x))
        sums = {"task": 0.0, "sp": 0.0, "total": 0.0}
        seen = 0
        for s in range(0, len(x), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if distill is not None and len(idx) < 2:
                continue
            xb, yb = x[idx], y[idx]
            try:
                comps, grads = backward(net, weights, xb, yb, distill)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}", epoch, step) from None
            weights, state = sgd_step(weights, grads, state, lr, cfg.momentum, cfg.weight_decay)
            history.steps.append({"step": step, "L_task": comps["task"], "L_SP": comps["sp"],
                                  "total": comps["total"], "lr": lr})
            for k in sums:
                sums[k] += comps[k] * len(idx)
            seen += len(idx)
            step += 1
        seen = max(seen, 1)
        row = {"epoch": epoch, "lr": lr, "loss": sums["total"] / seen,
               "task": sums["task"] / seen, "sp": sums["sp"] / seen,
               "train_acc": accuracy(net, weights, x, y)}
        if val is not None:
            row["val_acc"] = accuracy(net, weights, np.asarray(val[0], dtype=dtype), val[1])
        history.epochs.append(row)
        log.debug("epoch %d %s", epoch, row)
        if cfg.checkpoint_every and cfg.checkpoint_dir and (epoch + 1) % cfg.checkpoint_every == 0:
            path = Path(cfg.checkpoint_dir) / f"{net.name}-epoch{epoch + 1}.rpk"
            container.save(net, weights, path, {**(meta or {}), "epoch": epoch + 1})
    return weights, history
