"""L1-magnitude structured channel pruning for sequential networks.

Each prunable layer loses the ``ceil(ratio * n)`` output channels whose
filters have the smallest L1 norm.  The layer that consumes those channels
(the next conv, or the next linear layer after a flatten) loses the matching
inputs.  Depthwise convolutions sitting in between follow their producer.
"""

import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .netgraph import (AvgPool2d, Conv2d, Flatten, Linear, MaxPool2d, Network, ReLU,
                       bias_key, model_stats, weight_key)


class PruneError(ValueError):
    pass


@dataclass
class PruneConfig:
    ratio: float = 0.5
    criterion: str = "L1"
    protected_layers: Optional[list] = None  # None -> first conv and final classifier

    def __post_init__(self):
        if not 0 <= self.ratio < 1:
            raise PruneError(f"prune ratio must lie in [0, 1), got {self.ratio}")
        if self.criterion != "L1":
            raise PruneError(f"unsupported criterion {self.criterion!r}")


@dataclass
class PruneRecord:
    ratio: float
    kept: dict = field(default_factory=dict)  # producer layer index -> kept channel indices
    coupled: dict = field(default_factory=dict)  # depthwise layer -> its producer
    params_before: int = 0
    params_after: int = 0

    @property
    def removed_fraction(self):
        if not self.params_before:
            return 0.0
        return 1.0 - self.params_after / self.params_before

    def to_dict(self):
        d = asdict(self)
        d["kept"] = {str(k): v for k, v in self.kept.items()}
        d["coupled"] = {str(k): v for k, v in self.coupled.items()}
        d["removed_fraction"] = self.removed_fraction
        return d


def filter_norms(w):
    """L1 norm of each output filter (row) of a conv or linear weight."""
    w = np.asarray(w, dtype=np.float64)
    return np.abs(w.reshape(w.shape[0], -1)).sum(axis=1)


def channels_to_remove(n, ratio):
    return math.ceil(Fraction(ratio).limit_denominator(10**6) * n)


def select_channels(norms, ratio):
    """Indices kept after dropping the lowest-norm channels.

    Ties keep the lower channel index.  The result is sorted ascending.
    """
    n = len(norms)
    drop = channels_to_remove(n, ratio)
    if n - drop < 1:
        raise PruneError(f"ratio {ratio} would remove all {n} channels of a layer")
    order = sorted(range(n), key=lambda c: (-norms[c], c))
    return sorted(order[:n - drop])


def _consumer_path(net, i):
    """Follow the channels produced by layer ``i`` to their consumer.

    Returns ``(depthwise layers on the way, consumer index, spatial size)``
    or ``None`` when the channels reach the output or a layer that cannot be
    sliced.
    """
    depthwise = []
    spatial = None
    for j in range(i + 1, len(net.layers)):
        layer = net.layers[j]
        if isinstance(layer, (ReLU, MaxPool2d, AvgPool2d)):
            continue
        if isinstance(layer, Flatten):
            spatial = int(np.prod(net.shapes[j][1:])) if len(net.shapes[j]) == 3 else 1
            continue
        if isinstance(layer, Conv2d):
            if layer.is_depthwise and spatial is None:
                depthwise.append(j)
                continue
            if layer.groups == 1 and spatial is None:
                return depthwise, j, None
            return None
        if isinstance(layer, Linear):
            return depthwise, j, spatial or 1
        return None
    return None


def _is_producer(layer):
    if isinstance(layer, Linear):
        return True
    return isinstance(layer, Conv2d) and layer.groups == 1


def prune_channels(net, weights, cfg):
    """Prune ``net`` per ``cfg``; returns ``(net', weights', PruneRecord)``.

    Pruning decisions use the unpruned filters, so they do not depend on
    the order layers are visited in.
    """
    params = net.parameterized()
    protected = cfg.protected_layers
    if protected is None:
        protected = [params[0], params[-1]] if params else []
    protected = set(protected)

    layers = list(net.layers)
    new_w = {k: v.copy() for k, v in weights.items()}
    record = PruneRecord(cfg.ratio)
    record.params_before = model_stats(net).param_count

    for i in params:
        layer = net.layers[i]
        if i in protected or not _is_producer(layer) or cfg.ratio == 0:
            continue
        path = _consumer_path(net, i)
        if path is None:
            continue
        depthwise, consumer, spatial = path
        keep = select_channels(filter_norms(weights[weight_key(i)]), cfg.ratio)
        record.kept[i] = keep
        k = len(keep)

        layers[i] = (replace(layers[i], out_channels=k) if isinstance(layer, Conv2d)
                     else replace(layers[i], out_features=k))
        new_w[weight_key(i)] = new_w[weight_key(i)][keep]
        if bias_key(i) in new_w:
            new_w[bias_key(i)] = new_w[bias_key(i)][keep]

        for j in depthwise:
            record.coupled[j] = i
            layers[j] = replace(layers[j], in_channels=k, out_channels=k, groups=k)
            new_w[weight_key(j)] = new_w[weight_key(j)][keep]
            if bias_key(j) in new_w:
                new_w[bias_key(j)] = new_w[bias_key(j)][keep]

        c = layers[consumer]
        if isinstance(c, Conv2d):
            layers[consumer] = replace(c, in_channels=k)
            new_w[weight_key(consumer)] = new_w[weight_key(consumer)][:, keep]
        else:
            cols = (np.asarray(keep)[:, None] * spatial + np.arange(spatial)[None, :]).ravel()
            layers[consumer] = replace(c, in_features=len(cols))
            new_w[weight_key(consumer)] = new_w[weight_key(consumer)][:, cols]

    for key in new_w:
        new_w[key] = np.ascontiguousarray(new_w[key])
    pruned = Network(layers, net.input_shape, f"{net.name}-pruned" if record.kept else net.name)
    record.params_after = model_stats(pruned).param_count
    return pruned, new_w, record
