"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the code under test except the layer spec classes.
"""

import math

import numpy as np

from rpk.netgraph import (AvgPool2d, Conv2d, Flatten, Linear, MaxPool2d, ReLU, Softmax,
                          bias_key, weight_key)


def loop_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.result_type(a, b))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def loop_conv(x, f, bias=None, stride=1, padding=0, groups=1):
    """Direct nested-loop convolution of one image ``x[m, h, w]``."""
    m, h, w = x.shape
    n, mg, k, _ = f.shape
    ng = n // groups
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, oh, ow))
    for o in range(n):
        g = o // ng
        for i in range(oh):
            for j in range(ow):
                s = 0.0 if bias is None else float(bias[o])
                for c in range(mg):
                    ci = g * mg + c
                    for a in range(k):
                        for b in range(k):
                            y = i * stride + a - padding
                            z = j * stride + b - padding
                            if 0 <= y < h and 0 <= z < w:
                                s += f[o, c, a, b] * x[ci, y, z]
                out[o, i, j] = s
    return out


def loop_pool(x, k, stride, op):
    c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.zeros((c, oh, ow))
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                out[ch, i, j] = op(x[ch, i * stride:i * stride + k, j * stride:j * stride + k])
    return out


def reference_forward(net, weights, x):
    """Evaluate one sample at a time with explicit loops."""
    outs = []
    for sample in x:
        h = np.asarray(sample, dtype=np.float64)
        for i, layer in enumerate(net.layers):
            if isinstance(layer, Conv2d):
                h = loop_conv(h, weights[weight_key(i)], weights.get(bias_key(i)),
                              layer.stride, layer.padding, layer.groups)
            elif isinstance(layer, Linear):
                w = weights[weight_key(i)]
                b = weights.get(bias_key(i))
                h = np.array([sum(w[o, t] * h[t] for t in range(len(h))) +
                              (0.0 if b is None else b[o]) for o in range(w.shape[0])])
            elif isinstance(layer, ReLU):
                h = np.where(h > 0, h, 0.0)
            elif isinstance(layer, Flatten):
                h = h.reshape(-1)
            elif isinstance(layer, Softmax):
                e = np.array([math.exp(v - max(h)) for v in h])
                h = e / e.sum()
            elif isinstance(layer, MaxPool2d):
                h = loop_pool(h, layer.kernel, layer.stride or layer.kernel, np.max)
            elif isinstance(layer, AvgPool2d):
                h = loop_pool(h, layer.kernel, layer.stride or layer.kernel, np.mean)
        outs.append(h)
    return np.stack(outs)


def loop_similarity(a):
    """Gram matrix by explicit dot products, then row L2 normalisation."""
    b = a.shape[0]
    q = [np.asarray(a[i], dtype=np.float64).ravel() for i in range(b)]
    g = np.zeros((b, b))
    for i in range(b):
        for j in range(b):
            g[i, j] = sum(float(u) * float(v) for u, v in zip(q[i], q[j]))
    for i in range(b):
        norm = math.sqrt(sum(v * v for v in g[i]))
        if norm > 0:
            g[i] /= norm
    return g


def loop_cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        mx = max(row)
        lse = mx + math.log(sum(math.exp(v - mx) for v in row))
        total += lse - row[y]
    return total / len(labels)


def central_difference(f, x, index, h):
    """``df/dx[index]`` by central differences; restores ``x`` afterwards."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b):
    a = float(a)
    b = float(b)
    return abs(a - b) / max(abs(a), abs(b), 1e-8)
