"""Linear over-parameterization of conv / grouped-conv / linear layers and contraction.

A ``k x k`` convolution with filters ``F[n, m, k, k]`` is replaced by a chain

    1x1 conv [p, m]  (padding of the original, stride 1, no bias)
    kxk conv [q, p]  (no padding, stride of the original, no bias)
    1x1 conv [n, q]  (no padding, stride 1, original bias)

with ``p = ceil(r*m)``, ``q = ceil(r*n)``.  The outer factors are random and
the middle one is solved so the chain reproduces ``F`` exactly:
``W2[:, :, a, b] = right_inv(W3) @ F[:, :, a, b] @ left_inv(W1)``.
Grouped convolutions apply the same construction inside every group.

A linear layer ``W[n, m]`` becomes ``W_l @ ... @ W_1`` with one factor solved
from the others.
"""

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import InfeasibleWidthsError, RankDeficientError, ShapeError
from .netgraph import (Conv2d, Linear, Network, bias_key, layer_from_dict,
                       layer_to_dict, weight_key)
from .tensor import check_finite, left_inverse, right_inverse

MAX_ATTEMPTS = 8
# float32 chains lose about eps32 * kappa digits; 300 keeps them under 1e-5
KAPPA_MAX = 300.0

CONV_PATHWAY = [
    "W2[q,p,k,k] -> [q*k*k, p]",
    "@ W1[p,m] -> [q*k*k, m]",
    "-> [q, m*k*k]",
    "W3[n,q] @ -> [n, m*k*k]",
    "-> F[n, m, k, k]",
]
LINEAR_PATHWAY = ["W = W_l @ W_(l-1) @ ... @ W_1"]


@dataclass
class ExpansionPlan:
    rate: float = 2.0
    expand_fc: bool = False
    fc_depth: int = 2
    fc_widths: Optional[list] = None  # p_1..p_{l-1}; None -> ceil(fc_rate * max(m, n)) each
    fc_rate: float = 2.0
    fc_solved_index: Optional[int] = None  # theta in [1, l]; None -> ceil(l / 2)
    seed: int = 0

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError(f"expansion rate must be positive, got {self.rate}")
        if self.fc_depth < 2:
            raise ValueError("fc_depth must be >= 2")

    def linear_widths(self, m, n):
        if self.fc_widths is not None:
            return [int(p) for p in self.fc_widths]
        return [expanded_width(self.fc_rate, max(m, n))] * (self.fc_depth - 1)

    def solved_index(self, depth):
        return self.fc_solved_index if self.fc_solved_index is not None else math.ceil(depth / 2)

    def to_dict(self):
        return asdict(self)


@dataclass
class ExpandedUnit:
    original_index: int
    kind: str  # "Conv3Factor" | "LinearChain"
    original: object  # the compact Conv2d / Linear spec
    factor_specs: list
    factor_indices: list = field(default_factory=list)
    solved_factor: int = 1  # 0-based position of the solved factor in factor_specs
    seed: int = 0
    pathway: list = field(default_factory=list)

    def to_dict(self):
        return {"original_index": self.original_index, "kind": self.kind,
                "original": layer_to_dict(self.original),
                "factor_specs": [layer_to_dict(s) for s in self.factor_specs],
                "factor_indices": list(self.factor_indices), "solved_factor": self.solved_factor,
                "seed": self.seed, "pathway": list(self.pathway)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["original_index"], d["kind"], layer_from_dict(d["original"]),
                   [layer_from_dict(s) for s in d["factor_specs"]], list(d["factor_indices"]),
                   d.get("solved_factor", 1), d.get("seed", 0), list(d.get("pathway", [])))


def expanded_width(rate, size):
    """``ceil(rate * size)`` computed on the exact rational value of ``rate``."""
    return math.ceil(Fraction(rate).limit_denominator(10**6) * size)


def _normal(rng, rows, cols):
    return rng.standard_normal((rows, cols)) / math.sqrt(cols)


def _with_resampling(seed, draw):
    """Draw random factors with seeds seed, seed+1, ... (at most MAX_ATTEMPTS).

    ``draw(rng)`` returns ``(result, kappa)`` where ``kappa`` is the product of
    the condition numbers of the matrices that get inverted.  The first draw
    with ``kappa <= KAPPA_MAX`` wins; otherwise the best-conditioned full-rank
    draw is used.  Only if every draw is rank-deficient is this an error.
    """
    best = None
    last = None
    for attempt in range(MAX_ATTEMPTS):
        try:
            result, kappa = draw(np.random.default_rng(seed + attempt))
        except RankDeficientError as exc:
            last = exc
            continue
        if kappa <= KAPPA_MAX:
            return result, seed + attempt
        if best is None or kappa < best[1]:
            best = (result, kappa, seed + attempt)
    if best is None:
        raise RankDeficientError(
            f"random factors rank-deficient after {MAX_ATTEMPTS} attempts (seed {seed})",
            last.report if last else None)
    return best[0], best[2]


def _cond(a):
    s = np.linalg.svd(a, compute_uv=False)
    return s[0] / s[-1]


# -- convolution -------------------------------------------------------------

def solve_middle_filter(f, w1, w3):
    """Middle ``k x k`` factor ``W2[q, p, k, k]`` with ``W3 * W2 * W1 == F``."""
    n, m, k, _ = f.shape
    p, q = w1.shape[0], w3.shape[1]
    lf = left_inverse(w1)   # [m, p]
    rt = right_inverse(w3)  # [q, n]
    # reshape(F)_{nkk x m} @ left_inv(W1) -> [nkk, p] -> [n, pkk]
    t = f.transpose(0, 2, 3, 1).reshape(n * k * k, m) @ lf
    t = t.reshape(n, k, k, p).transpose(0, 3, 1, 2).reshape(n, p * k * k)
    return (rt @ t).reshape(q, p, k, k)


def compose_filter(w1, w2, w3):
    """``F[n, m, k, k]`` from factors ``W1[p, m]``, ``W2[q, p, k, k]``, ``W3[n, q]``."""
    q, p, k, _ = w2.shape
    m = w1.shape[1]
    t = w2.transpose(0, 2, 3, 1).reshape(q * k * k, p) @ w1
    t = t.reshape(q, k, k, m).transpose(0, 3, 1, 2).reshape(q, m * k * k)
    return (w3 @ t).reshape(w3.shape[0], m, k, k)


def expand_conv(f, bias=None, rate=2.0, stride=1, padding=0, seed=0, groups=1):
    """Expand filters ``f[n, m/g, k, k]`` into three chained conv factors.

    Returns ``(unit, factors)`` with ``factors`` a list of ``(weight, bias)``
    pairs for the 1x1, kxk and 1x1 layers.
    """
    f = np.asarray(f)
    n, mg, k, k2 = f.shape
    if k != k2:
        raise ShapeError(f"square kernels only, got {f.shape}")
    if n % groups:
        raise ShapeError(f"groups={groups} does not divide out_channels={n}")
    check_finite(f, "filter")
    g = groups
    ng = n // g
    pg = expanded_width(rate, mg)
    qg = expanded_width(rate, ng)
    if pg < mg or qg < ng:
        raise ShapeError(f"rate {rate} gives p={pg*g} < m={mg*g} or q={qg*g} < n={n}; "
                         "left/right inverses would not exist")
    f64 = f.astype(np.float64)

    def draw(rng):
        w1 = np.empty((g * pg, mg))
        w2 = np.empty((g * qg, pg, k, k))
        w3 = np.empty((n, qg))
        kappa = 1.0
        for gi in range(g):
            a1 = _normal(rng, pg, mg)
            a3 = _normal(rng, ng, qg)
            w2[gi * qg:(gi + 1) * qg] = solve_middle_filter(f64[gi * ng:(gi + 1) * ng], a1, a3)
            w1[gi * pg:(gi + 1) * pg] = a1
            w3[gi * ng:(gi + 1) * ng] = a3
            kappa = max(kappa, _cond(a1) * _cond(a3))
        return (w1, w2, w3), kappa

    (w1, w2, w3), used_seed = _with_resampling(seed, draw)
    m = mg * g
    original = Conv2d(m, n, k, stride, padding, g, bias is not None)
    specs = [Conv2d(m, g * pg, 1, 1, padding, g, False),
             Conv2d(g * pg, g * qg, k, stride, 0, g, False),
             Conv2d(g * qg, n, 1, 1, 0, g, bias is not None)]
    dtype = f.dtype
    factors = [(w1.reshape(g * pg, mg, 1, 1).astype(dtype), None),
               (w2.astype(dtype), None),
               (w3.reshape(n, qg, 1, 1).astype(dtype),
                None if bias is None else np.array(bias, dtype=dtype))]
    unit = ExpandedUnit(-1, "Conv3Factor", original, specs, [0, 1, 2], 1, used_seed,
                        list(CONV_PATHWAY))
    return unit, factors


def expand_depthwise(f, bias=None, rate=2.0, stride=1, padding=0, seed=0):
    """Expand a depthwise conv ``f[n, 1, k, k]`` (groups == channels)."""
    f = np.asarray(f)
    if f.ndim != 4 or f.shape[1] != 1:
        raise ShapeError(f"depthwise filters must have shape [n, 1, k, k], got {f.shape}")
    return expand_conv(f, bias, rate, stride, padding, seed, groups=f.shape[0])


# -- fully connected ---------------------------------------------------------

def check_linear_widths(m, n, widths, theta):
    """Raise unless the random factors around factor ``theta`` can be inverted."""
    depth = len(widths) + 1
    if not 1 <= theta <= depth:
        raise InfeasibleWidthsError(f"infeasible widths: solved index {theta} not in [1, {depth}]")
    dims = [m, *widths, n]
    for i in range(1, depth):
        p = dims[i]
        if i >= theta and p < n:
            raise InfeasibleWidthsError(
                f"infeasible widths: p_{i}={p} < n={n}; the factors above the solved one "
                "need a right inverse")
        if i < theta and p < m:
            raise InfeasibleWidthsError(
                f"infeasible widths: p_{i}={p} < m={m}; the factors below the solved one "
                "need a left inverse")


def _chain(mats, size):
    out = np.eye(size)
    for a in mats:
        out = a @ out
    return out


def expand_linear(w, bias=None, widths=(), theta=None, seed=0):
    """Expand ``w[n, m]`` into ``len(widths) + 1`` linear layers.

    Factor ``theta`` (1-based, counted from the input side) is solved; the rest
    are random.  Returns ``(unit, factors)``.
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"linear weight must be a matrix, got {w.shape}")
    check_finite(w, "linear weight")
    n, m = w.shape
    widths = [int(p) for p in widths]
    depth = len(widths) + 1
    if theta is None:
        theta = math.ceil(depth / 2)
    check_linear_widths(m, n, widths, theta)
    dims = [m, *widths, n]
    w64 = w.astype(np.float64)

    def draw(rng):
        mats = [None if i == theta else _normal(rng, dims[i], dims[i - 1])
                for i in range(1, depth + 1)]
        below = _chain(mats[:theta - 1], m)  # [p_{theta-1}, m]
        above = _chain(mats[theta:], dims[theta])  # [n, p_theta]
        mats[theta - 1] = right_inverse(above) @ w64 @ left_inverse(below)
        return mats, _cond(above) * _cond(below)

    mats, used_seed = _with_resampling(seed, draw)
    has_bias = bias is not None
    specs = [Linear(dims[i - 1], dims[i], has_bias and i == depth) for i in range(1, depth + 1)]
    factors = [(a.astype(w.dtype), None) for a in mats]
    if has_bias:
        factors[-1] = (factors[-1][0], np.array(bias, dtype=w.dtype))
    unit = ExpandedUnit(-1, "LinearChain", Linear(m, n, has_bias), specs,
                        list(range(depth)), theta - 1, used_seed, list(LINEAR_PATHWAY))
    return unit, factors


# -- contraction -------------------------------------------------------------

def contract_unit(unit, factors):
    """Multiply trained factors back into one compact layer.

    Returns ``(layer_spec, weight, bias)``; the spec keeps the original
    stride and padding.
    """
    if len(factors) != len(unit.factor_specs):
        raise ShapeError(f"unit has {len(unit.factor_specs)} factors, got {len(factors)}")
    for spec, (wt, _) in zip(unit.factor_specs, factors):
        if tuple(np.shape(wt)) != spec.weight_shape:
            raise ShapeError(f"factor weight {np.shape(wt)} does not match {spec.weight_shape}")
    dtype = np.asarray(factors[0][0]).dtype
    # biases on inner factors are pushed through the remaining linear maps
    if unit.kind == "Conv3Factor":
        orig = unit.original
        g = orig.groups
        (w1, b1), (w2, b2), (w3, b3) = factors
        w1 = np.asarray(w1, np.float64)
        w2 = np.asarray(w2, np.float64)
        w3 = np.asarray(w3, np.float64)
        n = orig.out_channels
        pg, qg, ng = w1.shape[0] // g, w2.shape[0] // g, n // g
        f = np.empty(orig.weight_shape)
        bias = np.zeros(n)
        for gi in range(g):
            a1 = w1[gi * pg:(gi + 1) * pg, :, 0, 0]
            a2 = w2[gi * qg:(gi + 1) * qg]
            a3 = w3[gi * ng:(gi + 1) * ng, :, 0, 0]
            f[gi * ng:(gi + 1) * ng] = compose_filter(a1, a2, a3)
            if b1 is not None:
                if orig.padding:
                    raise ShapeError("bias on a padded first factor cannot be contracted exactly")
                inner = a2.sum(axis=(2, 3)) @ b1[gi * pg:(gi + 1) * pg]
                bias[gi * ng:(gi + 1) * ng] += a3 @ inner
            if b2 is not None:
                bias[gi * ng:(gi + 1) * ng] += a3 @ b2[gi * qg:(gi + 1) * qg]
        if b3 is not None:
            bias += b3
        has_bias = any(b is not None for _, b in factors)
        spec = Conv2d(orig.in_channels, n, orig.kernel, orig.stride, orig.padding, g, has_bias)
        return spec, f.astype(dtype), bias.astype(dtype) if has_bias else None
    if unit.kind == "LinearChain":
        m = unit.original.in_features
        w = np.eye(m)
        bias = None
        for wt, b in factors:
            wt = np.asarray(wt, np.float64)
            w = wt @ w
            if bias is not None:
                bias = wt @ bias
            if b is not None:
                bias = (bias if bias is not None else 0.0) + np.asarray(b, np.float64)
        spec = Linear(m, unit.original.out_features, bias is not None)
        return spec, w.astype(dtype), None if bias is None else bias.astype(dtype)
    raise ValueError(f"unknown unit kind {unit.kind!r}")


# -- whole networks ----------------------------------------------------------

def expand_network(net, weights, plan):
    """Replace every conv (and, with ``plan.expand_fc``, every linear) layer
    by its over-parameterized chain.  Returns ``(net_exp, weights_exp, units)``.
    """
    layers, new_weights, units = [], {}, []
    for i, layer in enumerate(net.layers):
        seed = plan.seed ^ i
        w = weights.get(weight_key(i))
        b = weights.get(bias_key(i))
        unit = None
        if isinstance(layer, Conv2d):
            unit, factors = expand_conv(w, b, plan.rate, layer.stride, layer.padding, seed,
                                        layer.groups)
        elif isinstance(layer, Linear) and plan.expand_fc:
            widths = plan.linear_widths(layer.in_features, layer.out_features)
            unit, factors = expand_linear(w, b, widths, plan.solved_index(len(widths) + 1), seed)
        if unit is None:
            j = len(layers)
            layers.append(layer)
            if w is not None:
                new_weights[weight_key(j)] = w.copy()
            if b is not None:
                new_weights[bias_key(j)] = b.copy()
            continue
        unit.original_index = i
        unit.factor_indices = []
        for spec, (fw, fb) in zip(unit.factor_specs, factors):
            j = len(layers)
            layers.append(spec)
            unit.factor_indices.append(j)
            new_weights[weight_key(j)] = fw
            if fb is not None:
                new_weights[bias_key(j)] = fb
        units.append(unit)
    net_exp = Network(layers, net.input_shape, f"{net.name}-expanded")
    return net_exp, new_weights, units


def contract_network(net_exp, weights_exp, units, name=None):
    """Inverse of :func:`expand_network` applied to (possibly trained) factors."""
    by_start = {u.factor_indices[0]: u for u in units}
    layers, weights = [], {}
    i = 0
    while i < len(net_exp.layers):
        unit = by_start.get(i)
        j = len(layers)
        if unit is None:
            layer = net_exp.layers[i]
            layers.append(layer)
            if weight_key(i) in weights_exp:
                weights[weight_key(j)] = weights_exp[weight_key(i)].copy()
            if bias_key(i) in weights_exp:
                weights[bias_key(j)] = weights_exp[bias_key(i)].copy()
            i += 1
            continue
        if unit.factor_indices != list(range(i, i + len(unit.factor_specs))):
            raise ShapeError(f"unit for layer {unit.original_index} is not contiguous")
        for k, spec in zip(unit.factor_indices, unit.factor_specs):
            if net_exp.layers[k] != spec:
                raise ShapeError(f"layer {k} does not match recorded factor spec {spec}")
        factors = [(weights_exp[weight_key(k)], weights_exp.get(bias_key(k)))
                   for k in unit.factor_indices]
        spec, w, b = contract_unit(unit, factors)
        layers.append(spec)
        weights[weight_key(j)] = w
        if b is not None:
            weights[bias_key(j)] = b
        i += len(unit.factor_indices)
    base = name or net_exp.name.removesuffix("-expanded")
    return Network(layers, net_exp.input_shape, base), weights


def units_to_meta(units):
    return [u.to_dict() for u in units]


def units_from_meta(items):
    return [ExpandedUnit.from_dict(d) for d in items]


def output_index_map(units, n_layers):
    """For each original layer, the expanded layer that yields the same activation."""
    ends = {u.original_index: u.factor_indices[-1] for u in units}
    out, cur = [], -1
    for i in range(n_layers):
        cur = ends.get(i, cur + 1)
        out.append(cur)
    return out
