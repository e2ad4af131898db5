"""Similarity-preserving distillation: batch Gram matrices and their loss.

For a batch of activations reshaped to ``Q[b, d]`` the similarity matrix is
``Q @ Q.T`` with every row scaled to unit L2 norm.  The loss between teacher
and student is ``sum_pairs ||G_T - G_S||_F^2 / b^2``; because ``G`` is
``b x b`` the two networks may have different channel counts.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

DEFAULT_GAMMA = 3000.0


@dataclass
class DistillConfig:
    pairs: list  # (teacher layer index, student layer index)
    gamma: float = DEFAULT_GAMMA
    teacher: tuple = field(default=None, repr=False)  # (Network, weights), frozen

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        self.pairs = [(int(t), int(s)) for t, s in self.pairs]


@dataclass
class SimilarityMatrix:
    g: np.ndarray
    source: str = ""
    layer: int = -1
    raw: np.ndarray = field(default=None, repr=False)  # Q @ Q.T before normalisation
    norms: np.ndarray = field(default=None, repr=False)


def similarity_matrix(a, source="", layer=-1):
    """Row-normalised batch Gram matrix of activations ``a[b, ...]``.

    All-zero rows stay all-zero instead of becoming NaN.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[0] < 1:
        raise ShapeError(f"expected a batch of activations, got shape {a.shape}")
    q = a.reshape(a.shape[0], -1)
    raw = q @ q.T
    norms = np.linalg.norm(raw, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return SimilarityMatrix(raw / safe[:, None], source, layer, raw, norms)


def _pairs_batch(teacher_acts, student_acts, pairs):
    b = None
    for t, s in pairs:
        bt, bs = np.shape(teacher_acts[t])[0], np.shape(student_acts[s])[0]
        if bt != bs or (b is not None and bt != b):
            raise ShapeError(f"batch size mismatch between teacher layer {t} ({bt}) "
                             f"and student layer {s} ({bs})")
        b = bt
    return b


def gram_distance(g_t, g_s):
    """``||G_T - G_S||_F^2 / b^2`` for two ``b x b`` similarity matrices."""
    g_t, g_s = np.asarray(g_t), np.asarray(g_s)
    if g_t.shape != g_s.shape or g_t.ndim != 2:
        raise ShapeError(f"similarity matrices differ in shape: {g_t.shape} vs {g_s.shape}")
    return float(np.sum((g_t - g_s) ** 2)) / g_t.shape[0] ** 2


def sp_loss(teacher_acts, student_acts, pairs):
    """Similarity-preserving loss summed over ``pairs``."""
    b = _pairs_batch(teacher_acts, student_acts, pairs)
    if b is None:
        return 0.0
    return sum(gram_distance(similarity_matrix(teacher_acts[t]).g,
                             similarity_matrix(student_acts[s]).g) for t, s in pairs)


def sp_loss_grad(teacher_acts, student_acts, pairs, gamma=1.0):
    """Gradient of ``gamma * sp_loss`` w.r.t. the paired student activations.

    Returns ``{student layer index: gradient array}`` (same shapes as the
    activations).  Zero-norm Gram rows are treated as constants.
    """
    b = _pairs_batch(teacher_acts, student_acts, pairs)
    grads = {}
    if b is None:
        return grads
    for t, s in pairs:
        a = np.asarray(student_acts[s])
        gt = similarity_matrix(teacher_acts[t]).g
        sm = similarity_matrix(a)
        dg = (2.0 * gamma / b**2) * (sm.g - gt)
        # back through row normalisation g = v / |v|
        live = sm.norms > 0
        safe = np.where(live, sm.norms, 1.0)
        dot = np.sum(sm.g * dg, axis=1, keepdims=True)
        draw = np.where(live[:, None], (dg - sm.g * dot) / safe[:, None], 0.0)
        # back through Q Q^T
        q = a.reshape(a.shape[0], -1).astype(np.float64)
        dq = (draw + draw.T) @ q
        grad = dq.reshape(a.shape).astype(a.dtype)
        grads[s] = grads[s] + grad if s in grads else grad
    return grads


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [b, classes], got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    lp = log_softmax(logits)
    loss = -float(lp[np.arange(b), labels].mean())
    grad = np.exp(lp)
    grad[np.arange(b), labels] -= 1.0
    return loss, (grad / b).astype(logits.dtype)


def total_loss(logits, labels, teacher_acts=None, student_acts=None, cfg=None):
    """Cross-entropy plus ``gamma`` times the similarity-preserving loss.

    Returns ``(total, {"task": ..., "sp": ..., "total": ...})``.
    """
    task, _ = cross_entropy(logits, labels)
    sp = 0.0
    gamma = 0.0
    if cfg is not None and cfg.pairs and teacher_acts is not None:
        sp = sp_loss(teacher_acts, student_acts, cfg.pairs)
        gamma = cfg.gamma
    total = task + gamma * sp
    return total, {"task": task, "sp": sp, "total": total}
