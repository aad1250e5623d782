"""Listwise ranking losses on query-candidate similarity scores.

Each loss returns ``(value, d value / d scores)`` so it can be used directly
or attached to a :class:`~gcsa.tensor.Tape` via :func:`loss_node`.
"""
from __future__ import annotations

import numpy as np

from .errors import NoPositivesError, ParameterError
from .tensor import Node, Tape

DEFAULT_BINS = 20
DEFAULT_MARGIN = 0.5


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ParameterError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    return s, y


def exact_ap(scores, labels) -> float:
    """Average precision of the ranking by descending score (ties: lower index first)."""
    s, y = _check(scores, labels)
    npos = int(y.sum())
    if npos == 0:
        raise NoPositivesError("exact_ap needs at least one positive label")
    order = np.lexsort((np.arange(s.size), -s))
    rel = y[order]
    ranks = np.flatnonzero(rel) + 1
    return float(np.mean(np.arange(1, npos + 1) / ranks))


def soft_bins(scores: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Triangular soft assignment of scores to ``bins`` centers spanning [1, -1].

    Returns ``(weights, d weights / d score, spacing)``; weights have shape
    (n, bins) and each row sums to 1 for scores inside [-1, 1].
    """
    if bins < 2:
        raise ParameterError(f"quantized AP needs at least 2 bins, got {bins}")
    delta = 2.0 / (bins - 1)
    centers = 1.0 - delta * np.arange(bins)
    x = np.clip(scores, -1.0, 1.0)[:, None]
    diff = x - centers[None, :]
    inside = np.abs(diff) < delta
    w = np.where(inside, 1.0 - np.abs(diff) / delta, 0.0)
    dw = np.where(inside, -np.sign(diff) / delta, 0.0)
    # the clip has zero slope outside [-1, 1]
    dw[(scores < -1.0) | (scores > 1.0)] = 0.0
    return w, dw, delta


def quantized_ap(scores, labels, bins: int = DEFAULT_BINS) -> tuple[float, np.ndarray]:
    """Histogram-binned average precision and its gradient w.r.t. the scores."""
    s, y = _check(scores, labels)
    npos = float(y.sum())
    if npos == 0:
        raise NoPositivesError("quantized AP needs at least one positive label")
    w, dw, _ = soft_bins(s, bins)
    yf = y.astype(np.float64)
    h = w.sum(axis=0)
    hp = yf @ w
    c = np.cumsum(hp)
    t = np.cumsum(h)
    nz = t > 1e-12
    inv_t = np.where(nz, 1.0 / np.where(nz, t, 1.0), 0.0)
    prec = c * inv_t
    ap = float(prec @ hp) / npos

    rev = lambda a: np.cumsum(a[::-1])[::-1]  # noqa: E731 - suffix sums
    g_hp = (prec + rev(hp * inv_t)) / npos
    g_h = -rev(c * hp * inv_t * inv_t) / npos
    grad = dw @ g_h + yf * (dw @ g_hp)
    return ap, grad


def quantized_ap_loss(scores, labels, bins: int = DEFAULT_BINS) -> tuple[float, np.ndarray]:
    ap, grad = quantized_ap(scores, labels, bins)
    return 1.0 - ap, -grad


def contrastive_loss(scores, labels, margin: float = DEFAULT_MARGIN) -> tuple[float, np.ndarray]:
    """Sum of ``1 - s`` over positives and ``max(0, s - margin)`` over negatives."""
    s, y = _check(scores, labels)
    over = (~y) & (s > margin)
    loss = float(np.sum(1.0 - s[y]) + np.sum(s[over] - margin))
    grad = np.where(y, -1.0, np.where(over, 1.0, 0.0))
    return loss, grad


def loss_node(tape: Tape, scores: Node, labels, kind: str = "qap",
              bins: int = DEFAULT_BINS, margin: float = DEFAULT_MARGIN) -> Node:
    """Attach a ranking loss to ``tape``; returns a (1, 1) node."""
    shape, dtype = scores.value.shape, scores.value.dtype
    if kind == "qap":
        value, grad = quantized_ap_loss(scores.value, labels, bins)
    elif kind == "contrastive":
        value, grad = contrastive_loss(scores.value, labels, margin)
    else:
        raise ParameterError(f"unknown loss kind {kind!r}")
    grad = grad.reshape(shape).astype(dtype)
    return tape.custom(np.array([[value]], dtype=dtype), (scores,),
                       lambda g: (g.item() * grad,))
