"""Dense kernels with a small reverse-mode tape.

Everything differentiable in the model is built from the ops on :class:`Tape`.
Values are plain 2-D numpy arrays (row-major, one row per graph node); the
dtype of the inputs is preserved so the same code runs at 32-bit for
training and 64-bit for gradient checking.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import DegenerateNormError, NonFiniteError, ParameterError, ShapeError

EPS_NORM = 1e-12
EPS_LN = 1e-5
_INV_SQRT_2PI = 0.3989422804014327


# ---------------------------------------------------------------------------
# plain numpy kernels
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def l2_normalize(v: np.ndarray, eps: float = EPS_NORM) -> tuple[np.ndarray, bool]:
    """Scale ``v`` to unit Euclidean norm.

    Returns ``(unit_vector, degenerate)``. A vector whose norm is at most
    ``eps`` maps to zeros with ``degenerate=True``.
    """
    v = np.asarray(v)
    n = float(np.linalg.norm(v))
    if n <= eps:
        return np.zeros_like(v), True
    return v / n, False


def l2_normalize_rows(x: np.ndarray, eps: float = EPS_NORM) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(n > eps, n, 1.0)
    return np.where(n > eps, x / safe, 0.0).astype(x.dtype, copy=False)


def cosine_sim(u: np.ndarray, v: np.ndarray, eps: float = EPS_NORM) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_sim shape mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu <= eps or nv <= eps:
        raise DegenerateNormError(f"cosine_sim on near-zero vector (norms {nu:.3g}, {nv:.3g})")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def softmax_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("softmax_rows received non-finite input")
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(v: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = EPS_LN) -> np.ndarray:
    """Normalize along the last axis, then apply ``gain`` and ``bias``."""
    v = np.asarray(v)
    n = v.shape[-1]
    if n < 2 or np.shape(gain) != (n,) or np.shape(bias) != (n,):
        raise ShapeError(
            f"layer_norm length mismatch: v {v.shape}, gain {np.shape(gain)}, bias {np.shape(bias)}"
        )
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    return gain * (v - mu) / np.sqrt(var + eps) + bias


def gelu(v: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    v = np.asarray(v)
    return v * ndtr(v)


def _gelu_grad(v: np.ndarray) -> np.ndarray:
    return ndtr(v) + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)


def dropout_mask(length: int, p: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``p``, else ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(length, dtype=dtype)
    keep = rng.random(length) >= p
    return (keep / (1.0 - p)).astype(dtype)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class Node:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, name: str | None = None):
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"<Node{tag} shape={self.value.shape} grad={self.requires_grad}>"


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Records primitive ops and replays them in reverse for gradients.

    Gradients accumulate additively into ``Node.grad`` (zero-initialized on
    first write). A tape is single-use and not thread-safe; use one tape per
    forward pass.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Node, tuple[Node, ...], Backward]] = []

    def __len__(self) -> int:
        return len(self._records)

    # -- leaves ------------------------------------------------------------
    def param(self, value: np.ndarray, name: str | None = None) -> Node:
        return Node(np.asarray(value), requires_grad=True, name=name)

    def const(self, value: np.ndarray) -> Node:
        return Node(np.asarray(value), requires_grad=False)

    def _emit(self, value: np.ndarray, parents: tuple[Node, ...], backward: Backward) -> Node:
        out = Node(value, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            self._records.append((out, parents, backward))
        return out

    def custom(self, value: np.ndarray, parents: Sequence[Node], backward: Backward) -> Node:
        """Register an op whose forward was computed by the caller."""
        return self._emit(value, tuple(parents), backward)

    # -- backward ----------------------------------------------------------
    def backward(self, out: Node, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if out.value.size != 1:
                raise ShapeError(f"backward needs a scalar output or an explicit seed, got {out.shape}")
            seed = np.ones_like(out.value)
        out.grad = seed if out.grad is None else out.grad + seed
        for node, parents, fn in reversed(self._records):
            if node.grad is None:
                continue
            grads = fn(node.grad)
            for parent, g in zip(parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.value.dtype, copy=True)
                else:
                    parent.grad += g

    # -- linear algebra ----------------------------------------------------
    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        value = matmul(av, bv)
        return self._emit(value, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def matmul_t(self, a: Node, b: Node) -> Node:
        """``a @ b.T``; the natural form for ``x @ W.T`` and Gram matrices."""
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
            raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}^T")
        return self._emit(av @ bv.T, (a, b), lambda g: (g @ bv, g.T @ av))

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise sum; ``b`` may be a bias row broadcast over rows of ``a``."""
        av, bv = a.value, b.value
        if bv.shape == av.shape:
            return self._emit(av + bv, (a, b), lambda g: (g, g))
        if bv.ndim == 1 and av.ndim == 2 and bv.shape[0] == av.shape[1]:
            return self._emit(av + bv, (a, b), lambda g: (g, g.sum(axis=0)))
        raise ShapeError(f"add shape mismatch: {av.shape} + {bv.shape}")

    def scale(self, a: Node, c: float) -> Node:
        return self._emit(a.value * c, (a,), lambda g: (g * c,))

    def mul_const(self, a: Node, mask: np.ndarray) -> Node:
        """Elementwise product with a non-differentiable array (dropout masks)."""
        m = np.asarray(mask, dtype=a.value.dtype)
        return self._emit(a.value * m, (a,), lambda g: (g * m,))

    def sum(self, a: Node) -> Node:
        shape, dtype = a.value.shape, a.value.dtype
        return self._emit(np.asarray(a.value.sum(), dtype=dtype).reshape(1, 1), (a,),
                          lambda g: (np.full(shape, g.item(), dtype=dtype),))

    def dot_rows(self, a: Node, v: Node) -> Node:
        """Row-wise dot of ``a`` (n, d) with a single row ``v`` (1, d) -> (n, 1)."""
        av, vv = a.value, v.value
        if vv.shape != (1, av.shape[1]):
            raise ShapeError(f"dot_rows shape mismatch: {av.shape} . {vv.shape}")
        value = av @ vv[0]
        return self._emit(value[:, None], (a, v),
                          lambda g: (g * vv, (g * av).sum(axis=0, keepdims=True)))

    # -- indexing ----------------------------------------------------------
    def rows(self, a: Node, index) -> Node:
        av = a.value
        value = av[index]
        if value.ndim == 1:
            value = value[None, :]

        def back(g):
            out = np.zeros_like(av)
            np.add.at(out, index, g.reshape(out[index].shape))
            return (out,)

        return self._emit(value, (a,), back)

    def cols(self, a: Node, start: int, stop: int) -> Node:
        av = a.value

        def back(g):
            out = np.zeros_like(av)
            out[:, start:stop] = g
            return (out,)

        return self._emit(av[:, start:stop], (a,), back)

    def concat_cols(self, parts: Sequence[Node]) -> Node:
        widths = [p.value.shape[1] for p in parts]
        nrows = {p.value.shape[0] for p in parts}
        if len(nrows) != 1:
            raise ShapeError(f"concat_cols row mismatch: {[p.value.shape for p in parts]}")
        value = np.concatenate([p.value for p in parts], axis=1)
        bounds = np.cumsum([0] + widths)

        def back(g):
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

        return self._emit(value, tuple(parts), back)

    # -- nonlinearities ----------------------------------------------------
    def softmax_rows(self, a: Node) -> Node:
        y = softmax_rows(a.value)
        return self._emit(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))

    def layer_norm_rows(self, x: Node, gain: Node, bias: Node, eps: float = EPS_LN) -> Node:
        xv = x.value
        n = xv.shape[-1]
        if gain.value.shape != (n,) or bias.value.shape != (n,):
            raise ShapeError(f"layer_norm length mismatch: {xv.shape}, {gain.value.shape}, {bias.value.shape}")
        mu = xv.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(xv.var(axis=-1, keepdims=True) + eps)
        xhat = (xv - mu) * inv
        gv = gain.value

        def back(g):
            dxhat = g * gv
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

        return self._emit(gv * xhat + bias.value, (x, gain, bias), back)

    def gelu(self, a: Node) -> Node:
        av = a.value
        return self._emit(gelu(av), (a,), lambda g: (g * _gelu_grad(av),))

    def l2_normalize_rows(self, a: Node, eps: float = EPS_NORM) -> Node:
        av = a.value
        n = np.linalg.norm(av, axis=-1, keepdims=True)
        ok = n > eps
        inv = np.where(ok, 1.0 / np.where(ok, n, 1.0), 0.0).astype(av.dtype)
        y = av * inv

        def back(g):
            return ((g - y * (g * y).sum(axis=-1, keepdims=True)) * inv,)

        return self._emit(y, (a,), back)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    """Per-parameter max relative error between analytic and numeric gradients.

    The relative error of a parameter is ``max|analytic - numeric|`` over its
    probed coordinates divided by ``max|numeric|`` for that parameter. The
    divisor is floored at ``floor_ratio`` times the largest numeric gradient
    of any parameter (and at 1e-12), so parameters whose true gradient is
    zero, such as attention key biases, are compared on the global scale.
    """

    errors: dict[str, float] = field(default_factory=dict)
    loss: float = float("nan")
    probes: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_error < tol


ClosureFn = Callable[[Tape, dict[str, Node]], Node]


def _evaluate(fn: ClosureFn, params: dict[str, np.ndarray]) -> float:
    tape = Tape()
    out = fn(tape, {k: tape.const(v) for k, v in params.items()})
    return float(np.asarray(out.value).reshape(-1)[0])


def gradcheck(
    fn: ClosureFn,
    params: dict[str, np.ndarray],
    seed: int = 0,
    step: float = 1e-6,
    max_probes: int | None = 64,
    fd_dtype=np.float64,
    floor_ratio: float = 1e-3,
) -> GradcheckReport:
    """Compare tape gradients of ``fn`` against central finite differences.

    ``fn(tape, nodes)`` must build a scalar on ``tape`` from the parameter
    nodes. Analytic gradients are taken at the dtype of ``params``; the
    finite-difference reference is evaluated with the parameters cast to
    ``fd_dtype``. At most ``max_probes`` coordinates per parameter are
    probed, chosen with ``seed``.
    """
    tape = Tape()
    nodes = {k: tape.param(v, name=k) for k, v in params.items()}
    out = fn(tape, nodes)
    loss = float(np.asarray(out.value).reshape(-1)[0])
    if not np.isfinite(loss):
        raise NonFiniteError(f"gradcheck closure returned non-finite loss {loss}")
    tape.backward(out)

    rng = np.random.default_rng(seed)
    # C order so that reshape(-1) below is a view that writes through
    ref = {k: np.array(v, dtype=fd_dtype, order="C", copy=True) for k, v in params.items()}
    report = GradcheckReport(loss=loss)
    diffs: dict[str, tuple[float, float]] = {}
    for name, value in ref.items():
        analytic = nodes[name].grad
        if analytic is None:
            analytic = np.zeros_like(value)
        flat = value.reshape(-1)
        if max_probes is None or flat.size <= max_probes:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = _evaluate(fn, ref)
            flat[i] = orig - step
            down = _evaluate(fn, ref)
            flat[i] = orig
            numeric[n] = (up - down) / (2.0 * step)
        if not np.all(np.isfinite(numeric)):
            raise NonFiniteError(f"non-finite finite-difference gradient for {name}")
        a = np.asarray(analytic, dtype=np.float64).reshape(-1)[idx]
        diffs[name] = (float(np.abs(a - numeric).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
        report.probes += idx.size
    floor = max(floor_ratio * max((m for _, m in diffs.values()), default=0.0), 1e-12)
    for name, (diff, scale) in diffs.items():
        report.errors[name] = diff / max(scale, floor)
    return report
