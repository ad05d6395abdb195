"""Dense tensors with reverse-mode differentiation and an AdamW/SGD optimizer.

The graph is recorded implicitly: every op links its output to its parents
together with a closure that routes the output gradient backwards.  Calling
``backward`` on a scalar seeds the gradient and walks the graph in reverse
topological order.  Gradients accumulate across repeated backward calls;
``optimizer_step`` clears them after applying the update.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    DegenerateBatchError,
    NumericError,
    ShapeMismatchError,
    VocabularyError,
)

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors are created with ('float32' or 'float64')."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dtype!r}")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_coerce(other), _const(-1.0)))

    def __rsub__(self, other):
        return add(_coerce(other), mul(self, _const(-1.0)))

    def __neg__(self):
        return mul(self, _const(-1.0))

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, _const(1.0 / other))
        raise TypeError("tensor division only supports python scalars")

    def __matmul__(self, other):
        return matmul(self, _coerce(other))


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor that receives gradients."""
    return Tensor(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=True)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _const(x: float) -> Tensor:
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy ``@`` semantics (2-D or equal batch dims)."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul requires tensors of rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(
            f"inner extents differ: {a.data.shape} @ {b.data.shape}"
        )
    if a.ndim != b.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeMismatchError(
            f"batch extents differ: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bwd(g):
        _accumulate(a, g @ b.data.swapaxes(-1, -2))
        _accumulate(b, a.data.swapaxes(-1, -2) @ g)

    return _make(out_data, (a, b), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _coerce(a)
    perm = tuple(axes) if axes is not None else tuple(range(a.ndim))[::-1]
    inv = np.argsort(perm)

    def bwd(g):
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(perm), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = _coerce(a)

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows along the first axis; backward scatter-adds."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise VocabularyError(
            f"row index out of range: max {int(idx.max())} vs {a.data.shape[0]} rows"
        )

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accumulate(a, ga)

    return _make(a.data[idx], (a,), bwd)


def replace_rows(a: Tensor, idx, values: np.ndarray) -> Tensor:
    """Overwrite rows with constants; replaced rows receive no gradient."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = a.data.copy()
    out_data[idx] = np.asarray(values, dtype=a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            ga = g.copy()
            ga[idx] = 0.0
            _accumulate(a, ga)

    return _make(out_data, (a,), bwd)


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Trailing-axis softmax of x / temperature, max-subtracted for stability."""
    x = _coerce(x)
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    y = softmax_array(x.data, temperature=temperature)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(x, y * (g - inner) / temperature)

    return _make(y, (x,), bwd)


def softmax_array(x: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Plain-numpy stable softmax (no tape); shared by the inference path."""
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = gamma.data * xhat + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        _accumulate(beta, g.sum(axis=lead))
        if x.requires_grad:
            gg = g * gamma.data
            gx = inv * (
                gg
                - gg.mean(axis=-1, keepdims=True)
                - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(x, gx)

    return _make(out_data, (x, gamma, beta), bwd)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    x = _coerce(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du))

    return _make(out_data, (x,), bwd)


def tensor_sum(a: Tensor) -> Tensor:
    a = _coerce(a)

    def bwd(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(np.asarray(a.data.sum()), (a,), bwd)


def tensor_mean(a: Tensor) -> Tensor:
    a = _coerce(a)
    n = a.data.size

    def bwd(g):
        _accumulate(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _make(np.asarray(a.data.mean()), (a,), bwd)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean negative log-likelihood over rows of ``logits``.

    ``targets`` are integer class ids, one per row; ``weights`` default to
    ones.  Rows with zero weight contribute nothing; an all-zero weight
    vector is a degenerate batch.
    """
    logits = _coerce(logits)
    if logits.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy expects n x V logits, got {logits.shape}")
    n, v = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeMismatchError(f"targets shape {targets.shape} does not match {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise VocabularyError(f"target id out of range for vocab of {v}")
    w = np.ones(n, dtype=np.float64) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeMismatchError(f"weights shape {w.shape} does not match {n} rows")
    if (w < 0).any():
        raise ContractError("cross_entropy weights must be nonnegative")
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateBatchError("all cross_entropy weights are zero")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(n), targets]
    out_data = np.asarray((w * nll).sum() / wsum)

    def bwd(g):
        if logits.requires_grad:
            probs = np.exp(z - lse[:, None])
            probs[np.arange(n), targets] -= 1.0
            _accumulate(logits, g * probs * (w / wsum)[:, None])

    return _make(out_data, (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with d(loss)/d(tensor).

    ``loss`` must be a scalar.  Repeated calls without clearing accumulate.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Bookkeeping for in-place parameter updates.

    ``rule`` is "adamw" (default) or "sgd".  AdamW uses decoupled weight
    decay; SGD is the plain first-order update.  lr may be zero (frozen
    training) but never negative.
    """

    lr: float = 3e-4
    rule: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    moments: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError(f"learning rate must be nonnegative, got {self.lr}")
        if self.rule not in ("adamw", "sgd"):
            raise ContractError(f"unknown optimizer rule {self.rule!r}")


def optimizer_step(params, state: OptimizerState) -> None:
    """Apply one update to every parameter in place, then zero their grads."""
    state.step_count += 1
    t = state.step_count
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {i}")
        if state.rule == "sgd":
            p.data -= state.lr * g
        else:
            if i not in state.moments:
                state.moments[i] = (np.zeros_like(p.data), np.zeros_like(p.data))
            m, v = state.moments[i]
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * g * g
            mhat = m / (1 - state.beta1**t)
            vhat = v / (1 - state.beta2**t)
            p.data -= state.lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p.data)
        p.grad = None
