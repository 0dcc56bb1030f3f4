"""Dense float64 tensors with taped reverse-mode gradients.

Tensors are immutable values wrapping numpy arrays. Gradients are recorded
on an explicit :class:`Tape`: watch the parameters, run the forward pass,
then call :func:`backward` once. Ops record a node only when an input sits
on a live tape, so the identical code path serves training and inference.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError, ShapeError

# negative round-off this small is absorbed by sqrt instead of raising
_SQRT_SLACK = 1e-9


class Tensor:
    """A dense float64 array, optionally attached to a Tape."""

    __slots__ = ("data", "tape")

    def __init__(self, data, tape=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise DomainError("tensor contains non-finite values")
        self.data = arr
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive ops for one reverse sweep.

    Single-owner: never share a tape across threads, and call
    :func:`backward` at most once. Nodes are appended in execution order,
    which is already topological.
    """

    def __init__(self):
        self._nodes = []  # (out, inputs, vjp) in execution order
        self._watched = []
        self._consumed = False

    def watch(self, *tensors: Tensor):
        """Mark parameters whose gradients :func:`backward` should return."""
        if self._consumed:
            raise ContractError("tape already consumed")
        for t in tensors:
            if t.tape is not None and t.tape is not self and not t.tape._consumed:
                raise ContractError("tensor is already watched on another live tape")
            if t.tape is not self:
                t.tape = self
                self._watched.append(t)

    def _record(self, out, inputs, vjp):
        self._nodes.append((out, inputs, vjp))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _live_tape(*tensors):
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None and not t.tape._consumed:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractError("inputs come from two different live tapes")
    return tape


def _result(value, inputs, vjp):
    tape = _live_tape(*inputs)
    out = Tensor(value, tape=tape)
    if tape is not None:
        tape._record(out, inputs, vjp)
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), vjp)


def add(a, b) -> Tensor:
    """Elementwise sum. Accepts equal shapes, matrix + row vector (bias),
    or tensor + python scalar (constant offset)."""
    a = _wrap(a)
    if isinstance(b, (int, float)):

        def vjp_scalar(g):
            return (g,)

        return _result(a.data + float(b), (a,), vjp_scalar)
    b = _wrap(b)
    if a.shape == b.shape:

        def vjp_same(g):
            return g, g

        return _result(a.data + b.data, (a, b), vjp_same)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:

        def vjp_bias(g):
            return g, g.sum(axis=0)

        return _result(a.data + b.data, (a, b), vjp_bias)
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")


def mul(a, b) -> Tensor:
    """Hadamard product of equal-shaped tensors."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def vjp(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    return add(a, scale(_wrap(b), -1.0))


def scale(x, c: float) -> Tensor:
    x = _wrap(x)
    c = float(c)

    def vjp(g):
        return (c * g,)

    return _result(c * x.data, (x,), vjp)


def relu(x) -> Tensor:
    x = _wrap(x)

    def vjp(g):
        return (g * (x.data > 0.0),)

    return _result(np.maximum(x.data, 0.0), (x,), vjp)


def sqrt(x) -> Tensor:
    """Elementwise square root; negative round-off above -1e-9 clamps to 0."""
    x = _wrap(x)
    lo = x.data.min() if x.data.size else 0.0
    if lo < -_SQRT_SLACK:
        raise DomainError(f"sqrt of negative value {lo}")
    y = np.sqrt(np.maximum(x.data, 0.0))

    def vjp(g):
        # subgradient 0 at the clamp point
        with np.errstate(divide="ignore", invalid="ignore"):
            out = g / (2.0 * y)
        return (np.where(y > 0.0, out, 0.0),)

    return _result(y, (x,), vjp)


def log(x) -> Tensor:
    x = _wrap(x)
    if x.data.size and x.data.min() <= 0.0:
        raise DomainError(f"log of non-positive value {x.data.min()}")

    def vjp(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), vjp)


def sum_all(x) -> Tensor:
    x = _wrap(x)

    def vjp(g):
        return (np.full(x.shape, float(g)),)

    return _result(x.data.sum(), (x,), vjp)


def mean_all(x) -> Tensor:
    x = _wrap(x)
    n = max(x.size, 1)

    def vjp(g):
        return (np.full(x.shape, float(g) / n),)

    return _result(x.data.mean() if x.size else 0.0, (x,), vjp)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (x,), vjp)


def pairwise_sqdist(a, b) -> Tensor:
    """Matrix of squared Euclidean distances: out[i, j] = ||a_i - b_j||^2.

    Computed via the inner-product expansion and clipped at 0 to absorb
    negative round-off.
    """
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sqdist: shapes {a.shape} and {b.shape} do not conform")
    aa = (a.data * a.data).sum(axis=1)[:, None]
    bb = (b.data * b.data).sum(axis=1)[None, :]
    d = np.maximum(aa + bb - 2.0 * (a.data @ b.data.T), 0.0)

    def vjp(g):
        ga = 2.0 * (a.data * g.sum(axis=1)[:, None] - g @ b.data)
        gb = 2.0 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data)
        return ga, gb

    return _result(d, (a, b), vjp)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "pairwise_sqdist": pairwise_sqdist,
    "sqrt": sqrt,
    "scale": scale,
    "softmax_rows": softmax_rows,
    "log": log,
    "sum": sum_all,
    "mean": mean_all,
}


def forward_primitive(op: str, *inputs) -> Tensor:
    """Dispatch a primitive by name; see ``_PRIMITIVES`` for the vocabulary."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}") from None
    return fn(*inputs)


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Reverse sweep over the tape; returns d(loss)/d(p) per watched parameter.

    Consumes the tape: watched tensors are detached and the tape cannot be
    reused. Parameters unreachable from the loss get zero gradients; an
    empty watch list yields an empty map.
    """
    if tape._consumed:
        raise ContractError("tape already consumed")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi
    result = {}
    for p in tape._watched:
        g = grads.get(id(p))
        result[p] = Tensor(np.zeros_like(p.data) if g is None else g)
        p.tape = None
    tape._nodes.clear()
    tape._consumed = True
    return result


def grad_check(f, params: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between taped gradients of ``f()`` and central
    finite differences over every coordinate of ``params``.

    ``f`` must be a deterministic scalar-producing function of the current
    parameter values. Relative error is |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    tape = Tape()
    tape.watch(*params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise DomainError("f evaluated to a non-finite value")
    grads = backward(tape, loss)
    worst = 0.0
    for p in params:
        analytic = grads[p].data.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
