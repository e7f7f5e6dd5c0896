"""Dense float32 tensors with reverse-mode gradients.

Define-by-run: every operation computes its value immediately and records
its parents, so the implicit graph is rebuilt per batch and is topologically
ordered by construction. ``Tensor.backward`` walks it in reverse and
accumulates gradients into every node that requires them.

The op vocabulary is deliberately small: matmul, broadcasting add/sub/mul,
relu, tanh, exp, log, sigmoid, sum, mean, and L2 norm. Everything else
(cosine distance, softmax, dropout masks, reciprocals of positive values)
is composed from these.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf; training treats this as fatal."""


class GradientError(ValueError):
    """Backward was invoked on an unsupported output or malformed graph."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.astype(np.float32, copy=False)


class Tensor:
    """A float32 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str = "",
        _parents: tuple = (),
        _backward_fn: Callable[[np.ndarray], None] | None = None,
        _op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float32)
        _check_finite(arr, _op if _op != "leaf" else name or "leaf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._op = _op

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def param(data, name: str) -> "Tensor":
        return Tensor(data, requires_grad=True, name=name)

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise GradientError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no graph history; blocks gradient flow."""
        return Tensor(self.data.copy(), _op="detach")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- graph plumbing --------------------------------------------------------

    def _accumulate(self, piece: np.ndarray) -> None:
        piece = piece.astype(np.float32, copy=False)
        self.grad = piece if self.grad is None else self.grad + piece

    @staticmethod
    def _make(data, parents: tuple, backward_fn, op: str) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        return Tensor(
            data,
            requires_grad=needs,
            _parents=parents if needs else (),
            _backward_fn=backward_fn if needs else None,
            _op=op,
        )

    def backward(self, output_grad=None) -> None:
        """Run reverse mode from this node.

        Overwrites .grad on every reachable node that requires a gradient;
        call once per freshly built graph.
        """
        if not self.requires_grad:
            raise GradientError("output does not depend on any gradient-enabled tensor")
        if output_grad is None:
            if self.data.size != 1:
                raise GradientError("backward() on a non-scalar output needs an explicit output_grad")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(output_grad, dtype=np.float32)
            if seed.shape != self.data.shape:
                raise GradientError(f"output_grad shape {seed.shape} != output shape {self.data.shape}")

        # Iterative topological order over the requires_grad subgraph.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        for node in topo:
            node.grad = None
        self.grad = seed
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- arithmetic ops ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        out_data = self.data + other.data
        _check_finite(out_data, "add")

        def backward_fn(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._make(out_data, (self, other), backward_fn, "add")

    def __radd__(self, other) -> "Tensor":
        return Tensor._wrap(other) + self

    def __sub__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        out_data = self.data - other.data
        _check_finite(out_data, "sub")

        def backward_fn(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.data.shape))

        return Tensor._make(out_data, (self, other), backward_fn, "sub")

    def __rsub__(self, other) -> "Tensor":
        return Tensor._wrap(other) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        out_data = self.data * other.data
        _check_finite(out_data, "mul")

        def backward_fn(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(out_data, (self, other), backward_fn, "mul")

    def __rmul__(self, other) -> "Tensor":
        return Tensor._wrap(other) * self

    def __neg__(self) -> "Tensor":
        return self * Tensor(-1.0)

    def __matmul__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise GradientError(
                f"matmul expects 2-D operands, got {self.data.shape} @ {other.data.shape}"
            )
        if self.data.shape[1] != other.data.shape[0]:
            raise GradientError(
                f"matmul shape mismatch: {self.data.shape} @ {other.data.shape}"
            )
        out_data = self.data @ other.data
        _check_finite(out_data, "matmul")

        def backward_fn(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor._make(out_data, (self, other), backward_fn, "matmul")

    # -- elementwise nonlinearities ----------------------------------------------

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0.0)

        def backward_fn(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g * (self.data > 0.0))

        return Tensor._make(out_data, (self,), backward_fn, "relu")

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def backward_fn(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._make(out_data, (self,), backward_fn, "tanh")

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        _check_finite(out_data, "exp")

        def backward_fn(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g * out_data)

        return Tensor._make(out_data, (self,), backward_fn, "exp")

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise NonFiniteError("log of a non-positive value")
        out_data = np.log(self.data)

        def backward_fn(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g / self.data)

        return Tensor._make(out_data, (self,), backward_fn, "log")

    def sigmoid(self) -> "Tensor":
        x = self.data
        out_data = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        out_data = out_data.astype(np.float32)

        def backward_fn(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (self,), backward_fn, "sigmoid")

    # -- reductions ----------------------------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        out_data = self.data.sum(axis=axis)
        _check_finite(np.asarray(out_data), "sum")
        in_shape = self.data.shape

        def backward_fn(g: np.ndarray) -> None:
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, in_shape).astype(np.float32))
            else:
                self._accumulate(np.broadcast_to(np.expand_dims(g, axis), in_shape).astype(np.float32))

        return Tensor._make(out_data, (self,), backward_fn, "sum")

    def mean(self, axis: int | None = None) -> "Tensor":
        if self.data.size == 0:
            raise GradientError("mean of an empty tensor")
        count = self.data.size if axis is None else self.data.shape[axis]
        out_data = self.data.mean(axis=axis)
        _check_finite(np.asarray(out_data), "mean")
        in_shape = self.data.shape
        inv = np.float32(1.0 / count)

        def backward_fn(g: np.ndarray) -> None:
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g * inv, in_shape).astype(np.float32))
            else:
                self._accumulate(
                    np.broadcast_to(np.expand_dims(g * inv, axis), in_shape).astype(np.float32)
                )

        return Tensor._make(out_data, (self,), backward_fn, "mean")

    def l2norm(self, axis: int | None = None) -> "Tensor":
        out_data = np.sqrt((self.data.astype(np.float32) ** 2).sum(axis=axis)).astype(np.float32)
        in_shape = self.data.shape

        def backward_fn(g: np.ndarray) -> None:
            if not self.requires_grad:
                return
            if np.any(out_data == 0.0):
                raise NonFiniteError("gradient of l2norm at the zero vector")
            if axis is None:
                self._accumulate((g / out_data) * self.data)
            else:
                scale = np.expand_dims(g / out_data, axis)
                self._accumulate(np.broadcast_to(scale, in_shape) * self.data)

        return Tensor._make(out_data, (self,), backward_fn, "l2norm")


def reciprocal_pos(x: Tensor) -> Tensor:
    """1/x for strictly positive x, composed as exp(-log(x))."""
    return (-(x.log())).exp()


def apply_dropout(x: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout: zero entries with probability `rate`, scale the rest.

    The mask is drawn row-major from `rng`, one uniform per entry, so the
    stream position after the call depends only on x.size.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = 1.0 - rate
    flat = np.empty(x.data.size, dtype=np.float32)
    for i in range(x.data.size):
        flat[i] = (1.0 / keep) if rng.uniform() >= rate else 0.0
    mask = Tensor(flat.reshape(x.data.shape))
    return x * mask


def finite_difference_grad(
    loss_fn: Callable[[], float],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-3,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of loss_fn w.r.t. every scalar in params.

    Perturbs each float32 entry in place and divides by the actually
    realized step, which keeps the estimate honest at 32-bit precision.
    Independent of the reverse-mode path; used as its oracle.
    """
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    grads: dict[str, np.ndarray] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        for k in range(flat.size):
            orig = flat[k].copy()
            flat[k] = orig + np.float32(epsilon)
            hi_val = float(flat[k])
            f_hi = loss_fn()
            flat[k] = orig - np.float32(epsilon)
            lo_val = float(flat[k])
            f_lo = loss_fn()
            flat[k] = orig
            g[k] = (f_hi - f_lo) / (hi_val - lo_val)
        grads[name] = g.reshape(p.data.shape)
    return grads
