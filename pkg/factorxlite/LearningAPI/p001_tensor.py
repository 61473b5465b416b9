######################################################################################################
# FactorXLite - A factorization-centralization toolkit for rehearsal-free continual learning
# Copyright (C) 2025 FactorXLite contributors
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE. See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program. If not, see <https://www.gnu.org/licenses/>.
######################################################################################################


import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .p000_utility import ContractError, DimensionError


DEFAULT_DTYPE = np.float32
_GELU_C = math.sqrt(2.0 / math.pi)

# Gradient recording switch, flipped by no_grad()
_GRAD_STATE = {"enabled": True}


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation, EMA updates, merges)."""
    previous = _GRAD_STATE["enabled"]
    _GRAD_STATE["enabled"] = False
    try:
        yield
    finally:
        _GRAD_STATE["enabled"] = previous


class Tensor:
    """
    Dense n-dimensional float array with an optional gradient.

    Storage is float32 by default; float64 tensors are accepted so that
    gradient checks can run on upcast copies. Reductions and matrix
    products accumulate in float64 regardless of the storage type.
    """

    def __init__(self, data, requires_grad: bool = False, name: str = "", no_decay: bool = False):
        """
        Parameters:
        -----------
        data : array-like
            Values; integer or boolean input is converted to float32
        requires_grad : bool
            Whether backward() populates a gradient for this tensor
        name : str
            Layer path or label, used in error messages and checkpoints
        no_decay : bool
            Exempt this tensor from weight decay (biases, normalization gains)
        """
        array = np.array(data)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(DEFAULT_DTYPE)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.no_decay = no_decay
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    @classmethod
    def _wrap(cls, array: np.ndarray, op: str = "") -> "Tensor":
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = False
        out.grad = None
        out.name = ""
        out.no_decay = False
        out._parents = ()
        out._backward = None
        out._op = op
        return out

    # ---- properties ----

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name, no_decay=self.no_decay)

    def copy(self) -> "Tensor":
        """Independent leaf copy keeping requires_grad, name and decay flag."""
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name, no_decay=self.no_decay)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name, no_decay=self.no_decay)

    def zero_grad(self):
        self.grad = None

    # ---- operator sugar ----

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other: float):
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def t(self) -> "Tensor":
        """Swap the last two axes."""
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def __repr__(self) -> str:
        label = f", name='{self.name}'" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"


# ---- graph plumbing ----

def _as_tensor(value, like: np.dtype | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value, dtype=like if like is not None else DEFAULT_DTYPE)
    return Tensor._wrap(array, op="const")


def _float_dtype(*tensors: Tensor):
    return np.result_type(*[t.data.dtype for t in tensors])


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(tensor: Tensor, grad: np.ndarray):
    grad = _unbroadcast(np.asarray(grad), tensor.shape).astype(tensor.data.dtype, copy=False)
    if tensor.grad is None:
        tensor.grad = np.array(grad, copy=True)
    else:
        tensor.grad = tensor.grad + grad


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None], op: str) -> Tensor:
    out = Tensor._wrap(data, op=op)
    if _GRAD_STATE["enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class ComputeGraph:
    """
    Ordered record of the operations that led to an output tensor.

    Nodes are stored in topological order: every node's inputs precede it.
    Only nodes that require gradients are recorded.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputeGraph":
        order = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def run_backward(self, seed_grad: np.ndarray):
        output = self.nodes[-1]
        output.grad = seed_grad
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # intermediate results do not keep gradients
                node.grad = None

    def clear(self):
        for node in self.nodes:
            node._parents = ()
            node._backward = None


def backward(loss: Tensor):
    """
    Populate .grad on every tensor the scalar loss depends on.

    The graph is cleared afterwards; calling backward a second time on the
    same loss writes nothing.

    Raises:
    -------
    ContractError
        If the loss is not a single-element tensor
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = ComputeGraph.from_output(loss)
    graph.run_backward(np.ones_like(loss.data))
    graph.clear()


# ---- elementwise ----

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    dtype = _float_dtype(a, b)
    data = (a.data + b.data).astype(dtype, copy=False)

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _result(data, (a, b), _backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    dtype = _float_dtype(a, b)
    data = (a.data - b.data).astype(dtype, copy=False)

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _result(data, (a, b), _backward, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a.dtype)
    dtype = _float_dtype(a, b)
    data = (a.data * b.data).astype(dtype, copy=False)

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _result(data, (a, b), _backward, "mul")


def neg(a: Tensor) -> Tensor:
    def _backward(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), _backward, "neg")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def _backward(g):
        _accumulate(a, g * data)

    return _result(data, (a,), _backward, "exp")


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data.astype(np.float64)
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = (0.5 * x * (1.0 + t)).astype(a.dtype)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
        _accumulate(a, g * local)

    return _result(data, (a,), _backward, "gelu")


# ---- shape ----

def reshape(a: Tensor, shape: tuple) -> Tensor:
    data = a.data.reshape(shape)

    def _backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(data, (a,), _backward, "reshape")


def transpose(a: Tensor, axes: tuple) -> Tensor:
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def _backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _result(data, (a,), _backward, "transpose")


# ---- reductions ----

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = np.sum(a.data, axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(data), (a,), _backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---- linear algebra ----

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes, batch axes broadcast.

    Accumulation happens in float64; the result is stored in the input dtype.

    Raises:
    -------
    DimensionError
        If the inner dimensions differ or an operand has fewer than two axes
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with at least 2 axes, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    dtype = _float_dtype(a, b)
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    data = np.matmul(a64, b64).astype(dtype)

    def _backward(g):
        g64 = g.astype(np.float64)
        if a.requires_grad:
            _accumulate(a, np.matmul(g64, np.swapaxes(b64, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a64, -1, -2), g64))

    return _result(data, (a, b), _backward, "matmul")


# ---- normalization / probabilities ----

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    data = s.astype(a.dtype)

    def _backward(g):
        g64 = g.astype(np.float64)
        _accumulate(a, s * (g64 - (g64 * s).sum(axis=axis, keepdims=True)))

    return _result(data, (a,), _backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out64 = shifted - lse
    data = out64.astype(a.dtype)

    def _backward(g):
        g64 = g.astype(np.float64)
        _accumulate(a, g64 - np.exp(out64) * g64.sum(axis=axis, keepdims=True))

    return _result(data, (a,), _backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by gain and shift by bias."""
    x64 = x.data.astype(np.float64)
    n = x.shape[-1]
    mu = x64.mean(axis=-1, keepdims=True)
    centered = x64 - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gain64 = gain.data.astype(np.float64)
    data = (xhat * gain64 + bias.data).astype(_float_dtype(x, gain, bias))

    def _backward(g):
        g64 = g.astype(np.float64)
        if gain.requires_grad:
            _accumulate(gain, (g64 * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g64.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            dxhat = g64 * gain64
            dx = inv_std / n * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
            _accumulate(x, dx)

    return _result(data, (x, gain, bias), _backward, "layer_norm")


def embedding(weight: Tensor, indices) -> Tensor:
    """
    Gather rows of a [num, dim] weight table.

    Raises:
    -------
    IndexError
        If an index falls outside [0, num)
    """
    indices = np.asarray(indices, dtype=np.int64)
    num = weight.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= num):
        raise IndexError(f"embedding index out of range [0, {num}) for '{weight.name}'")
    data = weight.data[indices]

    def _backward(g):
        grad = np.zeros(weight.shape, dtype=np.float64)
        np.add.at(grad, indices.reshape(-1), g.reshape(-1, weight.shape[-1]).astype(np.float64))
        _accumulate(weight, grad)

    return _result(data, (weight,), _backward, "embedding")


# ---- losses ----

def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """
    Mean over positions of -log softmax(logits)[target].

    Parameters:
    -----------
    logits : Tensor
        Shape [..., V]; every leading position is one prediction
    targets : array-like of int
        Shape equal to the leading shape of logits

    Returns:
    --------
    Tensor
        Scalar loss

    Raises:
    -------
    IndexError
        If a target falls outside [0, V)
    ContractError
        If there are no positions or the target shape is wrong
    """
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ContractError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    n = targets.size
    if n < 1:
        raise ContractError("softmax_cross_entropy needs at least one position")
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"target out of range [0, {vocab})")

    z = logits.data.reshape(n, vocab).astype(np.float64)
    flat_targets = targets.reshape(n)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(n), flat_targets]
    data = np.asarray(nll.mean(), dtype=logits.dtype)

    def _backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(n), flat_targets] -= 1.0
        _accumulate(logits, (probs * (float(g) / n)).reshape(logits.shape))

    return _result(data, (logits,), _backward, "softmax_cross_entropy")


def kl_divergence(student_logits: Tensor, teacher_logits, temperature: float = 1.0) -> Tensor:
    """
    T^2 * mean over positions of KL(softmax(student/T) || softmax(teacher/T)).

    The teacher side is treated as a constant.
    """
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    log_p_student = log_softmax(mul(student_logits, 1.0 / temperature))
    log_p_teacher = log_softmax(_as_tensor(teacher.astype(student_logits.dtype) / temperature, like=student_logits.dtype))
    p_student = exp(log_p_student)
    per_position = sum(mul(p_student, sub(log_p_student, log_p_teacher.data)), axis=-1)
    return mul(mean(per_position), temperature * temperature)
