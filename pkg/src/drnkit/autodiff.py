"""Small reverse-mode differentiation engine over dense float64 numpy arrays.

Only what the feedforward networks and their losses need: elementwise maths,
matrix products, reductions, cumulative sums, gathers and log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

LEAKY_SLOPE = 0.01


class DimensionError(ValueError):
    """Array shapes do not line up."""


class TrainingDivergenceError(FloatingPointError):
    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that records how it was computed."""

    __array_priority__ = 100.0

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        return f"Tensor({self.data!r})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(np.asarray(self.data).reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def _accum(self, g):
        g = _unbroadcast(np.asarray(g, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, (self, other))

        def bw(g):
            self._accum(g)
            other._accum(g)

        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, (self, other))

        def bw(g):
            self._accum(g * other.data)
            other._accum(g * self.data)

        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, (self, other))

        def bw(g):
            self._accum(g / other.data)
            other._accum(-g * self.data / other.data**2)

        out._backward = bw
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        out = Tensor(self.data**p, (self,))
        out._backward = lambda g: self._accum(g * p * self.data ** (p - 1))
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.shape[-1] != other.data.shape[0]:
            raise DimensionError(f"cannot multiply {self.data.shape} by {other.data.shape}")
        out = Tensor(self.data @ other.data, (self, other))

        def bw(g):
            a, b = self.data, other.data
            if b.ndim == 1:
                # (n, k) @ (k,) -> (n,)  or  (k,) @ (k,) -> ()
                self._accum(np.multiply.outer(g, b))
                other._accum(a.T @ g if a.ndim == 2 else a * g)
            elif a.ndim == 1:
                self._accum(g @ b.T)
                other._accum(np.outer(a, g))
            else:
                self._accum(g @ b.T)
                other._accum(a.T @ g)

        out._backward = bw
        return out

    # elementwise ----------------------------------------------------------

    def exp(self):
        val = np.exp(self.data)
        out = Tensor(val, (self,))
        out._backward = lambda g: self._accum(g * val)
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))
        out._backward = lambda g: self._accum(g / self.data)
        return out

    def sigmoid(self):
        val = special.expit(self.data)
        out = Tensor(val, (self,))
        out._backward = lambda g: self._accum(g * val * (1.0 - val))
        return out

    def softplus(self):
        out = Tensor(np.logaddexp(0.0, self.data), (self,))
        out._backward = lambda g: self._accum(g * special.expit(self.data))
        return out

    def lgamma(self):
        out = Tensor(special.gammaln(self.data), (self,))
        out._backward = lambda g: self._accum(g * special.digamma(self.data))
        return out

    def leaky_relu(self, slope: float = LEAKY_SLOPE):
        # kink at 0 takes the positive branch
        pos = self.data >= 0
        out = Tensor(np.where(pos, self.data, slope * self.data), (self,))
        out._backward = lambda g: self._accum(g * np.where(pos, 1.0, slope))
        return out

    def clip(self, lo=None, hi=None):
        val = np.clip(self.data, lo, hi)
        inside = val == self.data
        out = Tensor(val, (self,))
        out._backward = lambda g: self._accum(g * inside)
        return out

    # shape / reductions ---------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape))

        out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / n

    def logsumexp(self, axis=-1, keepdims=False):
        m = self.data.max(axis=axis, keepdims=True)
        shifted = np.exp(self.data - m)
        total = shifted.sum(axis=axis, keepdims=True)
        val = m + np.log(total)
        out = Tensor(val if keepdims else np.squeeze(val, axis=axis), (self,))

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(g * shifted / total)

        out._backward = bw
        return out

    def softmax(self, axis=-1):
        return (self - self.logsumexp(axis=axis, keepdims=True)).exp()

    def cumsum(self, axis=-1):
        out = Tensor(np.cumsum(self.data, axis=axis), (self,))

        def bw(g):
            self._accum(np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

        out._backward = bw
        return out

    def diff(self, axis=-1):
        n = self.data.shape[axis]
        hi = self.take(np.arange(1, n), axis)
        lo = self.take(np.arange(0, n - 1), axis)
        return hi - lo

    def take(self, indices, axis):
        indices = np.asarray(indices)
        out = Tensor(np.take(self.data, indices, axis=axis), (self,))

        def bw(g):
            full = np.zeros_like(self.data)
            idx = [slice(None)] * self.data.ndim
            idx[axis] = indices
            np.add.at(full, tuple(idx), g)
            self._accum(full)

        out._backward = bw
        return out

    def take_along(self, indices, axis=-1):
        indices = np.asarray(indices)
        out = Tensor(np.take_along_axis(self.data, indices, axis=axis), (self,))

        def bw(g):
            full = np.zeros_like(self.data)
            # indices along an axis may repeat, so scatter-add explicitly
            grids = list(np.indices(indices.shape, sparse=True))
            grids[axis % self.data.ndim] = indices
            np.add.at(full, tuple(grids), g)
            self._accum(full)

        out._backward = bw
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], (self,))

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accum(full)

        out._backward = bw
        return out

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))
        out._backward = lambda g: self._accum(np.reshape(g, self.data.shape))
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))

    def bw(g):
        parts = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, part in zip(tensors, parts):
            t._accum(part)

    out._backward = bw
    return out


def data_of(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# feedforward networks


@dataclass
class MlpParams:
    """Weights (fan_in x fan_out) and biases of a leaky-ReLU network with a linear output layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {i} fan-in {w.shape[0]} != previous fan-out")
        if not all(np.isfinite(a).all() for a in self.arrays()):
            raise ValueError("non-finite network parameter")

    @property
    def hidden_layers(self) -> int:
        return len(self.weights) - 1

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_widths(self) -> list[int]:
        return [w.shape[1] for w in self.weights[:-1]]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], slope: float = LEAKY_SLOPE) -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), slope)

    def copy(self) -> "MlpParams":
        return MlpParams.from_arrays([a.copy() for a in self.arrays()], self.slope)

    def to_dict(self) -> dict:
        return {
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "slope": self.slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        return cls(d["weights"], d["biases"], d.get("slope", LEAKY_SLOPE))


def init_mlp(n_inputs: int, hidden: Sequence[int], n_outputs: int, rng: np.random.Generator,
             slope: float = LEAKY_SLOPE) -> MlpParams:
    sizes = [n_inputs, *hidden, n_outputs]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, slope)


def sample_dropout_masks(params: MlpParams, n: int, rate: float, rng: np.random.Generator):
    if rate <= 0:
        return None
    return [(rng.random((n, width)) >= rate).astype(np.float64) for width in params.hidden_widths]


def _check_input(params: MlpParams, x: np.ndarray, masks):
    if x.shape[-1] != params.n_inputs:
        raise DimensionError(f"input width {x.shape[-1]} != network fan-in {params.n_inputs}")
    if masks is not None:
        if len(masks) != params.hidden_layers:
            raise DimensionError("one dropout mask per hidden layer is required")
        for m, width in zip(masks, params.hidden_widths):
            if np.shape(m)[-1] != width:
                raise DimensionError(f"dropout mask width {np.shape(m)[-1]} != layer width {width}")


def mlp_apply(tensors: Sequence[Tensor], x, slope: float = LEAKY_SLOPE, masks=None,
              dropout_rate: float = 0.0) -> Tensor:
    """Forward pass over recorded parameters; ``tensors`` alternates weight, bias."""
    z = as_tensor(x)
    n_layers = len(tensors) // 2
    for layer in range(n_layers):
        z = z @ tensors[2 * layer] + tensors[2 * layer + 1]
        if layer < n_layers - 1:
            z = z.leaky_relu(slope)
            if masks is not None:
                z = z * (masks[layer] / (1.0 - dropout_rate))
    return z


def mlp_forward(params: MlpParams, x, dropout_mask=None, dropout_rate: float = 0.0) -> np.ndarray:
    """Raw network output for one feature vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(params, x, dropout_mask)
    z = x
    n_layers = len(params.weights)
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = z @ w + b
        if layer < n_layers - 1:
            z = np.where(z >= 0, z, params.slope * z)
            if dropout_mask is not None:
                z = z * dropout_mask[layer] / (1.0 - dropout_rate)
    return z


def mlp_value_and_grad(params: MlpParams, batch, loss_fn, masks=None, dropout_rate: float = 0.0,
                       batch_index: int | None = None):
    """Loss and exact gradient with respect to every network parameter.

    ``batch`` is a tuple whose first item is the input matrix; ``loss_fn(z, batch)``
    maps the network output tensor to a scalar tensor.
    """
    x = np.asarray(batch[0], dtype=np.float64)
    _check_input(params, x, masks)
    tensors = [Tensor(a) for a in params.arrays()]
    z = mlp_apply(tensors, x, params.slope, masks, dropout_rate)
    loss = loss_fn(z, batch)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergenceError(f"non-finite loss {value}", batch_index)
    loss.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    return value, MlpParams.from_arrays(grads, params.slope)


def _loss_value(params: MlpParams, batch, loss_fn) -> float:
    tensors = [Tensor(a) for a in params.arrays()]
    return loss_fn(mlp_apply(tensors, batch[0], params.slope), batch).item()


def finite_diff_check(params: MlpParams, batch, loss_fn, step: float = 1e-5) -> float:
    """Max over parameters of |analytic - central difference| / max(1, |analytic|)."""
    if step <= 0:
        raise ValueError("step must be positive")
    _, grads = mlp_value_and_grad(params, batch, loss_fn)
    arrays = [a.copy() for a in params.arrays()]
    worst = 0.0
    for a, g in zip(arrays, grads.arrays()):
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _loss_value(MlpParams.from_arrays(arrays, params.slope), batch, loss_fn)
            flat[i] = orig - step
            down = _loss_value(MlpParams.from_arrays(arrays, params.slope), batch, loss_fn)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, abs(gflat[i] - numeric) / max(1.0, abs(gflat[i])))
    return worst
