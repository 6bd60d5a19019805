"""
Dense float64 tensors with reverse-mode gradients.

Only what small feedforward classifiers, translators and the consistency
losses need: elementwise arithmetic with broadcasting, 2-D matmul,
reductions, a handful of nonlinearities, row gathering and stacking.

    >>> w = Parameter(np.array(3.0))
    >>> backprop(w * w)
    >>> w.grad
    array(6.)
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError, TrainingError

__all__ = [
    "Tensor", "Parameter", "Mlp", "as_tensor", "forward", "backprop",
    "zero_grad", "finite_difference_gradient", "sgd_step", "glorot_uniform",
    "exp", "log", "sqrt", "relu", "sigmoid", "log_softmax", "softmax",
    "xlogy", "stack", "concat", "scale_grad", "log_of", "value_of",
]


class Tensor:
    """A node in the computation graph."""

    __array_priority__ = 100

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        # set by softmax so consumers can take an exact log
        self.log_cache = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf with a gradient slot and an SGD momentum buffer."""

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.momentum = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.data.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x):
    """Plain ndarray/float view of a Tensor or array-like."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _node(data, parents, backward):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, parents, backward, requires_grad=True)
    return Tensor(data)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a, index):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), backward)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a):
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a):
    """log(sigmoid(a)) without overflow."""
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * (1.0 - sig),))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), backward)


def softmax(a, axis=-1):
    logp = log_softmax(a, axis)
    p = exp(logp)
    p.log_cache = logp
    return p


def log_of(p):
    """log p, reusing the exact log-softmax when p came from :func:`softmax`."""
    if isinstance(p, Tensor) and p.log_cache is not None:
        return p.log_cache
    return log(p)


def xlogy(p, q):
    """Elementwise p*log(q) with the convention 0*log(anything) = 0."""
    p, q = as_tensor(p), as_tensor(q)
    zero = p.data == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        logq = np.log(q.data)
        out = np.where(zero, 0.0, p.data * logq)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gp = np.where(zero, 0.0, g * logq)
            gq = np.where(zero, 0.0, g * p.data / q.data)
        return _unbroadcast(gp, p.shape), _unbroadcast(gq, q.shape)

    return _node(out, (p, q), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, backward)


def scale_grad(a, scale):
    """Identity forward; multiplies the incoming gradient by ``scale``.

    With a negative scale this is a gradient-reversal layer.
    """
    a = as_tensor(a)
    return _node(a.data.copy(), (a,), lambda g: (g * scale,))


def maximum_of(values):
    """Largest of a sequence of scalar tensors; gradient flows to the argmax."""
    s = stack([as_tensor(v).reshape(()) for v in values])
    return s[int(np.argmax(s.data))]


# ------------------------------------------------------------------ backprop

def _topological(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backprop(loss):
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable Parameter.

    Returns the list of Parameters reached.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backprop needs a scalar loss tensor, got {shape}")
    if not loss.requires_grad:
        return []
    grads = {id(loss): np.ones_like(loss.data)}
    reached = []
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            reached.append(node)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return reached


def zero_grad(params):
    for p in params:
        p.grad = np.zeros_like(p.data)


def finite_difference_gradient(loss_fn, params, step=1e-5):
    """Central differences (f(w+h) - f(w-h)) / 2h for every coordinate of every param."""
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    out = []
    for p in params:
        grad = np.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(value_of(loss_fn()))
            flat[i] = orig - step
            down = float(value_of(loss_fn()))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        out.append(grad)
    return out


def sgd_step(params, lr, momentum=0.9, weight_decay=0.0):
    """In-place SGD with heavy-ball momentum and L2 weight decay folded into the buffer."""
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ContractError("momentum must lie in [0, 1)")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        p.momentum = momentum * p.momentum + p.grad + weight_decay * p.data
        p.data = p.data - lr * p.momentum


# --------------------------------------------------------------------- model

def glorot_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


_ACTIVATIONS = {"relu": relu, "none": None, "sigmoid": sigmoid}


class Mlp:
    """Feedforward net: affine layers with ReLU between them.

    ``output`` selects the head: "softmax" for a class-probability model,
    "linear" for a regression map (translators), "sigmoid" for a
    discriminator.
    """

    def __init__(self, sizes, rng=None, activation="relu", output="softmax", name="mlp"):
        if len(sizes) < 2:
            raise ShapeError("an MLP needs at least input and output widths")
        if output not in ("softmax", "linear", "sigmoid"):
            raise ValueError(f"unknown output head {output!r}")
        rng = np.random.default_rng(rng)
        self.sizes = tuple(int(s) for s in sizes)
        self.output = output
        self.layers = []
        last = len(self.sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            w = Parameter(glorot_uniform(rng, fan_in, fan_out), name=f"{name}.w{i}")
            b = Parameter(np.zeros(fan_out), name=f"{name}.b{i}")
            self.layers.append((w, b, "none" if i == last else activation))

    @property
    def input_dim(self):
        return self.sizes[0]

    @property
    def num_outputs(self):
        return self.sizes[-1]

    def parameters(self):
        return [p for w, b, _ in self.layers for p in (w, b)]

    def features(self, x):
        """Activations feeding the last affine layer."""
        h = self._check(x)
        for w, b, act in self.layers[:-1]:
            h = h @ w + b
            if _ACTIVATIONS[act] is not None:
                h = _ACTIVATIONS[act](h)
        return h

    def head(self, features):
        w, b, _ = self.layers[-1]
        return features @ w + b

    def logits(self, x):
        return self.head(self.features(x))

    def __call__(self, x):
        z = self.logits(x)
        if self.output == "softmax":
            return softmax(z)
        if self.output == "sigmoid":
            return sigmoid(z)
        return z

    def _check(self, x):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected batch of width {self.input_dim}, got shape {x.shape}")
        return x

    def state(self):
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, state):
        for p, v in zip(self.parameters(), state):
            p.data = np.array(v, dtype=np.float64)


def forward(model, batch):
    """Class-probability rows for a batch (each row non-negative, summing to one)."""
    return model(batch)
