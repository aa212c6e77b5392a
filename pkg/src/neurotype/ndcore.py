# Tape-style reverse-mode autodiff over float64 numpy arrays.
import numpy as np
from scipy.special import ndtr

from .errors import ContractError, LabelError, NonFiniteError, ShapeError


def _as_array(data):
    return np.array(data, dtype=np.float64)


class Tensor:
    """A node in the computation graph.

    Leaves are created by the user; every op returns a new node holding its
    parents and a closure mapping the upstream gradient to one gradient per
    parent. Leaf gradients accumulate across ``backward`` calls until
    ``zero_grads`` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_rule", "op")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = _as_array(data)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._rule = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, rule, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = np.zeros_like(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.name = ""
    out._parents = tuple(parents)
    out._rule = rule
    out.op = op
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a):
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def affine(x, W, b):
    """``x @ W + b`` for x of shape (N, D), W (D, H), b (H,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"affine: bias {b.shape} incompatible with weight {W.shape}")

    def rule(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(x.data @ W.data + b.data, (x, W, b), rule, "affine")


def tanh_act(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def square(x):
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def sum_(x, axis=None):
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out, dtype=np.float64), (x,), rule, "sum")


def mean(x, axis=None):
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / count)


def hard_clip01(x):
    """Elementwise ``min(1, max(0, x))``.

    The subgradient is 1 on the closed interval [0, 1] and 0 outside it.
    """
    x = as_tensor(x)
    inside = (x.data >= 0.0) & (x.data <= 1.0)
    return _node(np.clip(x.data, 0.0, 1.0), (x,), lambda g: (g * inside,), "clip01")


def normal_cdf(x):
    x = as_tensor(x)
    pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
    return _node(ndtr(x.data), (x,), lambda g: (g * pdf,), "normal_cdf")


def grl_backward(upstream_grad, lambda_adv):
    return -lambda_adv * np.asarray(upstream_grad, dtype=np.float64)


def reverse_gradient(x, lambda_adv):
    """Identity forward; the backward pass multiplies the gradient by ``-lambda_adv``."""
    x = as_tensor(x)
    return _node(x.data.copy(), (x,), lambda g: (grl_backward(g, lambda_adv),), "grl")


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if n == 0:
        raise ShapeError("softmax_cross_entropy: empty batch")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise LabelError(f"labels must be integers in [0, {k}), got {labels.tolist()[:10]}")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def rule(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (g * grad / n,)

    return _node(np.asarray(loss), (logits,), rule, "softmax_xent")


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf with ``requires_grad``.

    Returns a dict mapping those leaves to their (accumulated) gradient arrays.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = np.zeros_like(node.data)
    loss.grad = loss.grad + np.ones_like(loss.data) if loss.is_leaf else np.ones_like(loss.data)
    leaves = {}
    for node in reversed(order):
        if node.is_leaf:
            if node.requires_grad:
                leaves[node] = node.grad
            continue
        if not node.requires_grad:
            continue
        for parent, g in zip(node._parents, node._rule(node.grad)):
            if parent.requires_grad:
                parent.grad = parent.grad + g
    return leaves


def zero_grads(params):
    for p in params:
        p.grad = np.zeros_like(p.data)


# Dense layer stacks shared by both models.

def init_dense(rng, fan_in, fan_out, name=""):
    """LeCun-uniform weights (variance 1/fan_in), zero bias."""
    bound = np.sqrt(3.0 / fan_in)
    W = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=f"{name}W")
    b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}b")
    return [W, b]


def init_mlp(rng, widths, name=""):
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(init_dense(rng, fan_in, fan_out, name=f"{name}{i}."))
    return layers


def mlp(layers, x, activate_last=False):
    h = x
    for i, (W, b) in enumerate(layers):
        h = affine(h, W, b)
        if i < len(layers) - 1 or activate_last:
            h = tanh_act(h)
    return h


def flatten(layers):
    return [p for layer in layers for p in layer]
