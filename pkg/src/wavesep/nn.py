"""Small reverse-mode autodiff core for 1-D convolutional networks.

Feature maps are numpy arrays shaped ``(channels, time)`` or
``(batch, channels, time)``; channels are always axis -2 and time axis -1.
Only the operations the separation model and its losses need are provided.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergedTrainingError, InsufficientContextError, InternalError


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_op", "_backward")

    def __init__(self, data, _prev=(), _op="leaf", requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _prev)
        self._prev = _prev
        self._op = _op
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, scalar):
        return scale(self, scalar)

    __rmul__ = __mul__

    def backward(self):
        """Fill ``.grad`` of every upstream tensor that requires a gradient."""
        if self.data.size != 1:
            raise ConfigError(f"backward() needs a scalar, got shape {self.data.shape}")
        order = []
        seen = set()
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
            for p in node._prev:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._op == "leaf":
                continue
            if node._op not in _DIFFERENTIABLE_OPS or node._backward is None:
                raise InternalError(f"no gradient rule for op {node._op!r}")
            if node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    """Leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True)


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ConfigError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, (a, b), "add")

    def _backward(g):
        a._accumulate(g)
        b._accumulate(g)

    out._backward = _backward
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ConfigError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data, (a, b), "sub")

    def _backward(g):
        a._accumulate(g)
        b._accumulate(-g)

    out._backward = _backward
    return out


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * a.data.dtype.type(c), (a,), "scale")
    out._backward = lambda g: a._accumulate(g * a.data.dtype.type(c))
    return out


def relu(a):
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), "relu")
    out._backward = lambda g: a._accumulate(g * mask)
    return out


def absolute(a):
    # subgradient at 0 is 0
    sign = np.sign(a.data)
    out = Tensor(np.abs(a.data), (a,), "abs")
    out._backward = lambda g: a._accumulate(g * sign)
    return out


def total(a):
    """Sum of all elements, as a 0-d tensor."""
    out = Tensor(a.data.sum(dtype=a.dtype), (a,), "sum")
    out._backward = lambda g: a._accumulate(np.broadcast_to(g, a.shape))
    return out


def crop(a, length):
    """Center-crop along time to ``length`` samples."""
    t = a.shape[-1]
    if length > t or length < 1:
        raise ConfigError(f"crop: cannot crop {t} samples to {length}")
    if length == t:
        return a
    start = (t - length) // 2
    out = Tensor(a.data[..., start:start + length], (a,), "crop")

    def _backward(g):
        full = np.zeros_like(a.data)
        full[..., start:start + length] = g
        a._accumulate(full)

    out._backward = _backward
    return out


def _sigmoid(x):
    # tanh form keeps dtype and never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gated_unit(pre):
    """tanh(filter) * sigmoid(gate), filter = first half of the channels.

    ``pre`` must have an even channel count ``2k``; channels ``[0, k)`` feed
    the tanh branch and ``[k, 2k)`` the sigmoid gate.
    """
    pre = _as_tensor(pre)
    c = pre.shape[-2]
    if c % 2:
        raise ConfigError(f"gated_unit needs an even channel count, got {c}")
    k = c // 2
    t = np.tanh(pre.data[..., :k, :])
    s = _sigmoid(pre.data[..., k:, :])
    out = Tensor(t * s, (pre,), "gated_unit")

    def _backward(g):
        grad = np.empty_like(pre.data)
        grad[..., :k, :] = g * s * (1 - t * t)
        grad[..., k:, :] = g * t * s * (1 - s)
        pre._accumulate(grad)

    out._backward = _backward
    return out


# --------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """Kernel of a 1-D convolution: weight ``(out, in, width)`` and bias ``(out,)``."""

    weight: Tensor
    bias: Tensor
    dilation: int = 1

    def __post_init__(self):
        if not isinstance(self.weight, Tensor):
            self.weight = parameter(self.weight)
        if not isinstance(self.bias, Tensor):
            self.bias = parameter(self.bias)
        if self.weight.data.ndim != 3:
            raise ConfigError(f"conv weight must be 3-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigError(f"bias shape {self.bias.shape} != ({self.weight.shape[0]},)")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be positive, got {self.dilation}")

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def width(self):
        return self.weight.shape[2]

    @property
    def span(self):
        """Samples consumed beyond the output length."""
        return self.dilation * (self.width - 1)

    def num_params(self):
        return self.weight.data.size + self.bias.data.size


def init_conv(rng, in_channels, out_channels, width, dilation=1, dtype=np.float32):
    """Uniform init in ``[-a, a]`` with ``a = 1/sqrt(in_channels*width)``; zero bias."""
    bound = 1.0 / np.sqrt(in_channels * width)
    w = rng.uniform(-bound, bound, size=(out_channels, in_channels, width)).astype(dtype)
    b = np.zeros(out_channels, dtype=dtype)
    return ConvParams(parameter(w), parameter(b), dilation)


def conv1d(x, params: ConvParams):
    """VALID dilated convolution.

    ``out[c, t] = bias[c] + sum_{i,w} weight[c, i, w] * x[i, t + w*dilation]``
    """
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ConfigError(f"conv1d input must be (channels, time), got {x.shape}")
    c_in, t_in = x.shape[-2], x.shape[-1]
    if c_in != params.in_channels:
        raise ConfigError(f"conv1d: input has {c_in} channels, kernel expects {params.in_channels}")
    span = params.span
    t_out = t_in - span
    if t_out < 1:
        raise InsufficientContextError(
            f"conv1d: {t_in} samples is shorter than kernel span {span + 1}")

    width, d = params.width, params.dilation
    w = params.weight.data
    o = params.out_channels
    # (out, width*in), column index = tap*in + channel
    wm = w.transpose(0, 2, 1).reshape(o, width * c_in)
    if width == 1:
        cols = x.data
    else:
        cols = np.concatenate([x.data[..., k * d:k * d + t_out] for k in range(width)], axis=-2)
    y = np.matmul(wm, cols)
    y += params.bias.data[:, None]
    out = Tensor(y, (x, params.weight, params.bias), "conv1d")

    def _backward(g):
        lead = tuple(range(g.ndim - 2))
        if params.weight.requires_grad:
            gw = np.tensordot(g, cols, axes=(lead + (g.ndim - 1,), lead + (cols.ndim - 1,)))
            params.weight._accumulate(gw.reshape(o, width, c_in).transpose(0, 2, 1))
        if params.bias.requires_grad:
            params.bias._accumulate(g.sum(axis=lead + (g.ndim - 1,)))
        if x.requires_grad:
            gcols = np.matmul(wm.T, g)
            if width == 1:
                x._accumulate(gcols)
            else:
                gx = np.zeros_like(x.data)
                for k in range(width):
                    gx[..., k * d:k * d + t_out] += gcols[..., k * c_in:(k + 1) * c_in, :]
                x._accumulate(gx)

    out._backward = _backward
    return out


_DIFFERENTIABLE_OPS = frozenset(
    {"add", "sub", "scale", "relu", "abs", "sum", "crop", "gated_unit", "conv1d"})


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)

    def validate(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")


def adam_step(params, grads, state: AdamState):
    """One bias-corrected ADAM update. Returns ``(new_params, new_state)``.

    Inputs are left untouched. A non-finite gradient aborts the update with
    :class:`DivergedTrainingError`.
    """
    state.validate()
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ConfigError("adam_step: params, grads and moments differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ConfigError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergedTrainingError("non-finite gradient in ADAM update")

    step = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** step
    corr2 = 1.0 - b2 ** step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        dt = p.dtype.type
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        update = (m / dt(corr1)) / (np.sqrt(v / dt(corr2)) + dt(state.epsilon))
        new_params.append(p - dt(state.lr) * update)
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, step, state.lr, b1, b2, state.epsilon)
    return new_params, new_state


# --------------------------------------------------------------------------
# verification


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: tuple = field(default=())
    checked: int = 0

    def __float__(self):
        return self.max_rel_error


def grad_check(loss_fn, params, h=1e-5, max_coords=None, rng=None):
    """Compare analytic gradients against central differences.

    ``loss_fn()`` must rebuild the scalar loss from the current values of
    ``params`` (a list of float64 parameter tensors, perturbed in place).
    Returns the worst ``|a - n| / max(|a|, |n|, 1e-12)`` over all checked
    coordinates. With ``max_coords`` only that many coordinates per tensor are
    sampled (using ``rng``).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ConfigError(f"perturbation h must lie in [1e-7, 1e-3], got {h}")
    for p in params:
        if p.dtype != np.float64:
            raise ConfigError("grad_check requires float64 parameters")
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise ConfigError("grad_check: loss is not finite at the evaluation point")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = GradCheckResult(0.0)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_coords is None or max_coords >= n else rng.choice(n, max_coords, replace=False)
        a_flat = analytic[pi].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn().data)
            flat[i] = orig - h
            f_minus = float(loss_fn().data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * h)
            a = float(a_flat[i])
            rel = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst.checked += 1
            if rel > worst.max_rel_error:
                worst.max_rel_error = rel
                worst.worst_index = (pi, int(i))
    for p in params:
        p.grad = None
    return worst
