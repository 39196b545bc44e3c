"""Layers with hand-written forward and backward passes.

Every layer follows the same protocol:

* ``forward(x, training=False, rng=None)`` returns the output.  Training
  mode stores what ``backward`` needs; inference mode drops any stored
  cache and never touches parameters or running statistics.
* ``backward(grad)`` returns the gradient with respect to the layer input
  and adds parameter gradients into ``self.grads``.
* ``output_shape(shape)`` maps a per-sample input shape to the per-sample
  output shape, raising :class:`ShapeError` on incompatibility.

Arrays are float32, batch-first and channels-last.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Rng, ShapeError


class MissingCacheError(RuntimeError):
    """``backward`` was called without a preceding train-mode ``forward``."""


class Layer:
    kind = "layer"

    def __init__(self, name: str | None = None):
        self.name = name or self.kind
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.needs_input_grad = True
        self._cache = None

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, shape):
        return tuple(shape)

    def build(self, shape, rng: Rng | None = None):
        """Allocate parameters for a per-sample input ``shape``."""

    def config(self) -> dict:
        return {}

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values()) + sum(
            b.size for b in self.buffers.values())

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def state(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}

    def _cached(self):
        if self._cache is None:
            raise MissingCacheError(
                f"{self.name}: backward called without a train-mode forward")
        return self._cache

    def _accumulate(self, key, g):
        if key in self.grads:
            self.grads[key] += g
        else:
            self.grads[key] = g.astype(DTYPE, copy=True)

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({self.name!r}{', ' if cfg else ''}{cfg})"


def he_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(shape, -limit, limit)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0, dtype=DTYPE)


def relu_backward(grad, x):
    # subgradient at exactly zero is zero
    return np.where(x > 0, grad, DTYPE(0)).astype(DTYPE, copy=False)


def softmax(x):
    """Row-wise softmax over the last axis, shifted by the row max."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(DTYPE, copy=False)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        self._cache = x if training else None
        return relu(x)

    def backward(self, grad):
        return relu_backward(grad, self._cached())


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training=False, rng=None):
        if x.ndim != 2:
            raise ShapeError(f"{self.name}: expected [N, K] input, got {x.shape}")
        y = softmax(x)
        self._cache = y if training else None
        return y

    def backward(self, grad):
        # Jacobian-vector product; training normally fuses this with the loss
        y = self._cached()
        dot = (grad * y).sum(axis=1, keepdims=True)
        return (y * (grad - dot)).astype(DTYPE, copy=False)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv2d(x, w, b, stride=1):
    """Valid cross-correlation of ``x[N,H,W,Cin]`` with ``w[kh,kw,Cin,Cout]``.

    Implemented as im2col followed by a single matrix product.
    Returns ``(y, cols)`` where ``cols`` is the patch matrix reused by the
    backward pass.
    """
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if h < kh or wd < kw:
        raise ShapeError(f"conv2d: input {h}x{wd} smaller than kernel {kh}x{kw}")
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    # windows: [N, ho', wo', Cin, kh, kw]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    y = cols @ w.reshape(kh * kw * cin, cout)
    y += b
    return y.reshape(n, ho, wo, cout), cols


def conv2d_backward(grad, x_shape, w, cols, stride=1, input_grad=True):
    """Gradients of :func:`conv2d`; returns ``(dx, dw, db)``.

    ``dx`` is ``None`` when ``input_grad`` is false.
    """
    n, h, wd, cin = x_shape
    kh, kw, _, cout = w.shape
    _, ho, wo, _ = grad.shape
    g = grad.reshape(n * ho * wo, cout)
    dw = (cols.T @ g).reshape(w.shape)
    db = g.sum(axis=0, dtype=np.float64).astype(DTYPE)
    if not input_grad:
        return None, dw, db
    dcols = (g @ w.reshape(kh * kw * cin, cout).T).reshape(n, ho, wo, kh, kw, cin)
    dx = np.zeros(x_shape, dtype=DTYPE)
    for a in range(kh):
        for c in range(kw):
            dx[:, a:a + stride * (ho - 1) + 1:stride,
               c:c + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, a, c, :]
    return dx, dw, db


class Conv2D(Layer):
    """Valid 2-D convolution with optional fused ReLU."""

    kind = "conv2d"

    def __init__(self, filters, kernel_size=3, stride=1, activation=None, name=None):
        super().__init__(name)
        if kernel_size < 1 or stride < 1 or filters < 1:
            raise ValueError("filters, kernel_size and stride must be >= 1")
        if activation not in (None, "relu"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.filters = filters
        self.kernel_size = kernel_size
        self.stride = stride
        self.activation = activation

    def config(self):
        return {"filters": self.filters, "kernel_size": self.kernel_size,
                "stride": self.stride, "activation": self.activation}

    def build(self, shape, rng=None):
        cin = shape[-1]
        k = self.kernel_size
        wshape = (k, k, cin, self.filters)
        if rng is None:
            self.params["weight"] = np.zeros(wshape, dtype=DTYPE)
        else:
            self.params["weight"] = he_uniform(rng, wshape, k * k * cin)
        self.params["bias"] = np.zeros(self.filters, dtype=DTYPE)

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"{self.name}: expected [H, W, C] input, got {tuple(shape)}")
        h, w, c = shape
        k = self.kernel_size
        if "weight" in self.params and self.params["weight"].shape[2] != c:
            raise ShapeError(f"{self.name}: input has {c} channels, "
                             f"kernel expects {self.params['weight'].shape[2]}")
        if h < k or w < k:
            raise ShapeError(f"{self.name}: input {h}x{w} smaller than kernel {k}x{k}")
        return ((h - k) // self.stride + 1, (w - k) // self.stride + 1, self.filters)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected [N, H, W, C] input, got {x.shape}")
        z, cols = conv2d(x, self.params["weight"], self.params["bias"], self.stride)
        y = relu(z) if self.activation == "relu" else z
        self._cache = (x.shape, cols, z) if training else None
        return y

    def backward(self, grad):
        x_shape, cols, z = self._cached()
        if grad.shape != z.shape:
            raise ShapeError(f"{self.name}: gradient shape {grad.shape} != output {z.shape}")
        if self.activation == "relu":
            grad = relu_backward(grad, z)
        dx, dw, db = conv2d_backward(grad, x_shape, self.params["weight"], cols,
                                     self.stride, self.needs_input_grad)
        self._accumulate("weight", dw)
        self._accumulate("bias", db)
        return dx


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def maxpool2d(x, size):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are dropped.  Returns ``(y, argmax)`` where ``argmax`` is the
    row-major index of the winner inside each window (first on ties)."""
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool: input {h}x{w} smaller than window {size}")
    views = [x[:, a:ho * size:size, b:wo * size:size, :]
             for a in range(size) for b in range(size)]
    y = views[0].copy()
    for v in views[1:]:
        np.maximum(y, v, out=y)
    # scan backwards so the earliest matching position wins ties
    idx = np.full(y.shape, size * size - 1, dtype=np.intp)
    for k in range(size * size - 2, -1, -1):
        idx = np.where(views[k] == y, k, idx)
    return y, idx


def maxpool2d_backward(grad, x_shape, idx, size):
    ho, wo = idx.shape[1:3]
    dx = np.zeros(x_shape, dtype=DTYPE)
    for k in range(size * size):
        a, b = divmod(k, size)
        dx[:, a:ho * size:size, b:wo * size:size, :] = np.where(idx == k, grad, DTYPE(0))
    return dx


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, size=2, name=None):
        super().__init__(name)
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self.size = size

    def config(self):
        return {"size": self.size}

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"{self.name}: expected [H, W, C] input, got {tuple(shape)}")
        h, w, c = shape
        if h < self.size or w < self.size:
            raise ShapeError(f"{self.name}: input {h}x{w} smaller than window {self.size}")
        return (h // self.size, w // self.size, c)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected [N, H, W, C] input, got {x.shape}")
        y, idx = maxpool2d(x, self.size)
        self._cache = (x.shape, idx) if training else None
        return y

    def backward(self, grad):
        x_shape, idx = self._cached()
        return maxpool2d_backward(grad, x_shape, idx, self.size)


# --------------------------------------------------------------------------
# batch normalisation
# --------------------------------------------------------------------------

class BatchNorm(Layer):
    """Per-channel normalisation over every axis except the last.

    Training uses the biased batch mean and variance and updates running
    statistics as ``r = momentum * r + (1 - momentum) * batch_stat``.
    Inference normalises with the running statistics.  Running mean and
    variance count towards the parameter total but are not trainable.
    """

    kind = "batchnorm"

    def __init__(self, momentum=0.99, epsilon=1e-3, name=None):
        super().__init__(name)
        self.momentum = momentum
        self.epsilon = epsilon

    def config(self):
        return {"momentum": self.momentum, "epsilon": self.epsilon}

    def build(self, shape, rng=None):
        c = shape[-1]
        self.params["gamma"] = np.ones(c, dtype=DTYPE)
        self.params["beta"] = np.zeros(c, dtype=DTYPE)
        self.buffers["running_mean"] = np.zeros(c, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(c, dtype=DTYPE)

    def output_shape(self, shape):
        if "gamma" in self.params and shape[-1] != self.params["gamma"].size:
            raise ShapeError(f"{self.name}: expected {self.params['gamma'].size} "
                             f"channels, got {shape[-1]}")
        return tuple(shape)

    def forward(self, x, training=False, rng=None):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if x.shape[-1] != gamma.size:
            raise ShapeError(f"{self.name}: expected {gamma.size} channels, got {x.shape[-1]}")
        axes = tuple(range(x.ndim - 1))
        if not training:
            self._cache = None
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + DTYPE(self.epsilon))
            return ((x - self.buffers["running_mean"]) * (inv * gamma) + beta).astype(
                DTYPE, copy=False)

        m = x.size // x.shape[-1]
        if m < 2:
            raise ValueError(f"{self.name}: training needs at least 2 values per channel")
        mean = x.mean(axis=axes, dtype=np.float64)
        var = ((x - mean) ** 2).mean(axis=axes)
        inv = (1.0 / np.sqrt(var + self.epsilon)).astype(DTYPE)
        xhat = ((x - mean.astype(DTYPE)) * inv).astype(DTYPE, copy=False)
        mom = self.momentum
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm[...] = mom * rm + (1.0 - mom) * mean
        rv[...] = mom * rv + (1.0 - mom) * var
        self._cache = (xhat, inv, axes)
        return xhat * gamma + beta

    def backward(self, grad):
        xhat, inv, axes = self._cached()
        m = xhat.size // xhat.shape[-1]
        dbeta = grad.sum(axis=axes, dtype=np.float64)
        dgamma = (grad * xhat).sum(axis=axes, dtype=np.float64)
        self._accumulate("beta", dbeta.astype(DTYPE))
        self._accumulate("gamma", dgamma.astype(DTYPE))
        g = self.params["gamma"]
        # dx = gamma*inv/m * (m*dy - sum(dy) - xhat*sum(dy*xhat))
        dx = (g * inv / m) * (m * grad - dbeta.astype(DTYPE) - xhat * dgamma.astype(DTYPE))
        return dx.astype(DTYPE, copy=False)


# --------------------------------------------------------------------------
# dropout
# --------------------------------------------------------------------------

class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` during
    training, so inference is the identity."""

    kind = "dropout"

    def __init__(self, rate=0.2, name=None):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def config(self):
        return {"rate": self.rate}

    def forward(self, x, training=False, rng=None):
        if not training:
            self._cache = None
            return x
        if self.rate == 0.0:
            mask = np.ones(x.shape, dtype=DTYPE)
        else:
            if rng is None:
                raise ValueError(f"{self.name}: train-mode dropout needs an Rng")
            keep = 1.0 - self.rate
            mask = (rng.random(x.shape) < DTYPE(keep)).astype(DTYPE) * DTYPE(1.0 / keep)
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._cached()


# --------------------------------------------------------------------------
# dense and flatten
# --------------------------------------------------------------------------

class Dense(Layer):
    """Fully connected layer ``y = x @ W + b`` with optional fused ReLU."""

    kind = "dense"

    def __init__(self, units, activation=None, name=None):
        super().__init__(name)
        if units < 1:
            raise ValueError("units must be >= 1")
        if activation not in (None, "relu"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.units = units
        self.activation = activation

    def config(self):
        return {"units": self.units, "activation": self.activation}

    def build(self, shape, rng=None):
        fan_in = shape[-1]
        wshape = (fan_in, self.units)
        if rng is None:
            self.params["weight"] = np.zeros(wshape, dtype=DTYPE)
        else:
            self.params["weight"] = he_uniform(rng, wshape, fan_in)
        self.params["bias"] = np.zeros(self.units, dtype=DTYPE)

    def output_shape(self, shape):
        if len(shape) != 1:
            raise ShapeError(f"{self.name}: expected flat input, got {tuple(shape)}")
        if "weight" in self.params and shape[0] != self.params["weight"].shape[0]:
            raise ShapeError(f"{self.name}: expected {self.params['weight'].shape[0]} "
                             f"features, got {shape[0]}")
        return (self.units,)

    def forward(self, x, training=False, rng=None):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"{self.name}: cannot apply {w.shape} weights to input {x.shape}")
        z = x @ w + self.params["bias"]
        self._cache = (x, z) if training else None
        return relu(z) if self.activation == "relu" else z

    def backward(self, grad):
        x, z = self._cached()
        if self.activation == "relu":
            grad = relu_backward(grad, z)
        self._accumulate("weight", x.T @ grad)
        self._accumulate("bias", grad.sum(axis=0, dtype=np.float64).astype(DTYPE))
        return grad @ self.params["weight"].T


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (math.prod(shape),)

    def forward(self, x, training=False, rng=None):
        self._cache = x.shape if training else None
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cached())


LAYER_TYPES = {cls.kind: cls for cls in
               (Conv2D, MaxPool2D, BatchNorm, Dropout, Dense, Flatten, ReLU, Softmax)}
