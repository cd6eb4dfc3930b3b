"""Differentiable layers with explicit forward and backward passes.

All layers take channels-last input: ``(batch, length, channels)`` for rank 1
and ``(batch, height, width, channels)`` for rank 2.  Each layer caches what
its backward pass needs during ``forward`` and fills ``grads`` (same keys and
shapes as ``params``) during ``backward``.
"""

import itertools
import math

import numpy as np

from .engine import DTYPE, conv_fans, glorot_uniform


class LayerStateError(RuntimeError):
    """Backward requested without a matching forward."""


def _as_tuple(value, rank):
    if isinstance(value, (tuple, list)):
        if len(value) != rank:
            raise ValueError(f"expected {rank} values, got {value!r}")
        return tuple(int(v) for v in value)
    return (int(value),) * rank


def same_padding(extent, kernel, stride):
    """Output extent and (before, after) zero padding for "same" convolution."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    return out, (total // 2, total - total // 2)


class Layer:
    """Base class; parameter-free layers only override forward/backward."""

    kind = "layer"

    def __init__(self, name=""):
        self.name = name
        self.params = {}
        self.grads = {}
        self.buffers = {}
        # parameter keys that count as weight kernels for L2
        self.kernel_keys = ()

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grads(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    @property
    def n_trainable(self):
        return sum(p.size for p in self.params.values())

    @property
    def n_non_trainable(self):
        return sum(b.size for b in self.buffers.values())

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv(Layer):
    """Strided cross-correlation with "same" zero padding and a bias.

    Weight layout is ``kernel + (c_in, c_out)``.
    """

    kind = "conv"

    def __init__(self, c_in, c_out, kernel, stride=1, rank=1, rng=None, name="conv"):
        super().__init__(name)
        if rank not in (1, 2):
            raise ValueError(f"rank must be 1 or 2, got {rank}")
        self.rank = rank
        self.c_in = int(c_in)
        self.c_out = int(c_out)
        self.kernel = _as_tuple(kernel, rank)
        self.stride = _as_tuple(stride, rank)
        wshape = self.kernel + (self.c_in, self.c_out)
        if rng is None:
            w = np.zeros(wshape, dtype=DTYPE)
        else:
            fan_in, fan_out = conv_fans(self.kernel, self.c_in, self.c_out)
            w = glorot_uniform(wshape, fan_in, fan_out, rng)
        self.params = {"weight": w, "bias": np.zeros(self.c_out, dtype=DTYPE)}
        self.kernel_keys = ("weight",)
        self.zero_grads()
        self._cache = None

    @staticmethod
    def param_count(kernel, c_in, c_out):
        return (int(np.prod(kernel)) * c_in + 1) * c_out

    def output_shape(self, spatial):
        return tuple(same_padding(e, k, s)[0] for e, k, s in zip(spatial, self.kernel, self.stride))

    def _slices(self, offset, out):
        return (slice(None),) + tuple(
            slice(j, j + s * (o - 1) + 1, s) for j, s, o in zip(offset, self.stride, out)
        ) + (slice(None),)

    def forward(self, x, training=False):
        if x.ndim != self.rank + 2:
            raise ValueError(f"{self.name}: expected rank-{self.rank} input with batch and channel axes, got shape {x.shape}")
        if x.shape[-1] != self.c_in:
            raise ValueError(f"{self.name}: input has {x.shape[-1]} channels, layer expects {self.c_in}")
        spatial = x.shape[1:-1]
        outs, pads = [], []
        for e, k, s in zip(spatial, self.kernel, self.stride):
            o, p = same_padding(e, k, s)
            outs.append(o)
            pads.append(p)
        xpad = np.pad(x, [(0, 0)] + pads + [(0, 0)])
        w = self.params["weight"]
        y = np.zeros((x.shape[0],) + tuple(outs) + (self.c_out,), dtype=DTYPE)
        for offset in itertools.product(*(range(k) for k in self.kernel)):
            y += xpad[self._slices(offset, outs)] @ w[offset]
        y += self.params["bias"]
        self._cache = (xpad, tuple(pads), tuple(outs), x.shape)
        return y

    def backward(self, grad):
        if self._cache is None:
            raise LayerStateError(f"{self.name}: backward called before forward")
        xpad, pads, outs, xshape = self._cache
        w = self.params["weight"]
        dxpad = np.zeros_like(xpad)
        dw = np.zeros_like(w)
        g2 = grad.reshape(-1, self.c_out)
        for offset in itertools.product(*(range(k) for k in self.kernel)):
            sl = self._slices(offset, outs)
            dw[offset] = xpad[sl].reshape(-1, self.c_in).T @ g2
            dxpad[sl] += grad @ w[offset].T
        self.grads["weight"] = dw
        self.grads["bias"] = g2.sum(axis=0)
        crop = (slice(None),) + tuple(slice(b, b + e) for (b, _), e in zip(pads, xshape[1:-1])) + (slice(None),)
        return np.ascontiguousarray(dxpad[crop])


class BatchNorm(Layer):
    """Per-channel batch normalisation over every non-channel axis.

    Training mode normalises with the biased batch variance and updates
    ``moving_mean``/``moving_var`` as ``m <- momentum*m + (1-momentum)*stat``.
    """

    kind = "batchnorm"

    def __init__(self, channels, epsilon=1e-3, momentum=0.99, name="bn"):
        super().__init__(name)
        self.channels = int(channels)
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.params = {
            "gamma": np.ones(self.channels, dtype=DTYPE),
            "beta": np.zeros(self.channels, dtype=DTYPE),
        }
        self.buffers = {
            "moving_mean": np.zeros(self.channels, dtype=DTYPE),
            "moving_var": np.ones(self.channels, dtype=DTYPE),
        }
        self.zero_grads()
        self._cache = None

    @staticmethod
    def param_count(channels):
        return 2 * channels, 2 * channels

    def forward(self, x, training=False):
        if x.shape[-1] != self.channels:
            raise ValueError(f"{self.name}: input has {x.shape[-1]} channels, layer expects {self.channels}")
        if x.size == 0:
            raise ValueError(f"{self.name}: empty batch")
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not training:
            self._cache = None
            inv = 1.0 / np.sqrt(self.buffers["moving_var"] + self.epsilon)
            return (x - self.buffers["moving_mean"]) * (gamma * inv) + beta
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        centered = x - mean
        var = (centered * centered).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = centered * inv_std
        m = self.momentum
        self.buffers["moving_mean"] = m * self.buffers["moving_mean"] + (1.0 - m) * mean
        self.buffers["moving_var"] = m * self.buffers["moving_var"] + (1.0 - m) * var
        self._cache = (xhat, inv_std)
        return xhat * gamma + beta

    def backward(self, grad):
        if self._cache is None:
            raise LayerStateError(f"{self.name}: backward needs a training-mode forward")
        xhat, inv_std = self._cache
        axes = tuple(range(grad.ndim - 1))
        n = grad.size // self.channels
        self.grads["beta"] = grad.sum(axis=axes)
        self.grads["gamma"] = (grad * xhat).sum(axis=axes)
        dxhat = grad * self.params["gamma"]
        sum_d = dxhat.sum(axis=axes)
        sum_dx = (dxhat * xhat).sum(axis=axes)
        return (inv_std / n) * (n * dxhat - sum_d - xhat * sum_dx)


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name="relu"):
        super().__init__(name)
        self._mask = None

    def forward(self, x, training=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        if self._mask is None:
            raise LayerStateError(f"{self.name}: backward called before forward")
        return np.where(self._mask, grad, 0.0)


class MaxPool(Layer):
    """Non-overlapping max pooling (stride == window).

    ``padding="valid"`` drops remainder frames (output ``floor(e/size)``) and
    rejects extents smaller than the window.  ``padding="same"`` pads with
    ``-inf`` to ``ceil(e/size)`` windows, so no axis can shrink to zero.
    Gradient ties go to the first maximal element in row-major window order.
    """

    kind = "maxpool"

    def __init__(self, size, rank=1, padding="valid", name="pool"):
        super().__init__(name)
        if padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
        self.rank = rank
        self.size = _as_tuple(size, rank)
        self.padding = padding
        self._cache = None

    def output_shape(self, spatial):
        out = []
        for e, s in zip(spatial, self.size):
            if self.padding == "valid":
                if e < s:
                    raise ValueError(f"{self.name}: extent {e} smaller than pool size {s}")
                out.append(e // s)
            else:
                out.append(-(-e // s))
        return tuple(out)

    def forward(self, x, training=False):
        spatial = x.shape[1:-1]
        outs = self.output_shape(spatial)
        region = []
        pads = []
        for e, s, o in zip(spatial, self.size, outs):
            if self.padding == "valid":
                pads.append((0, 0))
                region.append(slice(0, o * s))
            else:
                total = o * s - e
                pads.append((total // 2, total - total // 2))
                region.append(slice(None))
        xw = x[(slice(None),) + tuple(region) + (slice(None),)]
        if any(p != (0, 0) for p in pads):
            xw = np.pad(xw, [(0, 0)] + pads + [(0, 0)], constant_values=-np.inf)
        b, c = x.shape[0], x.shape[-1]
        split = (b,) + tuple(v for o, s in zip(outs, self.size) for v in (o, s)) + (c,)
        r = self.rank
        # (b, o1, s1, o2, s2, c) -> (b, o1, o2, c, s1, s2)
        perm = (0,) + tuple(1 + 2 * i for i in range(r)) + (2 * r + 1,) + tuple(2 + 2 * i for i in range(r))
        windows = xw.reshape(split).transpose(perm).reshape((b,) + outs + (c, -1))
        arg = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
        self._cache = (arg, windows.shape, split, perm, xw.shape, pads, region, x.shape)
        return y

    def backward(self, grad):
        if self._cache is None:
            raise LayerStateError(f"{self.name}: backward called before forward")
        arg, wshape, split, perm, xwshape, pads, region, xshape = self._cache
        dwin = np.zeros(wshape, dtype=DTYPE)
        np.put_along_axis(dwin, arg[..., None], grad[..., None], axis=-1)
        tshape = tuple(split[p] for p in perm)
        inv = np.argsort(perm)
        dxw = dwin.reshape(tshape).transpose(inv).reshape(xwshape)
        crop = (slice(None),) + tuple(slice(b, b + (n - b - a)) for (b, a), n in zip(pads, xwshape[1:-1])) + (slice(None),)
        dxw = dxw[crop]
        dx = np.zeros(xshape, dtype=DTYPE)
        dx[(slice(None),) + tuple(region) + (slice(None),)] = dxw
        return dx


class GlobalAvgPool(Layer):
    kind = "gap"

    def __init__(self, name="gap"):
        super().__init__(name)
        self._shape = None

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.mean(axis=tuple(range(1, x.ndim - 1)))

    def backward(self, grad):
        if self._shape is None:
            raise LayerStateError(f"{self.name}: backward called before forward")
        shape = self._shape
        extent = math.prod(shape[1:-1])
        expand = grad.reshape((shape[0],) + (1,) * (len(shape) - 2) + (shape[-1],))
        return np.broadcast_to(expand / extent, shape).copy()


class Dense(Layer):
    """Affine map producing class logits; softmax lives in the loss."""

    kind = "dense"

    def __init__(self, c_in, n_out, rng=None, name="dense"):
        super().__init__(name)
        self.c_in = int(c_in)
        self.n_out = int(n_out)
        if rng is None:
            w = np.zeros((self.c_in, self.n_out), dtype=DTYPE)
        else:
            w = glorot_uniform((self.c_in, self.n_out), self.c_in, self.n_out, rng)
        self.params = {"weight": w, "bias": np.zeros(self.n_out, dtype=DTYPE)}
        self.kernel_keys = ("weight",)
        self.zero_grads()
        self._x = None

    @staticmethod
    def param_count(c_in, n_out):
        return (c_in + 1) * n_out

    def forward(self, x, training=False):
        if x.shape[-1] != self.c_in:
            raise ValueError(f"{self.name}: input has {x.shape[-1]} features, layer expects {self.c_in}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad):
        if self._x is None:
            raise LayerStateError(f"{self.name}: backward called before forward")
        self.grads["weight"] = self._x.T @ grad
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"].T


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch.

    Returns ``(loss, probabilities, d_loss/d_logits)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1))
    log_p = z[np.arange(n), labels] - log_norm
    probs = np.exp(z - log_norm[:, None])
    loss = float(-log_p.mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, probs, dlogits / n


def dense_softmax_xent(weights, bias, inputs, labels):
    """Affine map + softmax + mean cross-entropy in one call.

    Returns ``(loss, probabilities, grads)`` where ``grads`` holds
    ``weight``, ``bias`` and ``input`` entries.
    """
    logits = inputs @ weights + bias
    loss, probs, dlogits = softmax_cross_entropy(logits, labels)
    grads = {
        "weight": inputs.T @ dlogits,
        "bias": dlogits.sum(axis=0),
        "input": dlogits @ weights.T,
    }
    return loss, probs, grads
