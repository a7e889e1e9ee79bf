"""Minimal dense/convolution kernels with analytic gradients.

Everything is plain numpy. Layers cache what their backward pass needs
during forward; gradients are accumulated into ``Parameter.grad``. The loss
is always a batch mean, so parameter gradients are mini-batch means and
``sgd_step`` can apply them directly.
"""

from __future__ import annotations

import json

import numpy as np

from clogcd.errors import ClogcdError, TrainingDivergedError

DEFAULT_DTYPE = np.float64


class Parameter:
    """A trainable array plus its gradient and bookkeeping flags."""

    def __init__(self, value: np.ndarray, is_bias: bool = False, name: str = ""):
        self.value = value
        self.grad: np.ndarray | None = None
        self.is_bias = is_bias
        self.name = name

    def zero_grad(self):
        self.grad = None

    def add_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                   dtype=DEFAULT_DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# functional conv kernels
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kernel: int, stride: int, pad: int):
    """Unfold (N, C, H, W) into (N, C*k*k, out_h*out_w) patch columns."""
    n, c, h, w = x.shape
    out_h = (h + 2 * pad - kernel) // stride + 1
    out_w = (w + 2 * pad - kernel) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ClogcdError(f"input {h}x{w} too small for kernel {kernel} at stride {stride}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kernel, kernel, out_h, out_w), dtype=x.dtype)
    for ky in range(kernel):
        for kx in range(kernel):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + stride * out_h:stride,
                                    kx:kx + stride * out_w:stride]
    return cols.reshape(n, c * kernel * kernel, out_h * out_w), (out_h, out_w)


def _col2im(cols: np.ndarray, x_shape, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add patch columns back onto the (padded) input grid."""
    n, c, h, w = x_shape
    out_h = (h + 2 * pad - kernel) // stride + 1
    out_w = (w + 2 * pad - kernel) // stride + 1
    cols = cols.reshape(n, c, kernel, kernel, out_h, out_w)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ky in range(kernel):
        for kx in range(kernel):
            xp[:, :, ky:ky + stride * out_h:stride, kx:kx + stride * out_w:stride] += \
                cols[:, :, ky, kx]
    if pad == 0:
        return xp
    return xp[:, :, pad:-pad, pad:-pad]


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   stride: int = 1, pad: int = 1) -> np.ndarray:
    """Cross-correlate (N, C, H, W) with (O, C, k, k) weights; pre-activation output.

    Zero padding of ``pad`` on each spatial edge; one output channel per
    filter, each offset by its bias.
    """
    if x.ndim != 4 or weights.ndim != 4:
        raise ClogcdError(f"conv2d expects 4-d input and weights, got {x.shape} / {weights.shape}")
    out_ch, in_ch, k, k2 = weights.shape
    if k != k2:
        raise ClogcdError("conv2d kernels must be square")
    if x.shape[1] != in_ch:
        raise ClogcdError(f"channel mismatch: input has {x.shape[1]}, weights expect {in_ch}")
    cols, (out_h, out_w) = _im2col(x, k, stride, pad)
    w_mat = weights.reshape(out_ch, in_ch * k * k)
    out = np.einsum("of,nfl->nol", w_mat, cols, optimize=True)
    out += bias[None, :, None]
    return out.reshape(x.shape[0], out_ch, out_h, out_w)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray,
                    stride: int = 1, pad: int = 1):
    """Gradients of conv2d_forward: returns (grad_x, grad_weights, grad_bias)."""
    out_ch, in_ch, k, _ = weights.shape
    n = x.shape[0]
    cols, (out_h, out_w) = _im2col(x, k, stride, pad)
    g = grad_out.reshape(n, out_ch, out_h * out_w)
    grad_b = g.sum(axis=(0, 2))
    grad_w = np.einsum("nol,nfl->of", g, cols, optimize=True).reshape(weights.shape)
    w_mat = weights.reshape(out_ch, in_ch * k * k)
    grad_cols = np.einsum("of,nol->nfl", w_mat, g, optimize=True)
    grad_x = _col2im(grad_cols, x.shape, k, stride, pad)
    return grad_x, grad_w, grad_b


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax; accepts a single vector or a (N, K) batch."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if single else p


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    p = softmax(logits)
    eps = np.finfo(np.float64).tiny
    loss = -np.mean(np.log(p[np.arange(n), labels] + eps))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad.astype(logits.dtype)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Parameter]:
        return []

    def clear_cache(self):
        pass

    def spec(self) -> dict:
        raise NotImplementedError

    def _require_cache(self, cache, what="input"):
        if cache is None:
            raise ClogcdError(f"{type(self).__name__}.backward called before forward ({what} cache empty)")
        return cache


class Conv2D(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, pad: int = 1,
                 init: str = "he", rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng()
        fan_in = in_ch * kernel * kernel
        fan_out = out_ch * kernel * kernel
        if init == "he":
            w = he_uniform((out_ch, in_ch, kernel, kernel), fan_in, rng, dtype)
        elif init == "glorot":
            w = glorot_uniform((out_ch, in_ch, kernel, kernel), fan_in, fan_out, rng, dtype)
        else:
            raise ClogcdError(f"unknown init {init!r}")
        self.weight = Parameter(w, name="conv.weight")
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), is_bias=True, name="conv.bias")
        self.stride = stride
        self.pad = pad
        self.kernel = kernel
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.init = init
        self._x = None

    def forward(self, x):
        self._x = x
        return conv2d_forward(x, self.weight.value, self.bias.value, self.stride, self.pad)

    def backward(self, grad):
        x = self._require_cache(self._x)
        gx, gw, gb = conv2d_backward(grad, x, self.weight.value, self.stride, self.pad)
        self.weight.add_grad(gw)
        self.bias.add_grad(gb)
        return gx

    def params(self):
        return [self.weight, self.bias]

    def clear_cache(self):
        self._x = None

    def spec(self):
        return {"kind": "conv2d", "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride, "pad": self.pad,
                "init": self.init}


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, init: str = "he",
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng()
        if init == "he":
            w = he_uniform((in_dim, out_dim), in_dim, rng, dtype)
        elif init == "glorot":
            w = glorot_uniform((in_dim, out_dim), in_dim, out_dim, rng, dtype)
        else:
            raise ClogcdError(f"unknown init {init!r}")
        self.weight = Parameter(w, name="dense.weight")
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype), is_bias=True, name="dense.bias")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.init = init
        self._x = None

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ClogcdError(f"dense expects width {self.in_dim}, got {x.shape[-1]}")
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, grad):
        x = self._require_cache(self._x)
        self.weight.add_grad(x.T @ grad)
        self.bias.add_grad(grad.sum(axis=0))
        return grad @ self.weight.value.T

    def params(self):
        return [self.weight, self.bias]

    def clear_cache(self):
        self._x = None

    def spec(self):
        return {"kind": "dense", "in_dim": self.in_dim, "out_dim": self.out_dim,
                "init": self.init}


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        mask = self._require_cache(self._mask)
        return np.where(mask, grad, 0.0)

    def clear_cache(self):
        self._mask = None

    def spec(self):
        return {"kind": "relu"}


class Sigmoid(Layer):
    def __init__(self):
        self._y = None

    def forward(self, x):
        # Split by sign for numerical stability.
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        self._y = y
        return y

    def backward(self, grad):
        y = self._require_cache(self._y)
        return grad * y * (1.0 - y)

    def clear_cache(self):
        self._y = None

    def spec(self):
        return {"kind": "sigmoid"}


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        shape = self._require_cache(self._shape, "shape")
        return grad.reshape(shape)

    def clear_cache(self):
        self._shape = None

    def spec(self):
        return {"kind": "flatten"}


class NearestUpsample(Layer):
    """Nearest-neighbour spatial upsampling by an integer factor."""

    def __init__(self, scale: int = 2):
        self.scale = scale
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return np.repeat(np.repeat(x, self.scale, axis=2), self.scale, axis=3)

    def backward(self, grad):
        n, c, h, w = self._require_cache(self._shape, "shape")
        s = self.scale
        return grad.reshape(n, c, h, s, w, s).sum(axis=(3, 5))

    def clear_cache(self):
        self._shape = None

    def spec(self):
        return {"kind": "nearest-upsample", "scale": self.scale}


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def clear_cache(self):
        for layer in self.layers:
            layer.clear_cache()

    def spec(self):
        return {"kind": "sequential", "layers": [l.spec() for l in self.layers]}


_LAYER_BUILDERS = {
    "relu": lambda s: ReLU(),
    "sigmoid": lambda s: Sigmoid(),
    "flatten": lambda s: Flatten(),
    "nearest-upsample": lambda s: NearestUpsample(s["scale"]),
    "conv2d": lambda s: Conv2D(s["in_ch"], s["out_ch"], s["kernel"], s["stride"], s["pad"],
                               init=s.get("init", "he"), rng=np.random.default_rng(0)),
    "dense": lambda s: Dense(s["in_dim"], s["out_dim"], init=s.get("init", "he"),
                             rng=np.random.default_rng(0)),
    "sequential": lambda s: Sequential([layer_from_spec(x) for x in s["layers"]]),
}


def layer_from_spec(spec: dict) -> Layer:
    kind = spec.get("kind")
    if kind not in _LAYER_BUILDERS:
        raise ClogcdError(f"unknown layer kind {kind!r} in spec")
    return _LAYER_BUILDERS[kind](spec)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def zero_grads(params: list[Parameter]):
    for p in params:
        p.zero_grad()


def sgd_step(params: list[Parameter], grads: list[np.ndarray] | None = None, *,
             lr: float, l2_lambda: float = 0.0, batch_size: int = 1):
    """One SGD update: p <- p - lr * (g/batch_size + l2 * p).

    ``grads`` defaults to each parameter's accumulated gradient, which is
    already a mini-batch mean when the loss is a batch mean (pass
    batch_size=1 then). L2 decay skips biases.
    """
    if lr < 0:
        raise ClogcdError("lr must be >= 0")
    if l2_lambda < 0:
        raise ClogcdError("l2_lambda must be >= 0")
    if grads is None:
        grads = [p.grad for p in params]
    for p, g in zip(params, grads):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {p.name or 'parameter'}")
        step = g / batch_size
        if l2_lambda and not p.is_bias:
            step = step + l2_lambda * p.value
        p.value = p.value - lr * step


class Adam:
    """Adam with fixed beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: list[Parameter], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient for {p.name or 'parameter'}")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Layer, meta: dict | None = None):
    """Write layer specs + parameter arrays; round-trips bit-exactly."""
    arrays = {f"p{i}": p.value for i, p in enumerate(model.params())}
    header = {"arch": model.spec(), "meta": meta or {}}
    np.savez(path, __header__=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path):
    """Rebuild the model saved by save_checkpoint; returns (model, meta)."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        model = layer_from_spec(header["arch"])
        params = model.params()
        for i, p in enumerate(params):
            stored = data[f"p{i}"]
            if stored.shape != p.value.shape:
                raise ClogcdError(f"checkpoint shape mismatch at parameter {i}: "
                                  f"{stored.shape} vs {p.value.shape}")
            p.value = stored
    return model, header["meta"]
