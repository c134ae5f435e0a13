"""Minimal tensor math for kilobyte-scale transformers.

Plain numpy throughout, with hand-written backward passes instead of an
autodiff graph: each layer caches what its backward pass needs when
``cache=True`` is passed to forward, and training code calls matching
forward/backward pairs. Inference paths pass ``cache=False`` and write
nothing, so a frozen model can serve several threads at once.

Default dtype is float32; gradient-check tests build float64 models.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DomainError, EmptyInputError, ShapeError

DEFAULT_DTYPE = np.float32

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def make_rng(seed) -> np.random.Generator:
    """Deterministic PRNG stream. All randomness in the package flows
    through generators created here; there is no ambient entropy."""
    return np.random.default_rng(seed)


def spawn_rngs(seed, n: int) -> list[np.random.Generator]:
    """n independent child streams derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


class Parameter:
    """A named tensor plus an accumulated gradient of the same shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def copy_from(self, other: "Parameter"):
        if other.value.shape != self.value.shape:
            raise ShapeError(
                f"{self.name}: cannot copy {other.value.shape} into {self.value.shape}"
            )
        np.copyto(self.value, other.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def trunc_normal(shape, std: float = 0.02, rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal(0, std) truncated to +/- 2 std by redrawing out-of-range values."""
    if std <= 0:
        raise DomainError(f"std must be positive, got {std}")
    if rng is None:
        raise DomainError("trunc_normal needs an explicit rng")
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot matmul {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(dout: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of sum(dout * (a @ b)) wrt a and b."""
    da = dout @ np.swapaxes(b, -1, -2)
    db = np.swapaxes(a, -1, -2) @ dout
    return da, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(x.dtype)


def gelu(x: np.ndarray) -> np.ndarray:
    # exact erf form, not the tanh approximation
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (cdf + x * pdf).astype(x.dtype)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def normalize_rows(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Parameter-free layer normalization along the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


# ---------------------------------------------------------------------------
# attention (functional core shared with the layer class)
# ---------------------------------------------------------------------------

def _split_heads(x, heads):
    n, t, d = x.shape
    return x.reshape(n, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    n, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, t, h * dh)


def _attention_forward(q, k, v, heads):
    scale = 1.0 / math.sqrt(q.shape[-1] // heads)
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    weights = softmax(scores)
    y = _merge_heads(weights @ vh)
    return y, (qh, kh, vh, weights, scale)


def _attention_backward(dy, cache, heads):
    qh, kh, vh, weights, scale = cache
    dctx = _split_heads(dy, heads)
    dw = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = weights.transpose(0, 1, 3, 2) @ dctx
    ds = weights * (dw - (dw * weights).sum(axis=-1, keepdims=True))
    dqh = (ds @ kh) * scale
    dkh = (ds.transpose(0, 1, 3, 2) @ qh) * scale
    return _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int = 1) -> np.ndarray:
    """softmax(q k^T / sqrt(d_head)) v per head, heads concatenated.

    Accepts (T, d) or (batch, T, d); softmax rows are max-stabilized.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = q[None], k[None], v[None]
    if q.ndim != 3:
        raise ShapeError(f"expected (T, d) or (B, T, d), got {q.shape}")
    if q.shape[-1] % heads != 0:
        raise ConfigError(f"d={q.shape[-1]} not divisible by heads={heads}")
    y, _ = _attention_forward(q, k, v, heads)
    return y[0] if squeeze else y


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Linear:
    def __init__(self, name, d_in, d_out, rng, dtype=DEFAULT_DTYPE, std=0.02):
        self.weight = Parameter(name + ".weight", trunc_normal((d_in, d_out), std, rng, dtype))
        self.bias = Parameter(name + ".bias", np.zeros(d_out, dtype=dtype))
        self._x = None

    def forward(self, x, cache=False):
        if x.shape[-1] != self.weight.value.shape[0]:
            raise ShapeError(
                f"{self.weight.name}: input width {x.shape[-1]} != {self.weight.value.shape[0]}"
            )
        if cache:
            self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, dout):
        x = self._x
        x2 = x.reshape(-1, x.shape[-1])
        d2 = dout.reshape(-1, dout.shape[-1])
        self.weight.grad += x2.T @ d2
        self.bias.grad += d2.sum(axis=0)
        return dout @ self.weight.value.T

    def parameters(self):
        return [self.weight, self.bias]


class LayerNorm:
    """Row-wise normalization with the population-variance (1/d) convention."""

    def __init__(self, name, d, dtype=DEFAULT_DTYPE, eps=1e-6):
        if d == 0:
            raise ShapeError("layernorm over zero-width rows")
        self.gain = Parameter(name + ".gain", np.ones(d, dtype=dtype))
        self.bias = Parameter(name + ".bias", np.zeros(d, dtype=dtype))
        self.eps = eps
        self._xhat = None
        self._inv = None

    def forward(self, x, cache=False):
        if x.shape[-1] != self.gain.size:
            raise ShapeError(f"{self.gain.name}: width {x.shape[-1]} != {self.gain.size}")
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        if cache:
            self._xhat, self._inv = xhat, inv
        return xhat * self.gain.value + self.bias.value

    def backward(self, dout):
        xhat, inv = self._xhat, self._inv
        d = xhat.shape[-1]
        flat = dout.reshape(-1, d)
        self.gain.grad += (flat * xhat.reshape(-1, d)).sum(axis=0)
        self.bias.grad += flat.sum(axis=0)
        dxhat = dout * self.gain.value
        return inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )

    def parameters(self):
        return [self.gain, self.bias]


class MultiHeadAttention:
    """Self-attention with learned q/k/v/out projections (biases included)."""

    def __init__(self, name, d, heads, rng, dtype=DEFAULT_DTYPE):
        if d % heads != 0:
            raise ConfigError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.q = Linear(name + ".q", d, d, rng, dtype)
        self.k = Linear(name + ".k", d, d, rng, dtype)
        self.v = Linear(name + ".v", d, d, rng, dtype)
        self.out = Linear(name + ".out", d, d, rng, dtype)
        self._core = None

    def forward(self, x, cache=False):
        q = self.q.forward(x, cache)
        k = self.k.forward(x, cache)
        v = self.v.forward(x, cache)
        y, core = _attention_forward(q, k, v, self.heads)
        if cache:
            self._core = core
        return self.out.forward(y, cache)

    def backward(self, dout):
        dy = self.out.backward(dout)
        dq, dk, dv = _attention_backward(dy, self._core, self.heads)
        return self.q.backward(dq) + self.k.backward(dk) + self.v.backward(dv)

    def parameters(self):
        return self.q.parameters() + self.k.parameters() + self.v.parameters() + self.out.parameters()


class Mlp:
    def __init__(self, name, d, hidden, activation, rng, dtype=DEFAULT_DTYPE):
        if activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.activation = activation
        self.fc1 = Linear(name + ".fc1", d, hidden, rng, dtype)
        self.fc2 = Linear(name + ".fc2", hidden, d, rng, dtype)
        self._pre = None

    def forward(self, x, cache=False):
        h = self.fc1.forward(x, cache)
        if cache:
            self._pre = h
        a = relu(h) if self.activation == "relu" else gelu(h)
        return self.fc2.forward(a, cache)

    def backward(self, dout):
        da = self.fc2.backward(dout)
        g = relu_grad(self._pre) if self.activation == "relu" else gelu_grad(self._pre)
        return self.fc1.backward(da * g)

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()


class EncoderBlock:
    """Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(.))."""

    def __init__(self, name, d, heads, hidden, activation, rng, dtype=DEFAULT_DTYPE):
        self.ln1 = LayerNorm(name + ".ln1", d, dtype=dtype)
        self.attn = MultiHeadAttention(name + ".attn", d, heads, rng, dtype)
        self.ln2 = LayerNorm(name + ".ln2", d, dtype=dtype)
        self.mlp = Mlp(name + ".mlp", d, hidden, activation, rng, dtype)

    def forward(self, x, cache=False):
        a = x + self.attn.forward(self.ln1.forward(x, cache), cache)
        return a + self.mlp.forward(self.ln2.forward(a, cache), cache)

    def backward(self, dout):
        da = dout + self.ln2.backward(self.mlp.backward(dout))
        return da + self.ln1.backward(self.attn.backward(da))

    def parameters(self):
        return (
            self.ln1.parameters() + self.attn.parameters()
            + self.ln2.parameters() + self.mlp.parameters()
        )


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(n, kernel, stride, padding):
    out = (n + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise ShapeError(
            f"conv output empty: n={n}, kernel={kernel}, stride={stride}, padding={padding}"
        )
    return out


def _im2col(x, kernel, stride, padding):
    """(B, C, H, W) -> (B, Ho, Wo, C, k, k) view-copies of each receptive field."""
    b, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, ho, wo, c, kernel, kernel), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, :, :, i, j] = x[
                :, :, i : i + ho * stride : stride, j : j + wo * stride : stride
            ].transpose(0, 2, 3, 1)
    return cols


def _col2im(dcols, x_shape, kernel, stride, padding):
    b, c, h, w = x_shape
    ho, wo = dcols.shape[1], dcols.shape[2]
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of (B, C_in, H, W) with (C_out, C_in, k, k)."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d shapes incompatible: {x.shape} with {kernel.shape}")
    k = kernel.shape[2]
    cols = _im2col(x, k, stride, padding)
    y = np.tensordot(cols, kernel, axes=([3, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, C_out)
    if bias is not None:
        y = y + bias
    return y.transpose(0, 3, 1, 2)


class Conv2d:
    def __init__(self, name, c_in, c_out, kernel, stride=1, padding=0,
                 rng=None, dtype=DEFAULT_DTYPE, std=0.02):
        self.kernel_size = kernel
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(
            name + ".weight", trunc_normal((c_out, c_in, kernel, kernel), std, rng, dtype)
        )
        self.bias = Parameter(name + ".bias", np.zeros(c_out, dtype=dtype))
        self._cols = None
        self._x_shape = None

    def forward(self, x, cache=False):
        if x.shape[1] != self.weight.value.shape[1]:
            raise ShapeError(
                f"{self.weight.name}: {x.shape[1]} input channels, expected "
                f"{self.weight.value.shape[1]}"
            )
        cols = _im2col(x, self.kernel_size, self.stride, self.padding)
        if cache:
            self._cols, self._x_shape = cols, x.shape
        y = np.tensordot(cols, self.weight.value, axes=([3, 4, 5], [1, 2, 3]))
        return (y + self.bias.value).transpose(0, 3, 1, 2)

    def backward(self, dout):
        dflat = dout.transpose(0, 2, 3, 1)  # (B, Ho, Wo, C_out)
        self.weight.grad += np.tensordot(dflat, self._cols, axes=([0, 1, 2], [0, 1, 2]))
        self.bias.grad += dflat.reshape(-1, dflat.shape[-1]).sum(axis=0)
        dcols = np.tensordot(dflat, self.weight.value, axes=([3], [0]))
        return _col2im(dcols, self._x_shape, self.kernel_size, self.stride, self.padding)

    def parameters(self):
        return [self.weight, self.bias]


# ---------------------------------------------------------------------------
# losses (value and gradient-wrt-prediction pairs)
# ---------------------------------------------------------------------------

def _require_same_shape(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")


def huber(pred, target, delta=1.0) -> float:
    """Mean over elements of 0.5 e^2 for |e| <= delta, else delta(|e| - delta/2)."""
    _require_same_shape(pred, target)
    e = pred - target
    ae = np.abs(e)
    per = np.where(ae <= delta, 0.5 * e * e, delta * (ae - 0.5 * delta))
    return float(per.mean())


def huber_grad(pred, target, delta=1.0):
    _require_same_shape(pred, target)
    e = pred - target
    g = np.where(np.abs(e) <= delta, e, delta * np.sign(e))
    return (g / e.size).astype(pred.dtype)


def mse(pred, target) -> float:
    _require_same_shape(pred, target)
    e = pred - target
    return float((e * e).mean())


def mse_grad(pred, target):
    _require_same_shape(pred, target)
    e = pred - target
    return (2.0 * e / e.size).astype(pred.dtype)


def cross_entropy(logits, labels) -> float:
    """Mean negative log softmax probability of the true class, log-sum-exp stabilized."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"expected (B, C) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DomainError(f"labels outside [0, {logits.shape[1]})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(labels)), labels]
    return float(nll.mean())


def cross_entropy_grad(logits, labels):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DomainError(f"labels outside [0, {logits.shape[1]})")
    p = softmax(logits, axis=1)
    p[np.arange(len(labels)), labels] -= 1.0
    return (p / len(labels)).astype(logits.dtype)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a fixed parameter list. Deterministic."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        if not self.params:
            raise EmptyInputError("optimizer needs at least one parameter")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(opt: Adam):
    """One optimizer step followed by a gradient reset."""
    opt.step()
    opt.zero_grad()
