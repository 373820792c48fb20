"""The fixed operator set: everything the dense-block network and its losses need.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients.
"""
import numpy as np

from .. import kernels
from .tensor import Tensor, as_tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# gradient checking registers lists here to capture ReLU activation patterns
relu_observers = []


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise and reductions

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, "add", (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, "sub", (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, "mul", (a, b), backward)


def sum(x):  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(x.data.sum(), "sum", (x,), backward)


def mean(x):
    n = x.size

    def backward(g):
        return (np.full(x.shape, g / n),)

    return Tensor._from_op(x.data.mean(), "mean", (x,), backward)


def square_sum(x):
    """Sum of squares, i.e. the squared Frobenius norm."""

    def backward(g):
        return (2.0 * g * x.data,)

    return Tensor._from_op(np.sum(x.data * x.data), "square_sum", (x,), backward)


def relu(x):
    mask = x.data > 0
    for obs in relu_observers:
        obs.append(mask)

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, x.data, 0.0), "relu", (x,), backward)


def tanh(x):
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return Tensor._from_op(y, "tanh", (x,), backward)


def linear(x, weight, bias=None):
    """``x[N, in] @ weight[out, in].T + bias[out]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = (g @ weight.data, g.T @ x.data)
        if bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    return Tensor._from_op(out, "linear", inputs, backward)


# structural ops

def concat(tensors, axis=1):
    """Concatenate along ``axis``; all other dims must agree."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ValueError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, "concat", tuple(tensors), backward)


def concat_channels(tensors):
    return concat(tensors, axis=1)


def split(x, sizes, axis=1):
    """Inverse of :func:`concat`: slice ``x`` into pieces of the given sizes."""
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ValueError(f"split: sizes {sizes} do not cover axis of length {x.shape[axis]}")
    pieces = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        pieces.append(Tensor._from_op(x.data[index].copy(), "split", (x,), backward))
        start += size
    return pieces


def global_avg_pool(x):
    """``[N, C, H, W] -> [N, C]``."""
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=(2, 3)), "global_avg_pool", (x,), backward)


def avg_pool2x2(x):
    """2x2 average pooling with stride 2; odd trailing rows/cols are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ValueError(f"avg_pool2x2: spatial size {h}x{w} too small")
    cropped = x.data[:, :, : 2 * ho, : 2 * wo]
    out = cropped.reshape(n, c, ho, 2, wo, 2).mean(axis=(3, 5))

    def backward(g):
        full = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
        full[:, :, : 2 * ho, : 2 * wo] = spread
        return (full,)

    return Tensor._from_op(out, "avg_pool2x2", (x,), backward)


# convolution and normalisation

def conv2d(x, kernel, stride=1, pad=0):
    """Cross-correlation of ``x[N, C, H, W]`` with ``kernel[K, C, k, k]``.

    Square kernels of size 1 or 3, stride 1 or 2, padding 0 or 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    k_out, k_in, kh, kw = kernel.shape
    if k_in != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {k_in}")
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"conv2d: unsupported kernel size {kh}x{kw}")
    if stride not in (1, 2) or pad not in (0, 1):
        raise ValueError(f"conv2d: unsupported stride={stride} pad={pad}")
    ho = kernels.conv_out_size(h, kh, stride, pad)
    wo = kernels.conv_out_size(w, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: spatial size {h}x{w} too small")

    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = kernel.data.reshape(k_out, -1)
    out = (wmat @ cols).reshape(k_out, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(k_out, -1)
        dw = (g2 @ cols.T).reshape(kernel.shape)
        dx = None
        if x.requires_grad:
            dx = kernels.col2im(wmat.T @ g2, x.shape, kh, kw, stride, pad)
        return dx, dw

    return Tensor._from_op(np.ascontiguousarray(out), "conv2d", (x, kernel), backward)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalisation of ``x[N, C, H, W]``.

    In training mode the batch statistics are used and the running buffers
    (plain numpy arrays) are updated in place; in eval mode the buffers are
    used as-is.
    """
    n, c, h, w = x.shape
    if n == 0:
        raise ValueError("batchnorm2d: empty batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    m = n * h * w
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mu[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.copy()
        var = running_var.copy()
        centered = x.data - mu[None, :, None, None]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (dxhat - s1 / m - xhat * s2 / m) * inv_std[None, :, None, None]
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return Tensor._from_op(out, "batchnorm2d", (x, gamma, beta), backward)


# probabilities and losses

def softmax_array(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    p = softmax_array(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(p, "softmax", (x,), backward)


def softmax_cross_entropy(logits, target):
    """Per-sample cross entropy ``-sum_k y_k log softmax(z)_k``, shape ``[N]``.

    ``target`` is a distribution per row (one-hot or smoothed); it is treated
    as a constant.
    """
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if logits.ndim != 2 or y.shape != logits.shape:
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape} vs target {y.shape}")
    if logits.shape[1] < 2:
        raise ValueError("softmax_cross_entropy needs at least 2 classes")
    row_sums = y.sum(axis=1)
    if np.any(y < 0) or np.any(np.abs(row_sums - 1.0) > 1e-9):
        raise ValueError("softmax_cross_entropy: target rows must be distributions summing to 1")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    log_p = z - lse[:, None]
    loss = -(y * log_p).sum(axis=1)
    p = np.exp(log_p)

    def backward(g):
        return (g[:, None] * (p * row_sums[:, None] - y),)

    return Tensor._from_op(loss, "softmax_cross_entropy", (logits,), backward)
