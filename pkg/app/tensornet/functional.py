import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.errors import TensorError
from app.tensornet.tensor import Tensor, as_tensor

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


def _pad_pair(pad):
    if isinstance(pad, (tuple, list)):
        before, after = (int(p) for p in pad)
    else:
        before = after = int(pad)
    if before < 0 or after < 0:
        raise TensorError(f"padding must be nonnegative, got {pad}")
    return before, after


def conv_output_size(size, kernel, stride, pad):
    before, after = _pad_pair(pad)
    span = size + before + after - kernel
    if stride < 1 or span < 0 or span % stride:
        raise TensorError(
            f"non-integer output size: ({size} + {before} + {after} - {kernel}) / {stride} + 1")
    return span // stride + 1


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of NCHW input with OIkk weights.

    `pad` is an int or a (before, after) pair applied to both spatial axes.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise TensorError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    n, _, h, width = x.shape
    o, _, kh, kw = w.shape
    before, after = _pad_pair(pad)
    out_h = conv_output_size(h, kh, stride, pad)
    out_w = conv_output_size(width, kw, stride, pad)

    padded = np.pad(x.data, ((0, 0), (0, 0), (before, after), (before, after)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    data = np.einsum('nchwij,ocij->nohw', windows, w.data, optimize=True)
    children = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise TensorError(f"conv2d bias must have shape ({o},), got {b.shape}")
        data = data + b.data[None, :, None, None]
        children = (x, w, b)
    out = Tensor(data, children, 'conv2d')

    def _backward():
        grad = out.grad
        w.grad += np.einsum('nchwij,nohw->ocij', windows, grad, optimize=True)
        if b is not None:
            b.grad += grad.sum(axis=(0, 2, 3))
        dpadded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                dpadded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += np.einsum(
                    'nohw,oc->nchw', grad, w.data[:, :, i, j], optimize=True)
        x.grad += dpadded[:, :, before:before + h, before:before + width]
    out._backward = _backward
    return out


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=BN_MOMENTUM, eps=BN_EPSILON):
    """Per-channel normalisation of NCHW input.

    In training mode the batch statistics are used and the running buffers
    are updated in place as running = momentum * running + (1 - momentum) * batch.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise TensorError(f"batch_norm shape mismatch: input {x.shape}, gamma {gamma.shape}")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if x.shape[0] < 2:
            raise TensorError("batch_norm in training mode needs a batch of at least 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var * count / max(count - 1, 1)
    else:
        mean, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None],
                 (x, gamma, beta), 'batch_norm')

    def _backward():
        grad = out.grad
        gamma.grad += (grad * x_hat).sum(axis=axes)
        beta.grad += grad.sum(axis=axes)
        dx_hat = grad * gamma.data[None, :, None, None]
        scale = inv_std[None, :, None, None]
        if training:
            sum_dx = dx_hat.sum(axis=axes, keepdims=True)
            sum_dx_xhat = (dx_hat * x_hat).sum(axis=axes, keepdims=True)
            x.grad += scale / count * (count * dx_hat - sum_dx - x_hat * sum_dx_xhat)
        else:
            x.grad += dx_hat * scale
    out._backward = _backward
    return out


def relu(x):
    return as_tensor(x).relu()


def sigmoid(x):
    return as_tensor(x).sigmoid()


def global_avg_pool(x):
    """Spatial mean per channel: N x C x H x W -> N x C."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise TensorError(f"global_avg_pool expects NCHW, got {x.shape}")
    return x.mean(axis=(2, 3))


def linear(x, w, b=None):
    """Affine map x @ w.T + b with w shaped (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise TensorError(f"fc shape mismatch: input {x.shape}, weight {w.shape}")
    out = x @ w.T
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise TensorError(f"fc bias must have shape ({w.shape[0]},), got {b.shape}")
        out = out + b
    return out


def se_block(x, w1, b1, w2, b2, reduction):
    """Squeeze-and-excitation: x scaled per channel by sigmoid(fc2(relu(fc1(gap(x)))))."""
    x = as_tensor(x)
    channels = x.shape[1]
    if reduction < 1 or channels % reduction:
        raise TensorError(f"{channels} channels are not divisible by reduction {reduction}")
    if as_tensor(w1).shape != (channels // reduction, channels):
        raise TensorError(f"SE squeeze weight must be ({channels // reduction}, {channels})")
    squeezed = global_avg_pool(x)
    excitation = sigmoid(linear(relu(linear(squeezed, w1, b1)), w2, b2))
    return x * excitation.reshape(x.shape[0], channels, 1, 1)


def softmax(logits):
    """Row-wise softmax of a numpy array (no graph)."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _target_matrix(targets, n, c):
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape[0] != n:
            raise TensorError(f"expected {n} targets, got {targets.shape[0]}")
        index = targets.astype(np.int64)
        if index.size and (index.min() < 0 or index.max() >= c):
            raise TensorError(f"class targets must lie in [0, {c})")
        one_hot = np.zeros((n, c))
        one_hot[np.arange(n), index] = 1.0
        return one_hot
    targets = targets.astype(np.float64)
    if targets.shape != (n, c):
        raise TensorError(f"target distribution must have shape {(n, c)}, got {targets.shape}")
    if np.any(targets < 0) or not np.allclose(targets.sum(axis=1), 1.0, atol=1e-9):
        raise TensorError("target rows must be nonnegative and sum to 1")
    return targets


def softmax_ce(logits, targets, weights=None):
    """Mean over the batch of -sum(target * log_softmax(logits)).

    Targets are class indices or N x C distributions; optional per-sample
    weights scale each row's loss (constants, no gradient).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise TensorError(f"softmax_ce expects N x C logits, got {logits.shape}")
    n, c = logits.shape
    t = _target_matrix(targets, n, c)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(n)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    per_sample = -(t * log_probs).sum(axis=1)
    out = Tensor((w * per_sample).sum() / n, (logits,), 'softmax_ce')

    def _backward():
        probs = np.exp(log_probs)
        logits.grad += out.grad * (probs - t) * w[:, None] / n
    out._backward = _backward
    return out
