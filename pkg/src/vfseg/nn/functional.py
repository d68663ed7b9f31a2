"""Forward and manual backward passes for every layer the models use.

All arrays are C-contiguous float64. Convolutions use cross-correlation
semantics (no kernel flip). Scatter-adds go through np.bincount, which
accumulates in index order, so repeated runs are bitwise identical.
"""

from __future__ import annotations

import functools

import numpy as np

from ..errors import ConfigurationError, DimensionError, StateError, ValidationError
from .params import BatchNormState, LayerParams, Tensor


def conv_out_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    """Output extent (E + 2p - K) / s + 1; non-exact division is rejected."""
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    span = extent + 2 * pad - kernel
    if span < 0:
        raise DimensionError(
            f"kernel {kernel} larger than padded extent {extent + 2 * pad}"
        )
    if span % stride != 0:
        raise DimensionError(
            f"extent {extent} with kernel {kernel}, stride {stride}, pad {pad} "
            "does not tile exactly"
        )
    return span // stride + 1


def _pad2d(x: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _window_view(x: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    """Read-only view of sliding windows: (B, C, kh, kw, Ho, Wo)."""
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def _im2col(x_padded: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    """(B, C*kh*kw, Ho*Wo) patch matrix; rows ordered (c, kh, kw)."""
    view = _window_view(x_padded, kh, kw, stride)
    b = view.shape[0]
    ho, wo = view.shape[4], view.shape[5]
    return view.reshape(b, -1, ho * wo)


@functools.lru_cache(maxsize=128)
def _col2im_indices(c: int, hp: int, wp: int, kh: int, kw: int, stride: int,
                    ho: int, wo: int) -> Tensor:
    """Flat target index into (c, hp, wp) for each im2col cell; cached per shape."""
    ci = np.arange(c)[:, None, None, None, None]
    khi = np.arange(kh)[None, :, None, None, None]
    kwi = np.arange(kw)[None, None, :, None, None]
    ohi = np.arange(ho)[None, None, None, :, None]
    owi = np.arange(wo)[None, None, None, None, :]
    idx = ci * (hp * wp) + (ohi * stride + khi) * wp + (owi * stride + kwi)
    idx = np.ascontiguousarray(idx.reshape(-1))
    idx.flags.writeable = False
    return idx


def _col2im(cols: Tensor, c: int, hp: int, wp: int, kh: int, kw: int,
            stride: int, ho: int, wo: int) -> Tensor:
    """Scatter-add im2col columns back onto a (B, c, hp, wp) canvas."""
    b = cols.shape[0]
    idx = _col2im_indices(c, hp, wp, kh, kw, stride, ho, wo)
    out = np.empty((b, c * hp * wp))
    for i in range(b):
        out[i] = np.bincount(idx, weights=cols[i].ravel(), minlength=c * hp * wp)
    return out.reshape(b, c, hp, wp)


def _unpad2d(x: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return x
    return np.ascontiguousarray(x[:, :, pad:-pad, pad:-pad])


def _require_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} must be 4-d (B, C, H, W), got shape {x.shape}")


# ---------------------------------------------------------------- conv2d

def conv2d_forward(x: Tensor, params: LayerParams, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate x (B, Cin, H, W) with weights (Cout, Cin, kh, kw)."""
    _require_4d(x, "conv input")
    w = params.weights
    if w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"kernel channels {w.shape} incompatible with input {x.shape}"
        )
    b, _, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = conv_out_extent(h, kh, stride, pad)
    wo = conv_out_extent(wd, kw, stride, pad)
    cols = _im2col(_pad2d(x, pad), kh, kw, stride)
    w_mat = w.reshape(cout, -1)
    out = np.matmul(w_mat, cols)                  # (B, Cout, Ho*Wo)
    if params.has_bias:
        out += params.bias[:, None]
    return out.reshape(b, cout, ho, wo)


def conv2d_backward(grad_out: Tensor, saved_input: Tensor, params: LayerParams,
                    stride: int = 1, pad: int = 0) -> Tensor:
    """Gradient wrt input; accumulates grad_weights / grad_bias in params."""
    _require_4d(grad_out, "conv grad_out")
    w = params.weights
    b, cin, h, wd = saved_input.shape
    cout, _, kh, kw = w.shape
    ho = conv_out_extent(h, kh, stride, pad)
    wo = conv_out_extent(wd, kw, stride, pad)
    if grad_out.shape != (b, cout, ho, wo):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != forward output {(b, cout, ho, wo)}"
        )
    x_padded = _pad2d(saved_input, pad)
    cols = _im2col(x_padded, kh, kw, stride)
    dy = grad_out.reshape(b, cout, ho * wo)

    params.grad_weights += np.matmul(dy, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    if params.has_bias:
        params.grad_bias += grad_out.sum(axis=(0, 2, 3))

    w_mat = w.reshape(cout, -1)
    dcols = np.matmul(w_mat.T, dy)                # (B, Cin*kh*kw, Ho*Wo)
    hp, wp = x_padded.shape[2], x_padded.shape[3]
    dx = _col2im(dcols, cin, hp, wp, kh, kw, stride, ho, wo)
    return _unpad2d(dx, pad)


# ------------------------------------------------------ conv_transpose2d

def conv_transpose2d_forward(x: Tensor, params: LayerParams, stride: int = 1,
                             pad: int = 0) -> Tensor:
    """Adjoint of conv2d. Weights are (Cin, Cout, kh, kw); output spatial
    extent is (E - 1) * stride - 2 * pad + K."""
    _require_4d(x, "conv_transpose input")
    w = params.weights
    if w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"kernel channels {w.shape} incompatible with input {x.shape}"
        )
    b, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wd - 1) * stride - 2 * pad + kw
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"non-positive output extent ({ho}, {wo})")
    w_mat = w.reshape(cin, -1)                    # (Cin, Cout*kh*kw)
    cols = np.matmul(w_mat.T, x.reshape(b, cin, h * wd))
    out = _col2im(cols, cout, ho + 2 * pad, wo + 2 * pad, kh, kw, stride, h, wd)
    out = _unpad2d(out, pad)
    if params.has_bias:
        out += params.bias[None, :, None, None]
    return out


def conv_transpose2d_backward(grad_out: Tensor, saved_input: Tensor, params: LayerParams,
                              stride: int = 1, pad: int = 0) -> Tensor:
    """Gradient wrt input of conv_transpose2d_forward; accumulates param grads."""
    _require_4d(grad_out, "conv_transpose grad_out")
    w = params.weights
    b, cin, h, wd = saved_input.shape
    _, cout, kh, kw = w.shape
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wd - 1) * stride - 2 * pad + kw
    if grad_out.shape != (b, cout, ho, wo):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != forward output {(b, cout, ho, wo)}"
        )
    g_padded = _pad2d(grad_out, pad)
    gcols = _im2col(g_padded, kh, kw, stride)     # (B, Cout*kh*kw, H*W)

    z = saved_input.reshape(b, cin, h * wd)
    params.grad_weights += np.matmul(z, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    if params.has_bias:
        params.grad_bias += grad_out.sum(axis=(0, 2, 3))

    w_mat = w.reshape(cin, -1)
    dx = np.matmul(w_mat, gcols)                  # (B, Cin, H*W)
    return dx.reshape(saved_input.shape)


# -------------------------------------------------------------- maxpool

def maxpool2d_forward(x: Tensor, window: int, stride: int) -> tuple[Tensor, Tensor]:
    """Max over windows; returns (output, argmax index within each window).

    Ties resolve to the lowest flat index in (kh, kw) row-major order,
    which keeps backward routing deterministic.
    """
    _require_4d(x, "maxpool input")
    if window < 1:
        raise ConfigurationError(f"window must be >= 1, got {window}")
    b, c, h, w = x.shape
    if (h - window) % stride != 0 or (w - window) % stride != 0 or h < window or w < window:
        raise DimensionError(
            f"spatial extents ({h}, {w}) not tileable by window {window} stride {stride}"
        )
    view = _window_view(x, window, window, stride)      # (B, C, kh, kw, Ho, Wo)
    ho, wo = view.shape[4], view.shape[5]
    flat = view.transpose(0, 1, 4, 5, 2, 3).reshape(b, c, ho, wo, window * window)
    indices = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, indices[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), indices


def maxpool2d_backward(grad_out: Tensor, indices: Tensor, input_shape: tuple[int, ...],
                       window: int, stride: int) -> Tensor:
    """Route each output gradient to its window argmax position."""
    b, c, h, w = input_shape
    if grad_out.shape != indices.shape:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != indices shape {indices.shape}"
        )
    _, _, ho, wo = grad_out.shape
    oh = np.arange(ho)[None, :, None]
    ow = np.arange(wo)[None, None, :]
    rows = oh * stride + indices // window              # (B*?, broadcast over C)
    cols = ow * stride + indices % window
    ch = np.arange(c)[:, None, None]
    flat_idx = (ch * h + rows) * w + cols               # (B, C, Ho, Wo)
    out = np.empty((b, c * h * w))
    for i in range(b):
        out[i] = np.bincount(flat_idx[i].ravel(), weights=grad_out[i].ravel(),
                             minlength=c * h * w)
    return out.reshape(input_shape)


# ------------------------------------------------------------ batchnorm

def _bn_stats(x: Tensor, eps: float) -> tuple[Tensor, Tensor, Tensor]:
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    return mean, var, inv_std


def batchnorm2d_forward(x: Tensor, params: LayerParams, state: BatchNormState,
                        train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization; train mode updates running statistics."""
    _require_4d(x, "batchnorm input")
    if x.shape[1] != params.weights.shape[0]:
        raise DimensionError(
            f"channel count {x.shape[1]} != parameter channels {params.weights.shape[0]}"
        )
    gamma = params.weights[None, :, None, None]
    beta = params.bias[None, :, None, None]
    if train:
        if x.shape[0] < 2:
            raise ConfigurationError("batch size must be >= 2 in train mode")
        mean, var, inv_std = _bn_stats(x, eps)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        state.running_mean *= 1.0 - momentum
        state.running_mean += momentum * mean
        state.running_var *= 1.0 - momentum
        state.running_var += momentum * var * n / (n - 1)   # unbiased for running stats
        x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        x_hat = (x - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    return gamma * x_hat + beta


def batchnorm2d_backward(grad_out: Tensor, saved_input: Tensor, params: LayerParams,
                         state: BatchNormState, train: bool, eps: float = 1e-5) -> Tensor:
    """Gradient wrt input; batch statistics are recomputed from saved_input."""
    if grad_out.shape != saved_input.shape:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != input shape {saved_input.shape}"
        )
    gamma = params.weights
    if train:
        mean, _, inv_std = _bn_stats(saved_input, eps)
    else:
        mean = state.running_mean
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
    x_hat = (saved_input - mean[None, :, None, None]) * inv_std[None, :, None, None]

    params.grad_bias += grad_out.sum(axis=(0, 2, 3))
    params.grad_weights += (grad_out * x_hat).sum(axis=(0, 2, 3))

    g_scaled = grad_out * gamma[None, :, None, None]
    if not train:
        return g_scaled * inv_std[None, :, None, None]
    n = saved_input.shape[0] * saved_input.shape[2] * saved_input.shape[3]
    sum_g = g_scaled.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_gx = (g_scaled * x_hat).sum(axis=(0, 2, 3))[None, :, None, None]
    return (inv_std[None, :, None, None] / n) * (n * g_scaled - sum_g - x_hat * sum_gx)


# ------------------------------------------------------- pointwise & shape

def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: Tensor, saved_input: Tensor) -> Tensor:
    if grad_out.shape != saved_input.shape:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != input shape {saved_input.shape}"
        )
    return grad_out * (saved_input > 0.0)


def linear_forward(x: Tensor, params: LayerParams) -> Tensor:
    """x (B, In) times weights (Out, In) transposed, plus bias."""
    w = params.weights
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"input {x.shape} incompatible with weights {w.shape}")
    out = x @ w.T
    if params.has_bias:
        out += params.bias
    return out


def linear_backward(grad_out: Tensor, saved_input: Tensor, params: LayerParams) -> Tensor:
    w = params.weights
    if grad_out.ndim != 2 or grad_out.shape != (saved_input.shape[0], w.shape[0]):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} incompatible with weights {w.shape}"
        )
    params.grad_weights += grad_out.T @ saved_input
    if params.has_bias:
        params.grad_bias += grad_out.sum(axis=0)
    return grad_out @ w


def flatten(x: Tensor) -> Tensor:
    """Collapse all axes after the batch axis."""
    return np.ascontiguousarray(x).reshape(x.shape[0], -1)


def unflatten(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Inverse of flatten for a known per-sample shape."""
    expected = int(np.prod(shape))
    if x.ndim != 2 or x.shape[1] != expected:
        raise DimensionError(f"cannot unflatten {x.shape} into per-sample shape {shape}")
    return np.ascontiguousarray(x).reshape((x.shape[0],) + tuple(shape))


# ------------------------------------------------------------------ loss

def _sigmoid(z: Tensor) -> Tensor:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: Tensor, targets: Tensor) -> tuple[float, Tensor]:
    """Mean binary cross-entropy in the overflow-safe log-sum-exp form.

    Returns (loss, gradient wrt logits). Targets must be exactly 0 or 1.
    """
    if logits.shape != targets.shape:
        raise DimensionError(
            f"logits shape {logits.shape} != targets shape {targets.shape}"
        )
    if not np.all((targets == 0.0) | (targets == 1.0)):
        raise ValidationError("targets must be binary (0 or 1)")
    z = logits
    loss = float(np.mean(np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))))
    grad = (_sigmoid(z) - targets) / z.size
    return loss, grad


def require_cache(cache, what: str):
    """Raise StateError when a backward pass runs without its forward cache."""
    if cache is None:
        raise StateError(f"{what}: backward called without a matching forward")
    return cache
