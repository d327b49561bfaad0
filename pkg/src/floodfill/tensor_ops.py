"""Dense 3D tensor primitives: convolution, ReLU, logistic loss, gradient checking.

Feature maps are numpy arrays with axes (channel, z, y, x) in C order, so x is
the fastest-varying axis. The convolution and loss ops also accept a leading
batch axis. float32 is the training default; tests and gradient checks run in
float64.

All functions here are pure: they never mutate their inputs and hold no state,
so they are safe to call concurrently from any number of worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

KERNEL_EXTENT = 3  # spatial taps per axis; all kernels are 3x3x3


class ShapeMismatchError(ValueError):
    """Shapes of inputs/kernels/gradients are inconsistent."""


@dataclass
class ConvKernel:
    """3x3x3 convolution weights of shape (out_features, in_features, 3, 3, 3)
    plus a bias vector of length out_features."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights)
        b = np.asarray(self.bias)
        if w.ndim != 5 or w.shape[2:] != (KERNEL_EXTENT,) * 3:
            raise ShapeMismatchError(
                f"kernel weights must be (out, in, 3, 3, 3), got {w.shape}"
            )
        if b.shape != (w.shape[0],):
            raise ShapeMismatchError(
                f"bias length {b.shape} does not match out_features {w.shape[0]}"
            )
        self.weights = w
        self.bias = b

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]

    def astype(self, dtype) -> "ConvKernel":
        return ConvKernel(self.weights.astype(dtype), self.bias.astype(dtype))


def _im2col(x: np.ndarray) -> np.ndarray:
    """Unfold a zero-padded SAME neighborhood around every voxel.

    x: (C, Z, Y, X) or (B, C, Z, Y, X).
    Returns (C*27, N) or (B, C*27, N) with N = Z*Y*X, laid out so that a plain
    matmul with weights.reshape(out, C*27) performs the convolution.
    """
    spatial = x.shape[-3:]
    xp = np.zeros(x.shape[:-3] + tuple(d + 2 for d in spatial), dtype=x.dtype)
    xp[..., 1:-1, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (KERNEL_EXTENT,) * 3, axis=(-3, -2, -1))
    n = spatial[0] * spatial[1] * spatial[2]
    if x.ndim == 4:
        cols = win.transpose(0, 4, 5, 6, 1, 2, 3)
        return np.ascontiguousarray(cols).reshape(x.shape[0] * 27, n)
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return np.ascontiguousarray(cols).reshape(x.shape[0], x.shape[1] * 27, n)


def _check_conv_input(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim not in (4, 5):
        raise ShapeMismatchError(
            f"conv3d input must be (C, Z, Y, X) or (B, C, Z, Y, X), got {x.shape}"
        )
    if x.shape[-4] != kernel.in_features:
        raise ShapeMismatchError(
            f"input channel dim is {x.shape[-4]}, kernel expects {kernel.in_features}"
        )
    return x


def conv3d_forward(x: np.ndarray, kernel: ConvKernel, return_cols: bool = False):
    """Stride-1, zero-padded SAME 3D convolution.

    Output spatial shape equals the input spatial shape; each output voxel is
    the windowed dot product of the input with the kernel plus the bias.
    With return_cols=True also returns the unfolded input columns so a later
    conv3d_backward can skip recomputing them.
    """
    x = _check_conv_input(x, kernel)
    dtype = kernel.weights.dtype
    cols = _im2col(x.astype(dtype, copy=False))
    w_mat = kernel.weights.reshape(kernel.out_features, -1)
    out = np.matmul(w_mat, cols)
    spatial = x.shape[-3:]
    if x.ndim == 4:
        out = out.reshape((kernel.out_features,) + spatial)
        out += kernel.bias.reshape(-1, 1, 1, 1)
    else:
        out = out.reshape((x.shape[0], kernel.out_features) + spatial)
        out += kernel.bias.reshape(1, -1, 1, 1, 1)
    if return_cols:
        return out, cols
    return out


def conv3d_backward(
    x: np.ndarray,
    kernel: ConvKernel,
    grad_out: np.ndarray,
    cols: np.ndarray | None = None,
) -> tuple[np.ndarray, ConvKernel]:
    """Exact gradients of conv3d_forward.

    Returns (grad_input, grad_kernel) where grad_kernel is a ConvKernel whose
    weights/bias hold the gradients. grad_out must have the shape of the
    matching forward output. `cols` may pass the unfolded columns a
    conv3d_forward(..., return_cols=True) produced for the same x.
    """
    x = _check_conv_input(x, kernel)
    grad_out = np.asarray(grad_out)
    expected = x.shape[:-4] + (kernel.out_features,) + x.shape[-3:]
    if grad_out.shape != expected:
        raise ShapeMismatchError(
            f"grad_out shape {grad_out.shape} does not match forward output {expected}"
        )
    dtype = kernel.weights.dtype
    grad_out = grad_out.astype(dtype, copy=False)
    spatial = x.shape[-3:]
    n = spatial[0] * spatial[1] * spatial[2]

    if cols is None:
        cols = _im2col(x.astype(dtype, copy=False))
    if x.ndim == 4:
        go_mat = grad_out.reshape(kernel.out_features, n)
        gw_mat = np.matmul(go_mat, cols.T)
        gb = grad_out.sum(axis=(1, 2, 3))
    else:
        gw_mat = np.zeros((kernel.out_features, kernel.in_features * 27), dtype=dtype)
        go_mat = grad_out.reshape(grad_out.shape[0], kernel.out_features, n)
        for b in range(x.shape[0]):
            gw_mat += np.matmul(go_mat[b], cols[b].T)
        gb = grad_out.sum(axis=(0, 2, 3, 4))
    gw = gw_mat.reshape(kernel.weights.shape)

    # Input gradient of a SAME conv is a SAME conv of grad_out with the kernel
    # transposed over the feature axes and flipped over the spatial taps.
    w_flip = kernel.weights[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    flipped = ConvKernel(
        np.ascontiguousarray(w_flip), np.zeros(kernel.in_features, dtype=dtype)
    )
    grad_x = conv3d_forward(grad_out, flipped)
    return grad_x, ConvKernel(gw, gb)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Subgradient at exactly 0 is defined as 0."""
    return np.where(x > 0, grad_out, 0)


def sigmoid_ce_loss(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean per-voxel sigmoid cross entropy and its gradient w.r.t. the logits.

    loss = mean(-[y*log(sigma(x)) + (1-y)*log(1-sigma(x))]) computed in the
    stable form max(x,0) - x*y + log1p(exp(-|x|)); grad = (sigma(x) - y)/N.
    Labels may be soft, any values in [0, 1].
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape != labels.shape:
        raise ShapeMismatchError(
            f"logits shape {logits.shape} != labels shape {labels.shape}"
        )
    if labels.size and (labels.min() < 0.0 or labels.max() > 1.0):
        raise ValueError("labels must lie in [0, 1]")
    x = logits
    loss_map = np.maximum(x, 0) - x * labels + np.log1p(np.exp(-np.abs(x)))
    loss = float(loss_map.mean())
    grad = (expit(x) - labels) / x.size
    return loss, grad.astype(logits.dtype, copy=False)


def finite_difference_check(
    f,
    point: np.ndarray,
    epsilon: float = 1e-5,
    indices=None,
) -> float:
    """Compare an analytic gradient against central finite differences.

    f maps a flat float vector to (scalar value, flat gradient). Returns the
    max relative error over the checked coordinates, with denominator
    max(|analytic|, |numeric|, 1e-8). `indices` restricts the check to those
    coordinates (default: all of them).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    point = np.asarray(point, dtype=np.float64)
    value, grad = f(point)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise ValueError("function value or gradient is not finite")
    if indices is None:
        indices = range(point.size)
    worst = 0.0
    for i in indices:
        shifted = point.copy()
        shifted[i] += epsilon
        up, _ = f(shifted)
        shifted[i] -= 2 * epsilon
        down, _ = f(shifted)
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        numeric = (up - down) / (2 * epsilon)
        analytic = float(grad[i])
        err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, err)
    return worst
