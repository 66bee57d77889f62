"""Differentiable primitives used by the classifier layers and the loss.

Every primitive is a :class:`vrfam.tensor.Function` subclass plus a thin
functional wrapper. Composite operations (dense layers, attention) are built
from the primitives and differentiate through them.
"""

import math
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from vrfam.errors import ConfigurationError, DegenerateBatchError, DimensionError
from vrfam.tensor import Function, Tensor, as_tensor

BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.9
PROBABILITY_FLOOR = 1e-7


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcast to reach ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def same_padding(kernel_size: int) -> Tuple[int, int]:
    """Return ``(left, right)`` zero padding that keeps the temporal length.

    Even kernels put the extra zero on the right.
    """
    return (kernel_size - 1) // 2, kernel_size // 2


class Add(Function):
    def forward(self, a, b):
        try:
            out = a + b
        except ValueError:
            raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None
        self.saved_shapes = (a.shape, b.shape)
        return out

    def backward(self, grad):
        a_shape, b_shape = self.saved_shapes
        return unbroadcast(grad, a_shape), unbroadcast(grad, b_shape)


class Scale(Function):
    def forward(self, a, factor: float = 1.0):
        self.saved_factor = factor
        return (a * factor).astype(a.dtype, copy=False)

    def backward(self, grad):
        return ((grad * self.saved_factor).astype(grad.dtype, copy=False),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} and {b.shape}")
        self.saved_a, self.saved_b = a, b
        if b.ndim == 2:
            # a shared weight: fold the leading axes into one GEMM
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[1])
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.saved_a, self.saved_b
        if b.ndim == 2:
            rows = grad.reshape(-1, b.shape[1])
            grad_a = (rows @ b.T).reshape(a.shape)
            return grad_a, a.reshape(-1, a.shape[-1]).T @ rows
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)


class Transpose(Function):
    def forward(self, a, axes: Sequence[int] = None):
        axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        if sorted(axes) != list(range(a.ndim)):
            raise DimensionError(f"axes {axes} do not permute shape {a.shape}")
        self.saved_axes = axes
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.saved_axes)),)


class Reshape(Function):
    def forward(self, a, shape: Sequence[int] = ()):
        try:
            out = a.reshape(tuple(shape))
        except ValueError:
            raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
        self.saved_shape = a.shape
        return out

    def backward(self, grad):
        return (grad.reshape(self.saved_shape),)


class ReLU(Function):
    def forward(self, a):
        self.saved_mask = a > 0
        return np.where(self.saved_mask, a, 0).astype(a.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.saved_mask,)


class Softmax(Function):
    def forward(self, a, axis: int = -1):
        if a.ndim == 0 or a.shape[axis] == 0:
            raise DimensionError(f"softmax over an empty axis of shape {a.shape}")
        shifted = a - a.max(axis=axis, keepdims=True)
        exps = np.exp(shifted)
        out = exps / exps.sum(axis=axis, keepdims=True)
        self.saved_out, self.saved_axis = out, axis
        return out

    def backward(self, grad):
        out, axis = self.saved_out, self.saved_axis
        inner = (grad * out).sum(axis=axis, keepdims=True)
        return (out * (grad - inner),)


class Mean(Function):
    def forward(self, a, axis: Optional[int] = None):
        self.saved_shape, self.saved_axis = a.shape, axis
        count = a.size if axis is None else a.shape[axis]
        if count == 0:
            raise DimensionError(f"mean over an empty axis of shape {a.shape}")
        return np.asarray(a.mean(axis=axis, dtype=np.float64), dtype=a.dtype)

    def backward(self, grad):
        shape, axis = self.saved_shape, self.saved_axis
        if axis is None:
            count = int(np.prod(shape))
            return (np.broadcast_to(grad / count, shape).astype(grad.dtype),)
        count = shape[axis]
        expanded = np.expand_dims(grad, axis) / count
        return (np.broadcast_to(expanded, shape).astype(grad.dtype),)


class Conv1d(Function):
    """Stride-1 cross-correlation with zero "same" padding.

    Shapes: x [batch, c_in, T], w [c_out, c_in, k], b [c_out] -> [batch, c_out, T].
    """

    def forward(self, x, w, b):
        if x.ndim != 3 or w.ndim != 3 or b.shape != (w.shape[0],):
            raise DimensionError(
                f"conv1d expects x [batch, c_in, T], w [c_out, c_in, k], b [c_out]; "
                f"got {x.shape}, {w.shape}, {b.shape}"
            )
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"conv1d channel mismatch: x {x.shape} and w {w.shape}")
        kernel = w.shape[2]
        left, right = same_padding(kernel)
        length = x.shape[2]
        if kernel > length + left + right:
            raise ConfigurationError(
                f"kernel of size {kernel} is longer than the padded input of length "
                f"{length + left + right}"
            )
        padded = np.pad(x, ((0, 0), (0, 0), (left, right)))
        # cols: [batch * T, c_in * k]
        cols = sliding_window_view(padded, kernel, axis=2).transpose(0, 2, 1, 3)
        cols = np.ascontiguousarray(cols).reshape(x.shape[0] * length, -1)
        flat_w = w.reshape(w.shape[0], -1)
        out = (cols @ flat_w.T + b).reshape(x.shape[0], length, w.shape[0])
        self.saved_cols, self.saved_w = cols, w
        self.saved_geometry = (x.shape, left, right)
        return np.ascontiguousarray(out.transpose(0, 2, 1))

    def backward(self, grad):
        cols, w = self.saved_cols, self.saved_w
        (batch, c_in, length), left, right = self.saved_geometry
        c_out, kernel = w.shape[0], w.shape[2]
        grad_rows = grad.transpose(0, 2, 1).reshape(batch * length, c_out)
        grad_w = (grad_rows.T @ cols).reshape(w.shape)
        grad_b = grad.sum(axis=(0, 2))
        # the input gradient is a correlation of the upstream gradient with the flipped kernel
        grad_cols = sliding_window_view(np.pad(grad, ((0, 0), (0, 0), (right, left))), kernel, axis=2)
        grad_cols = np.ascontiguousarray(grad_cols.transpose(0, 2, 1, 3)).reshape(batch * length, c_out * kernel)
        flipped = w[:, :, ::-1].transpose(0, 2, 1).reshape(c_out * kernel, c_in)
        grad_x = (grad_cols @ flipped).reshape(batch, length, c_in).transpose(0, 2, 1)
        return np.ascontiguousarray(grad_x), grad_w, grad_b


class BatchNorm1d(Function):
    """Per-channel normalization over (batch, T) for x [batch, channels, T]."""

    def forward(
        self,
        x,
        gamma,
        beta,
        training: bool = True,
        running_mean: Optional[np.ndarray] = None,
        running_var: Optional[np.ndarray] = None,
        momentum: float = BATCHNORM_MOMENTUM,
        eps: float = BATCHNORM_EPS,
    ):
        if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise DimensionError(
                f"batchnorm1d expects x [batch, channels, T] and [channels] affine "
                f"parameters; got {x.shape}, {gamma.shape}, {beta.shape}"
            )
        if training:
            count = x.shape[0] * x.shape[2]
            if count < 2:
                raise DegenerateBatchError(
                    f"batch statistics need batch*T >= 2, got {x.shape[0]}*{x.shape[2]}"
                )
            mean = x.mean(axis=(0, 2), dtype=np.float64)
            var = x.var(axis=(0, 2), dtype=np.float64)
            if running_mean is not None:
                running_mean *= momentum
                running_mean += (1.0 - momentum) * mean.astype(running_mean.dtype)
            if running_var is not None:
                running_var *= momentum
                running_var += (1.0 - momentum) * var.astype(running_var.dtype)
        else:
            if running_mean is None or running_var is None:
                raise ConfigurationError("inference-mode batch norm needs running statistics")
            mean = running_mean.astype(np.float64)
            var = running_var.astype(np.float64)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        x_hat = (x - mean.astype(x.dtype)[None, :, None]) * inv_std[None, :, None]
        self.saved_x_hat, self.saved_inv_std = x_hat, inv_std
        self.saved_gamma, self.saved_training = gamma, training
        return x_hat * gamma[None, :, None] + beta[None, :, None]

    def backward(self, grad):
        x_hat, inv_std, gamma = self.saved_x_hat, self.saved_inv_std, self.saved_gamma
        grad_gamma = (grad * x_hat).sum(axis=(0, 2))
        grad_beta = grad.sum(axis=(0, 2))
        grad_x_hat = grad * gamma[None, :, None]
        if self.saved_training:
            mean_g = grad_x_hat.mean(axis=(0, 2), keepdims=True)
            mean_gx = (grad_x_hat * x_hat).mean(axis=(0, 2), keepdims=True)
            grad_x = (grad_x_hat - mean_g - x_hat * mean_gx) * inv_std[None, :, None]
        else:
            grad_x = grad_x_hat * inv_std[None, :, None]
        return grad_x, grad_gamma, grad_beta


class ProbabilityNll(Function):
    """Mean negative log-probability of the true class, with a probability floor."""

    def forward(self, probs, labels: np.ndarray = None, floor: float = PROBABILITY_FLOOR):
        labels = np.asarray(labels, dtype=np.int64)
        if probs.ndim != 2 or labels.shape != (probs.shape[0],):
            raise DimensionError(
                f"expected probabilities [n, classes] and labels [n]; got {probs.shape}, {labels.shape}"
            )
        picked = probs[np.arange(probs.shape[0]), labels]
        clamped = np.maximum(picked, floor)
        self.saved_labels, self.saved_picked = labels, picked
        self.saved_clamped, self.saved_floor = clamped, floor
        return np.asarray(-np.log(clamped.astype(np.float64)).mean(), dtype=probs.dtype)

    def backward(self, grad):
        labels, picked, clamped = self.saved_labels, self.saved_picked, self.saved_clamped
        count = labels.shape[0]
        rows = np.where(picked > self.saved_floor, -1.0 / (count * clamped), 0.0)
        grad_probs = np.zeros(self.inputs[0].shape, dtype=grad.dtype)
        grad_probs[np.arange(count), labels] = rows * grad
        return (grad_probs,)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(as_tensor(a, dtype=_dtype_of(b)), as_tensor(b, dtype=_dtype_of(a)))


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with broadcast leading batch dimensions.

    Raises
    ------
    DimensionError
        If the inner dimensions disagree; the message names both shapes.
    """
    return MatMul.apply(a, b)


def transpose(a: Tensor, axes: Sequence[int] = None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    return Mean.apply(a, axis=axis)


def global_avg_pool(a: Tensor) -> Tensor:
    """Average [batch, channels, T] over the temporal axis to [batch, channels]."""
    if a.ndim != 3:
        raise DimensionError(f"global_avg_pool expects [batch, channels, T], got {a.shape}")
    return Mean.apply(a, axis=2)


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return Conv1d.apply(x, w, b)


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    training: bool = True,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
) -> Tensor:
    """Batch normalization of x [batch, channels, T].

    In train mode batch statistics are used and, when given, ``running_mean``
    and ``running_var`` are updated in place with momentum 0.9. Inference mode
    reads the running statistics.
    """
    return BatchNorm1d.apply(
        x,
        gamma,
        beta,
        training=training,
        running_mean=running_mean,
        running_var=running_var,
    )


def probability_nll(probs: Tensor, labels: np.ndarray, floor: float = PROBABILITY_FLOOR) -> Tensor:
    return ProbabilityNll.apply(probs, labels=labels, floor=floor)


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Position-wise affine map over the last axis: x @ w + b."""
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def scaled_dot_attention(
    x: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    b_v: Optional[Tensor] = None,
    return_weights: bool = False,
):
    """Single-head self-attention over x [batch, T, d].

    Queries and keys are projected to ``w_q.shape[1]`` features, values to
    ``w_v.shape[1]``. Scores are scaled by the square root of the query width
    and normalized row-wise with softmax.

    Returns
    -------
    Tensor or tuple[Tensor, Tensor]
        Output [batch, T, d_v]; with ``return_weights`` also the attention
        weights [batch, T, T].
    """
    if x.ndim != 3:
        raise DimensionError(f"attention expects [batch, T, d], got {x.shape}")
    if w_q.shape != w_k.shape:
        raise DimensionError(f"query and key projections differ: {w_q.shape} and {w_k.shape}")
    queries = matmul(x, w_q)
    keys = matmul(x, w_k)
    values = dense(x, w_v, b_v)
    scores = scale(matmul(queries, transpose(keys, (0, 2, 1))), 1.0 / math.sqrt(w_q.shape[1]))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, values)
    return (out, weights) if return_weights else out


def _dtype_of(value):
    return value.dtype if isinstance(value, Tensor) else np.float32
