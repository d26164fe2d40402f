"""Dense float32 tensor arithmetic for the fixed operator set of the classifier.

Tensors are C-contiguous ``numpy.float32`` arrays (flat row-major storage).
There is no autodiff graph: every differentiable operation here has a paired
``*_forward`` / ``*_backward`` function, and ``finite_diff_check`` is the
independent oracle used to validate the analytic gradients.

Accumulation-order guarantee: ``affine_forward`` accumulates over the input
dimension strictly sequentially (index 0, 1, 2, ...) per output element.
Consequently an input whose weights are exactly zero contributes bit-neutrally,
so structurally removing a zero-weight input row cannot perturb the output.
The channel-rewrite machinery relies on this for exact dead-channel removal;
do not replace the kernel with a BLAS call, which reassociates the sum.
All forward arithmetic is 32-bit, matching deployment precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit, prange

from .errors import (
    DimensionError,
    EmptyNeighborhoodError,
    EvaluationError,
)

Tensor = np.ndarray
Gradients = dict[str, np.ndarray]


def tensor(values) -> Tensor:
    """Coerce nested lists / arrays to a C-contiguous float32 tensor."""
    return np.ascontiguousarray(values, dtype=np.float32)


def _as_f32(x) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype != np.float32:
        x = x.astype(np.float32)
    return np.ascontiguousarray(x)


@njit(cache=True, parallel=True)
def _affine_kernel(x, w, b, out):  # pragma: no cover - exercised via affine_forward
    n, d_in = x.shape
    d_out = w.shape[1]
    for i in prange(n):
        for j in range(d_out):
            out[i, j] = b[j]
        for k in range(d_in):
            xv = x[i, k]
            for j in range(d_out):
                out[i, j] += xv * w[k, j]


@njit(cache=True, parallel=True)
def _affine_dx_kernel(d_out, w, d_x):  # pragma: no cover - via affine_backward
    n, d_out_dim = d_out.shape
    d_in = w.shape[0]
    for i in prange(n):
        for k in range(d_in):
            acc = np.float32(0.0)
            for j in range(d_out_dim):
                acc += d_out[i, j] * w[k, j]
            d_x[i, k] = acc


@njit(cache=True, parallel=True)
def _affine_dw_kernel(x, d_out, d_w):  # pragma: no cover - via affine_backward
    n, d_in = x.shape
    d_out_dim = d_out.shape[1]
    for k in prange(d_in):
        for j in range(d_out_dim):
            d_w[k, j] = 0.0
        for i in range(n):
            xv = x[i, k]
            for j in range(d_out_dim):
                d_w[k, j] += xv * d_out[i, j]


@njit(cache=True, parallel=True)
def _max_reduce_kernel(x, out, arg):  # pragma: no cover - exercised via neighbor_max_reduce
    m, g, c = x.shape
    for i in prange(m):
        for ch in range(c):
            out[i, ch] = x[i, 0, ch]
            arg[i, ch] = 0
        for j in range(1, g):
            for ch in range(c):
                v = x[i, j, ch]
                if v > out[i, ch]:
                    out[i, ch] = v
                    arg[i, ch] = j


def affine_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise affine map: out[i, j] = sum_k x[i, k] * weight[k, j] + bias[j]."""
    x = _as_f32(x)
    weight = _as_f32(weight)
    bias = _as_f32(bias)
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError(
            f"affine_forward expects 2D input, 2D weight, 1D bias; got "
            f"{x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DimensionError(
            f"affine_forward shape mismatch: input {x.shape} vs weight {weight.shape} "
            f"(bias {bias.shape})"
        )
    out = np.empty((x.shape[0], weight.shape[1]), dtype=np.float32)
    _affine_kernel(x, weight, bias, out)
    return out


def affine_backward(x: Tensor, weight: Tensor, d_out: Tensor):
    """Gradients of affine_forward: returns (d_input, d_weight, d_bias)."""
    x = _as_f32(x)
    weight = _as_f32(weight)
    d_out = _as_f32(d_out)
    if d_out.shape != (x.shape[0], weight.shape[1]):
        raise DimensionError(
            f"affine_backward: upstream gradient {d_out.shape} does not match "
            f"output shape {(x.shape[0], weight.shape[1])}"
        )
    d_x = np.empty_like(x)
    _affine_dx_kernel(d_out, weight, d_x)
    d_w = np.empty_like(weight)
    _affine_dw_kernel(x, d_out, d_w)
    d_b = d_out.sum(axis=0)
    return d_x, d_w, d_b


def relu_forward(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); shape preserved."""
    return np.maximum(_as_f32(x), np.float32(0.0))


def relu_backward(x: Tensor, d_out: Tensor) -> Tensor:
    """Gradient of relu_forward given the forward *input* x."""
    x = _as_f32(x)
    d_out = _as_f32(d_out)
    if x.shape != d_out.shape:
        raise DimensionError(
            f"relu_backward shape mismatch: {x.shape} vs {d_out.shape}"
        )
    return np.where(x > 0, d_out, np.float32(0.0))


def neighbor_max_reduce(x: Tensor):
    """Max over the neighbor axis of a [m, g, c] tensor.

    Returns (out [m, c], argmax [m, c]). Ties break toward the smallest
    neighbor index, which makes the backward pass deterministic.
    """
    x = _as_f32(x)
    if x.ndim != 3:
        raise DimensionError(f"neighbor_max_reduce expects [m, g, c], got {x.shape}")
    m, g, c = x.shape
    if g == 0:
        raise EmptyNeighborhoodError("neighbor_max_reduce over zero neighbors")
    out = np.empty((m, c), dtype=np.float32)
    arg = np.empty((m, c), dtype=np.int64)
    _max_reduce_kernel(x, out, arg)
    return out, arg


def neighbor_max_reduce_backward(argmax: np.ndarray, g: int, d_out: Tensor) -> Tensor:
    """Scatter d_out back to the [m, g, c] input positions recorded in argmax."""
    d_out = _as_f32(d_out)
    if argmax.shape != d_out.shape:
        raise DimensionError(
            f"neighbor_max_reduce_backward shape mismatch: {argmax.shape} vs {d_out.shape}"
        )
    m, c = d_out.shape
    d_x = np.zeros((m, g, c), dtype=np.float32)
    np.put_along_axis(d_x, argmax[:, None, :], d_out[:, None, :], axis=1)
    return d_x


def softmax_cross_entropy(logits: Tensor, labels):
    """Mean cross-entropy over the batch, with the logit gradient.

    Computed with max-subtraction so large logits do not overflow. Returns
    (loss, d_logits) where d_logits already carries the 1/batch factor.
    """
    logits = _as_f32(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [b, C], got {logits.shape}")
    b, num_classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise DimensionError(
            f"softmax_cross_entropy: {b} rows but {labels.shape} labels"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(
            f"label out of range [0, {num_classes}): {labels.min()}..{labels.max()}"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    rows = np.arange(b)
    loss = float(-log_probs[rows, labels].mean())
    d_logits = exp / total
    d_logits[rows, labels] -= np.float32(1.0)
    d_logits /= np.float32(b)
    return loss, d_logits.astype(np.float32)


@dataclass
class OptimizerState:
    """Adaptive-moment optimizer state (per-parameter moments, step counter)."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: dict[str, np.ndarray], learning_rate: float,
              beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> OptimizerState:
    """Zero-moment optimizer state matching the given parameter shapes."""
    return OptimizerState(
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
        step=0,
        first_moment={k: np.zeros_like(v) for k, v in params.items()},
        second_moment={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(state: OptimizerState, params: dict[str, np.ndarray],
              grads: Gradients):
    """One bias-corrected adaptive-moment update.

    Pure: returns (new_params, new_state) and leaves the inputs untouched.
    """
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise DimensionError(f"adam_step: parameter/gradient keys differ: {sorted(missing)}")
    t = state.step + 1
    b1 = np.float32(state.beta1)
    b2 = np.float32(state.beta2)
    lr = np.float32(state.learning_rate)
    eps = np.float32(state.epsilon)
    corr1 = np.float32(1.0 - state.beta1 ** t)
    corr2 = np.float32(1.0 - state.beta2 ** t)
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for key in params:
        p = params[key]
        g = _as_f32(grads[key])
        if g.shape != p.shape:
            raise DimensionError(
                f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for '{key}'"
            )
        m = b1 * state.first_moment[key] + (np.float32(1.0) - b1) * g
        v = b2 * state.second_moment[key] + (np.float32(1.0) - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        new_params[key] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[key] = m
        new_v[key] = v
    new_state = OptimizerState(
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
        step=t,
        first_moment=new_m,
        second_moment=new_v,
    )
    return new_params, new_state


def finite_diff_check(loss_fn: Callable[[dict[str, np.ndarray]], tuple],
                      params: dict[str, np.ndarray],
                      epsilon: float) -> float:
    """Central-difference gradient check.

    ``loss_fn(params) -> (loss, grads)`` must be a pure function of the
    parameter dict. Returns the max over all coordinates of
    |analytic - numeric| / max(1, |numeric|).
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    work = {k: np.array(v, dtype=np.float32, copy=True) for k, v in params.items()}
    loss, grads = loss_fn(work)
    if not np.isfinite(loss):
        raise EvaluationError(f"non-finite loss {loss} at the base point")
    worst = 0.0
    for key, p in work.items():
        analytic = np.asarray(grads[key], dtype=np.float64).ravel()
        flat = p.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + np.float32(epsilon)
            loss_plus, _ = loss_fn(work)
            flat[idx] = orig - np.float32(epsilon)
            loss_minus, _ = loss_fn(work)
            flat[idx] = orig
            if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
                raise EvaluationError(
                    f"non-finite loss while perturbing '{key}'[{idx}]"
                )
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            err = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
