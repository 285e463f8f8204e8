"""Tape-free reverse-mode building blocks.

Every op here has a forward and a hand-written backward. Backward functions
return cotangents; callers add parameter gradients into a ``ParameterStore``
so that repeated backward passes accumulate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

# Rows are pushed through GEMM in fixed-size padded blocks. BLAS picks
# different kernels for different row counts, so without this a sample's
# output would depend on how many other samples share its batch.
ROW_BLOCK = 256

TRUNC_EXP_MAX = 15.0


class ParameterStore:
    """Flat parameter vector carved into named, disjoint segments."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        self._spans: dict[str, tuple[slice, tuple[int, ...]]] = {}
        self._size = 0
        self.values = np.zeros(0, dtype=self.dtype)
        self.grads = np.zeros(0, dtype=self.dtype)

    def add(self, name: str, init: np.ndarray) -> None:
        if name in self._layout:
            raise ValueError(f"duplicate parameter segment {name!r}")
        init = np.asarray(init, dtype=self.dtype)
        self._layout[name] = (self._size, init.shape)
        self._spans[name] = (slice(self._size, self._size + init.size), init.shape)
        self._size += init.size
        self.values = np.concatenate([self.values, init.ravel()])
        self.grads = np.zeros_like(self.values)

    def __contains__(self, name: str) -> bool:
        return name in self._layout

    def __getitem__(self, name: str) -> np.ndarray:
        sl, shape = self._spans[name]
        return self.values[sl].reshape(shape)

    def grad(self, name: str) -> np.ndarray:
        sl, shape = self._spans[name]
        return self.grads[sl].reshape(shape)

    def span(self, name: str) -> slice:
        return self._spans[name][0]

    def names(self) -> list[str]:
        return list(self._layout)

    @property
    def size(self) -> int:
        return self._size

    def layout(self) -> dict[str, list]:
        return {k: [start, list(shape)] for k, (start, shape) in self._layout.items()}

    def zero_grads(self) -> None:
        self.grads[...] = 0

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(dtype)
        out._layout = dict(self._layout)
        out._spans = dict(self._spans)
        out._size = self._size
        out.values = self.values.astype(dtype)
        out.grads = np.zeros_like(out.values)
        return out


class DifferentiableOp(Protocol):
    """Anything with a deterministic forward and an accumulating backward."""

    def forward(self, inputs: dict, params: dict) -> np.ndarray: ...

    def backward(self, inputs: dict, params: dict, cotangent: np.ndarray) -> tuple[dict, dict]: ...


# ---------------------------------------------------------------------------
# linear layer


def _check_linear(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> None:
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ValueError(
            f"linear layer shape mismatch: input {x.shape}, weights {weights.shape}, bias {bias.shape}"
        )


def blocked_matmul(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``x @ weights`` whose per-row result is independent of the batch size."""
    n = x.shape[0]
    if n == 0:
        return np.zeros((0, weights.shape[1]), dtype=np.result_type(x, weights))
    padded = -(-n // ROW_BLOCK) * ROW_BLOCK
    if padded != n:
        buf = np.zeros((padded, x.shape[1]), dtype=x.dtype)
        buf[:n] = x
    else:
        buf = np.ascontiguousarray(x)
    out = np.matmul(buf.reshape(-1, ROW_BLOCK, x.shape[1]), weights)
    return out.reshape(padded, weights.shape[1])[:n]


def linear_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Row-major linear map ``y = x W + b`` (``W`` stored as ``in x out``).

    A 1-D input is treated as a single row.
    """
    x = np.asarray(x)
    _check_linear(x, weights, bias)
    if x.ndim == 1:
        return blocked_matmul(x[None], weights)[0] + bias
    return blocked_matmul(x, weights) + bias


def linear_layer(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``weights @ x + bias`` with ``weights`` laid out ``out x in``."""
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    x = np.asarray(x)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ValueError(
            f"linear layer shape mismatch: input {x.shape}, weights {weights.shape}, bias {bias.shape}"
        )
    return linear_forward(x, weights.T, bias)


def linear_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_x, grad_weights, grad_bias)``."""
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad_out)
    grad_x = g2 @ weights.T
    grad_w = x2.T @ g2
    grad_b = g2.sum(axis=0)
    if np.ndim(x) == 1:
        grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# activations

ACTIVATIONS = ("relu", "sigmoid", "exp", "truncated_exp")


def sigmoid(x):
    x = np.asarray(x)
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "exp":
        return np.exp(x)
    if kind == "truncated_exp":
        return np.exp(np.minimum(x, TRUNC_EXP_MAX))
    raise ValueError(f"unsupported activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_backward(kind: str, x: np.ndarray, grad_out: np.ndarray, out: np.ndarray | None = None):
    """Cotangent w.r.t. the pre-activation; ``out`` may pass a cached forward."""
    if out is None:
        out = activation(kind, x)
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "sigmoid":
        return grad_out * out * (1 - out)
    if kind == "exp":
        return grad_out * out
    if kind == "truncated_exp":
        return grad_out * out * (x < TRUNC_EXP_MAX)
    raise ValueError(f"unsupported activation {kind!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# loss


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over the batch of the squared L2 colour error."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"batch shape mismatch: {pred.shape} vs {target.shape}")
    if pred.shape[0] == 0:
        raise ValueError("mse_loss of an empty batch")
    diff = pred - target
    return float(np.sum(diff * diff) / pred.shape[0])


def mse_loss_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (pred - target) / pred.shape[0]


# ---------------------------------------------------------------------------
# ops wrapped for gradient checking


@dataclass
class LinearOp:
    def forward(self, inputs, params):
        return linear_forward(inputs["x"], params["weights"], params["bias"])

    def backward(self, inputs, params, cotangent):
        gx, gw, gb = linear_backward(inputs["x"], params["weights"], cotangent)
        return {"x": gx}, {"weights": gw, "bias": gb}


@dataclass
class ActivationOp:
    kind: str

    def forward(self, inputs, params):
        return activation(self.kind, inputs["x"])

    def backward(self, inputs, params, cotangent):
        return {"x": activation_backward(self.kind, inputs["x"], cotangent)}, {}


@dataclass
class MSELossOp:
    def forward(self, inputs, params):
        return np.asarray(mse_loss(inputs["pred"], inputs["target"]))

    def backward(self, inputs, params, cotangent):
        g = mse_loss_backward(inputs["pred"], inputs["target"]) * cotangent
        return {"pred": g, "target": -g}, {}


@dataclass
class FunctionOp:
    """Adapter for closures; handy for end-to-end checks."""

    fwd: Callable[[dict, dict], np.ndarray]
    bwd: Callable[[dict, dict, np.ndarray], tuple[dict, dict]]

    def forward(self, inputs, params):
        return self.fwd(inputs, params)

    def backward(self, inputs, params, cotangent):
        return self.bwd(inputs, params, cotangent)


@dataclass
class ConstantOp:
    value: float = 1.0

    def forward(self, inputs, params):
        return np.asarray(self.value)

    def backward(self, inputs, params, cotangent):
        return ({k: np.zeros_like(v) for k, v in inputs.items()},
                {k: np.zeros_like(v) for k, v in params.items()})


def finite_diff_check(
    op: DifferentiableOp,
    inputs: dict,
    params: dict,
    step: float = 1e-5,
    *,
    max_coords: int | None = None,
    skip: tuple[str, ...] = (),
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> float:
    """Max relative error between backward and central differences.

    The output is reduced to a scalar with a fixed random cotangent. Errors
    are ``|analytic - numeric| / max(1, |analytic|)``. ``max_coords`` limits
    how many coordinates per array are probed (picked at random).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    inputs = {k: np.array(v, dtype=dtype) if np.ndim(v) else v for k, v in inputs.items()}
    params = {k: np.array(v, dtype=dtype) for k, v in params.items()}
    out = np.asarray(op.forward(inputs, params))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("forward produced non-finite values at the probe point")
    cot = rng.standard_normal(out.shape) if out.ndim else np.asarray(1.0)
    g_in, g_par = op.backward(inputs, params, cot)

    def scalar():
        y = np.asarray(op.forward(inputs, params))
        if not np.all(np.isfinite(y)):
            raise FloatingPointError("forward produced non-finite values during probing")
        return float(np.sum(y * cot))

    worst = 0.0
    for group, grads in ((inputs, g_in), (params, g_par)):
        for name, arr in group.items():
            if name in skip or not isinstance(arr, np.ndarray) or arr.size == 0:
                continue
            analytic = np.broadcast_to(np.asarray(grads.get(name, np.zeros_like(arr))), arr.shape)
            flat = arr.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = rng.choice(flat.size, max_coords, replace=False)
            a_flat = analytic.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                up = scalar()
                flat[i] = orig - step
                down = scalar()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
                worst = max(worst, err)
    return worst
