"""Dense numeric kernels with analytic gradients.

Every kernel comes as a `*_forward` returning (output, cache) and a
`*_backward` consuming (cache, upstream gradient). There is no autodiff
graph: the encoder/decoder compose these by hand in reverse order. All
kernels preserve the input dtype (float64 in tests, float32 in production).

`Tensor2` is simply a 2-D numpy array; helpers below validate shape/finiteness
where contracts require it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

Tensor2 = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_tensor2(x, name="tensor") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


# ---------------------------------------------------------------------------
# activations

def relu_forward(x):
    y = np.maximum(x, 0.0)
    return y, (x,)


def relu_backward(cache, grad):
    (x,) = cache
    return grad * (x > 0.0)


def gelu_forward(x):
    # exact erf form; smooth everywhere, which keeps finite-difference checks tight
    c = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * c
    return y, (x, c)


def gelu_backward(cache, grad):
    x, c = cache
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return grad * (c + x * pdf)


_ACTIVATIONS = {
    "relu": (relu_forward, relu_backward),
    "gelu": (gelu_forward, gelu_backward),
}


# ---------------------------------------------------------------------------
# softmax

def softmax_rows(x: Tensor2) -> Tensor2:
    """Row-wise softmax with max-subtraction; rows sum to 1."""
    x = np.asarray(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(y: Tensor2, grad: Tensor2) -> Tensor2:
    """Gradient through softmax given its output y."""
    inner = (grad * y).sum(axis=-1, keepdims=True)
    return y * (grad - inner)


# ---------------------------------------------------------------------------
# linear / MLP

def linear_forward(x, W, b):
    return x @ W + b, (x, W)


def linear_backward(cache, grad):
    x, W = cache
    dx = grad @ W.T
    dW = x.T @ grad
    db = grad.sum(axis=0)
    return dx, dW, db


@dataclass
class MlpParams:
    """Weights/biases of a plain MLP; activation applied between layers."""

    weights: list = field(default_factory=list)   # W_i: (in_i, out_i)
    biases: list = field(default_factory=list)    # b_i: (out_i,)
    activation: str = "gelu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for W, b in zip(self.weights, self.biases):
            if W.shape[1] != b.shape[0]:
                raise ValueError("bias does not match weight output dim")
        for Wa, Wb in zip(self.weights, self.weights[1:]):
            if Wa.shape[1] != Wb.shape[0]:
                raise ValueError("consecutive layer dims do not chain")


def mlp_forward(x, params: MlpParams):
    act_fwd, _ = _ACTIVATIONS[params.activation]
    caches = []
    h = x
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        h, lin_cache = linear_forward(h, W, b)
        if i < last:
            h, act_cache = act_fwd(h)
        else:
            act_cache = None
        caches.append((lin_cache, act_cache))
    return h, caches


def mlp_backward(params: MlpParams, caches, grad):
    """Returns (dx, dWs, dbs) with dWs/dbs aligned to params.weights."""
    _, act_bwd = _ACTIVATIONS[params.activation]
    dWs = [None] * len(params.weights)
    dbs = [None] * len(params.weights)
    g = grad
    for i in reversed(range(len(params.weights))):
        lin_cache, act_cache = caches[i]
        if act_cache is not None:
            g = act_bwd(act_cache, g)
        g, dWs[i], dbs[i] = linear_backward(lin_cache, g)
    return g, dWs, dbs


# ---------------------------------------------------------------------------
# layer normalization

def layer_norm_forward(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    y = gamma * xhat + beta
    return y, (xhat, inv_std, gamma)


def layer_norm_backward(cache, grad):
    xhat, inv_std, gamma = cache
    dgamma = (grad * xhat).sum(axis=0)
    dbeta = grad.sum(axis=0)
    dxhat = grad * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# attention

def attention(queries: Tensor2, keys: Tensor2, values: Tensor2) -> Tensor2:
    """softmax(Q K^T / sqrt(D)) V — single head."""
    out, _ = attention_forward(queries, keys, values)
    return out


def attention_forward(queries, keys, values):
    if queries.shape[1] != keys.shape[1]:
        raise ValueError(
            f"query dim {queries.shape[1]} != key dim {keys.shape[1]}"
        )
    if keys.shape[0] != values.shape[0]:
        raise ValueError("keys and values must have the same row count")
    scale = 1.0 / np.sqrt(queries.shape[1])
    scores = (queries @ keys.T) * scale
    weights = softmax_rows(scores)
    out = weights @ values
    return out, (queries, keys, values, weights, scale)


def attention_backward(cache, grad):
    q, k, v, weights, scale = cache
    dv = weights.T @ grad
    dweights = grad @ v.T
    dscores = softmax_rows_backward(weights, dweights) * scale
    dq = dscores @ k
    dk = dscores.T @ q
    return dq, dk, dv


# ---------------------------------------------------------------------------
# Fourier positional encoding

def fourier_pe(positions: np.ndarray, bands: int, out_dim: int) -> np.ndarray:
    """Per-axis log-frequency sin/cos features of normalized coordinates.

    Column layout: axis-major, then band, sin before cos, i.e.
    [sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(B-1) pi x), cos(...), sin(.. y) ...].
    out_dim must be >= 6*bands; the tail is zero-padded.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ValueError(f"positions must be (N, 3), got {pos.shape}")
    if bands < 1:
        raise ValueError("bands must be >= 1")
    if out_dim < 6 * bands:
        raise ValueError(f"out_dim {out_dim} < 6*bands = {6 * bands}")
    freqs = (2.0 ** np.arange(bands)) * np.pi
    ang = pos[:, :, None] * freqs[None, None, :]          # (N, 3, B)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)   # (N, 3, B, 2)
    enc = enc.reshape(pos.shape[0], 6 * bands)
    if out_dim > 6 * bands:
        pad = np.zeros((pos.shape[0], out_dim - 6 * bands))
        enc = np.concatenate([enc, pad], axis=1)
    return enc


# ---------------------------------------------------------------------------
# finite differences

def finite_diff_grad(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    (f(theta + h e_i) - f(theta - h e_i)) / (2 h) per coordinate. The
    parameter vector is copied; f must return a finite scalar.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    work = theta.copy()
    for i in range(theta.size):
        orig = work.flat[i]
        work.flat[i] = orig + h
        fp = float(f(work))
        work.flat[i] = orig - h
        fm = float(f(work))
        work.flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        grad.flat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """||a - n||_2 / max(||a||_2, ||n||_2, floor) — group-level relative error."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
