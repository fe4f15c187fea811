"""
Dense Numerical Kernels
Matrix helpers, trainable parameters and hand-derived forward/backward pairs
for every layer the acoustic model is built from, plus the finite-difference
gradient oracle used to verify them.
"""

import numpy as np
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence
import logging

from ml.errors import DimensionError, InputError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-8
FD_STEP = 1e-5
GRAD_ERROR_FLOOR = 1e-5


class Parameter:
    """A trainable tensor with its gradient accumulator"""

    def __init__(self, name: str, value: np.ndarray, requires_grad: bool = True):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def accumulate(self, g: np.ndarray):
        """Add into the accumulator; frozen parameters ignore the update"""
        if not self.requires_grad:
            return
        if g.shape != self.grad.shape:
            raise DimensionError(
                f"gradient for {self.name} has shape {g.shape}, expected {self.grad.shape}"
            )
        self.grad += g

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


@dataclass
class LayerIO:
    """Forward output plus whatever the matching backward needs"""
    output: np.ndarray
    cache: Dict = field(default_factory=dict)


def as_matrix(x, name: str = 'matrix') -> np.ndarray:
    """Coerce to a finite 2-D float64 array"""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError(f"{name} contains non-finite entries")
    return m


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    """Small uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]"""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=tuple(shape))


# ---------------------------------------------------------------------------
# Matrix kernels
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard matrix product with an explicit shape check"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_softmax(m: np.ndarray) -> np.ndarray:
    """Softmax over each row, max-subtracted"""
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def row_log_softmax(m: np.ndarray) -> np.ndarray:
    shifted = m - np.max(m, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def log_softmax_backward(dlogp: np.ndarray, logp: np.ndarray) -> np.ndarray:
    """Gradient wrt logits given the gradient wrt row log-probabilities"""
    return dlogp - np.exp(logp) * np.sum(dlogp, axis=-1, keepdims=True)


def softmax_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Gradient wrt logits given the gradient wrt row probabilities"""
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def layer_norm_forward(x: np.ndarray, gain: Parameter, bias: Parameter) -> LayerIO:
    """Per-row normalisation with population variance"""
    if gain.shape != (1, x.shape[1]) or bias.shape != (1, x.shape[1]):
        raise DimensionError(
            f"layer norm params {gain.shape}/{bias.shape} do not fit input {x.shape}"
        )
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = np.mean(centered ** 2, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv_std
    out = xhat * gain.value + bias.value
    return LayerIO(out, {'xhat': xhat, 'inv_std': inv_std})


def layer_norm_backward(dout: np.ndarray, io: LayerIO, gain: Parameter, bias: Parameter) -> np.ndarray:
    xhat = io.cache['xhat']
    inv_std = io.cache['inv_std']
    gain.accumulate(np.sum(dout * xhat, axis=0, keepdims=True))
    bias.accumulate(np.sum(dout, axis=0, keepdims=True))
    dxhat = dout * gain.value
    return inv_std * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True)
    )


def activation_forward(x: np.ndarray, kind: str) -> LayerIO:
    if kind == 'tanh':
        out = np.tanh(x)
    elif kind == 'relu':
        out = np.maximum(x, 0.0)
    else:
        raise ValueError(f"Unknown activation: {kind}")
    return LayerIO(out, {'kind': kind, 'input': x})


def activation_backward(dout: np.ndarray, io: LayerIO) -> np.ndarray:
    if io.cache['kind'] == 'tanh':
        return dout * (1.0 - io.output ** 2)
    return dout * (io.cache['input'] > 0.0)


def linear_forward(x: np.ndarray, weight: Parameter, bias: Optional[Parameter] = None) -> LayerIO:
    out = matmul(x, weight.value)
    if bias is not None:
        out = out + bias.value
    return LayerIO(out, {'input': x})


def linear_backward(dout: np.ndarray, io: LayerIO, weight: Parameter,
                    bias: Optional[Parameter] = None) -> np.ndarray:
    x = io.cache['input']
    weight.accumulate(x.T @ dout)
    if bias is not None:
        bias.accumulate(np.sum(dout, axis=0, keepdims=True))
    return dout @ weight.value.T


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine position table"""
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -(2 * (np.arange(dim) // 2)) / dim)
    angles = positions * rates[None, :]
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles[:, 0::2])
    table[:, 1::2] = np.cos(angles[:, 1::2])
    return table


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

def finite_difference_grad(f: Callable[[], float], params: Sequence[Parameter],
                           h: float = FD_STEP, max_entries: Optional[int] = None,
                           rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    """
    Central-difference gradient estimates

    Args:
        f: Scalar function reading the current parameter values
        params: Parameters to perturb one entry at a time
        h: Step size
        max_entries: Perturb at most this many entries per parameter; the rest
            of the estimate is NaN
        rng: Chooses the perturbed entries when max_entries is set

    Returns:
        One estimate array per parameter, shaped like its value
    """
    rng = rng or np.random.default_rng(0)
    estimates = []
    for param in params:
        est = np.full(param.shape, np.nan)
        flat_value = param.value.reshape(-1)
        n = flat_value.size
        if max_entries is not None and n > max_entries:
            indices = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            indices = np.arange(n)
        flat_est = est.reshape(-1)
        for idx in indices:
            original = flat_value[idx]
            flat_value[idx] = original + h
            plus = f()
            flat_value[idx] = original - h
            minus = f()
            flat_value[idx] = original
            flat_est[idx] = (plus - minus) / (2.0 * h)
        estimates.append(est)
    return estimates


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_ERROR_FLOOR) -> float:
    """
    Worst per-entry |a-b| / max(floor, |a|+|b|) over the entries the oracle perturbed

    Central differences carry roughly 1e-10 of rounding noise, so entries
    whose magnitudes sum below the floor are judged on their absolute gap.
    """
    mask = ~np.isnan(numeric)
    a = np.asarray(analytic)[mask]
    b = np.asarray(numeric)[mask]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))))
