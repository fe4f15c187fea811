"""
Training Objectives
CTC forward-backward with a brute-force oracle, teacher-forced cross-entropy,
the joint CTC-attention interpolation, the coefficient MSE and the
multi-task objective that adds it.
"""

import itertools
import numpy as np
from dataclasses import dataclass
from scipy.special import logsumexp
from typing import Sequence, Tuple
import logging

from ml.errors import ConfigurationError, CTCInfeasibleError, GuardError, InputError
from ml.model import BLANK_ID, EOS_ID

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 10 ** 6


@dataclass
class LossBreakdown:
    """Per-batch (or per-split mean) loss components"""
    l_ctc: float
    l_s2s: float
    l_jca: float
    l_mse: float
    l_mtl: float
    lambda_ctc: float
    gamma_mtl: float

    @classmethod
    def from_components(cls, l_ctc: float, l_s2s: float, l_mse: float,
                        lambda_ctc: float, gamma_mtl: float) -> 'LossBreakdown':
        l_jca = jca_loss(l_ctc, l_s2s, lambda_ctc)
        return cls(l_ctc=float(l_ctc), l_s2s=float(l_s2s), l_jca=l_jca,
                   l_mse=float(l_mse), l_mtl=mtl_loss(l_jca, l_mse, gamma_mtl),
                   lambda_ctc=lambda_ctc, gamma_mtl=gamma_mtl)

    def is_consistent(self, tol: float = 1e-12) -> bool:
        jca = self.lambda_ctc * self.l_ctc + (1.0 - self.lambda_ctc) * self.l_s2s
        mtl = self.l_jca + self.gamma_mtl * self.l_mse
        return abs(jca - self.l_jca) <= tol and abs(mtl - self.l_mtl) <= tol


def min_ctc_frames(labels: Sequence[int]) -> int:
    """Label count plus one separating blank per adjacent repeat"""
    repeats = sum(1 for a, b in zip(labels[:-1], labels[1:]) if a == b)
    return len(labels) + repeats


def _check_labels(labels: Sequence[int], vocab_size: int):
    if len(labels) == 0:
        raise InputError("CTC labels must be non-empty")
    for token in labels:
        if token == BLANK_ID:
            raise InputError("CTC labels contain the blank token")
        if not 0 <= token < vocab_size:
            raise InputError(f"label {token} outside vocabulary of size {vocab_size}")


def _lattice(labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Blank-augmented state sequence and the mask of allowed skip transitions"""
    ext = np.full(2 * len(labels) + 1, BLANK_ID, dtype=int)
    ext[1::2] = labels
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])
    return ext, skip


def ctc_forward_backward(log_probs: np.ndarray, labels: Sequence[int]):
    """
    Log-domain alpha/beta recursions over the 2L+1 state lattice

    Returns:
        Tuple of (log P(labels), alpha, beta, extended labels)
    """
    labels = [int(t) for t in labels]
    T, V = log_probs.shape
    _check_labels(labels, V)
    if T < min_ctc_frames(labels):
        raise CTCInfeasibleError(
            f"{T} frames cannot align {len(labels)} labels (need {min_ctc_frames(labels)})"
        )
    ext, skip = _lattice(labels)
    S = len(ext)
    emit = log_probs[:, ext]

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay_or_step = prev.copy()
        stay_or_step[1:] = np.logaddexp(prev[1:], prev[:-1])
        with_skip = stay_or_step.copy()
        with_skip[2:] = np.where(skip[2:], np.logaddexp(stay_or_step[2:], prev[:-2]), stay_or_step[2:])
        alpha[t] = with_skip + emit[t]

    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        stay_or_step = nxt.copy()
        stay_or_step[:-1] = np.logaddexp(nxt[:-1], nxt[1:])
        with_skip = stay_or_step.copy()
        with_skip[:-2] = np.where(skip[2:], np.logaddexp(stay_or_step[:-2], nxt[2:]), stay_or_step[:-2])
        beta[t] = with_skip + emit[t]

    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return float(log_p), alpha, beta, ext


def ctc_loss(log_probs: np.ndarray, labels: Sequence[int]) -> Tuple[float, np.ndarray]:
    """
    Negative log-likelihood of labels under CTC

    Args:
        log_probs: T x V per-frame log-probabilities
        labels: Non-empty label sequence without blanks

    Returns:
        Tuple of (loss, gradient wrt log_probs)
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    log_p, alpha, beta, ext = ctc_forward_backward(log_probs, labels)
    if not np.isfinite(log_p):
        raise CTCInfeasibleError("no alignment has non-zero probability")
    emit = log_probs[:, ext]
    occupancy = np.exp(alpha + beta - emit - log_p)
    grad = np.zeros_like(log_probs)
    for s, token in enumerate(ext):
        grad[:, token] -= occupancy[:, s]
    return -log_p, grad


def ctc_posteriors(log_probs: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Per-frame symbol posteriors; each row sums to one"""
    _, grad = ctc_loss(log_probs, labels)
    return -grad


def collapse_path(path: Sequence[int]) -> Tuple[int, ...]:
    """Merge repeats then drop blanks"""
    out = []
    prev = None
    for token in path:
        if token != prev and token != BLANK_ID:
            out.append(int(token))
        prev = token
    return tuple(out)


def ctc_brute_force(log_probs: np.ndarray, labels: Sequence[int]) -> float:
    """Enumerate every frame path; +inf when no path collapses to labels"""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, V = log_probs.shape
    if V ** T > BRUTE_FORCE_LIMIT:
        raise GuardError(f"{V}^{T} paths exceed the enumeration limit {BRUTE_FORCE_LIMIT}")
    target = tuple(int(t) for t in labels)
    frames = np.arange(T)
    matches = []
    for path in itertools.product(range(V), repeat=T):
        if collapse_path(path) == target:
            matches.append(log_probs[frames, list(path)].sum())
    if not matches:
        return float('inf')
    return float(-logsumexp(matches))


def s2s_loss(s2s_log_probs: np.ndarray, targets: Sequence[int]) -> Tuple[float, np.ndarray]:
    """
    Mean token negative log-likelihood of [t1..tL, eos] under teacher forcing

    Returns:
        Tuple of (loss, gradient wrt s2s_log_probs)
    """
    reference = [int(t) for t in targets] + [EOS_ID]
    if s2s_log_probs.shape[0] != len(reference):
        raise InputError(
            f"decoder produced {s2s_log_probs.shape[0]} rows for {len(reference)} scored tokens"
        )
    rows = np.arange(len(reference))
    n = len(reference)
    loss = -float(np.sum(s2s_log_probs[rows, reference])) / n
    grad = np.zeros_like(s2s_log_probs)
    grad[rows, reference] = -1.0 / n
    return loss, grad


def jca_loss(l_ctc: float, l_s2s: float, lambda_ctc: float) -> float:
    if not 0.0 <= lambda_ctc <= 1.0:
        raise ConfigurationError(f"lambda_ctc must lie in [0, 1], got {lambda_ctc}")
    return float(lambda_ctc * l_ctc + (1.0 - lambda_ctc) * l_s2s)


def coeff_mse(alpha_ref: np.ndarray, alpha: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean squared error between reference and predicted coefficients

    Returns:
        Tuple of (loss, gradient wrt alpha)
    """
    alpha_ref = np.asarray(alpha_ref, dtype=np.float64).reshape(-1)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha_ref.shape != alpha.shape:
        raise ConfigurationError(
            f"reference has {alpha_ref.shape[0]} coefficients, prediction has {alpha.shape[0]}"
        )
    n = alpha.shape[0]
    diff = alpha - alpha_ref
    return float(np.sum(diff ** 2) / n), 2.0 * diff / n


def mtl_loss(l_jca: float, l_mse: float, gamma_mtl: float) -> float:
    if gamma_mtl < 0.0:
        raise ConfigurationError(f"gamma_mtl must be >= 0, got {gamma_mtl}")
    return float(l_jca + gamma_mtl * l_mse)
