"""
Decoding
Greedy CTC decoding, CTC prefix scoring, joint CTC-attention beam search and
token error rate.
"""

import itertools
import numpy as np
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple
import logging

from ml.errors import ConfigurationError, InputError
from ml.model import BLANK_ID, EOS_ID

logger = logging.getLogger(__name__)

NextTokenScorer = Callable[[Sequence[int]], np.ndarray]


@dataclass
class CTCPrefixState:
    """Log mass of alignments collapsing to the prefix, split by last symbol"""
    r_nonblank: np.ndarray
    r_blank: np.ndarray
    last_token: Optional[int]
    prefix_score: float

    @property
    def full_score(self) -> float:
        """Log-probability that the whole utterance collapses to exactly the prefix"""
        return float(np.logaddexp(self.r_nonblank[-1], self.r_blank[-1]))


@dataclass
class Hypothesis:
    tokens: Tuple[int, ...]
    s2s_score: float
    ctc_score: float
    ctc_prefix_state: CTCPrefixState
    joint_score: float
    ended: bool = False


def interpolate(ctc_score: float, s2s_score: float, ctc_weight: float) -> float:
    """w*ctc + (1-w)*s2s; a zero weight drops its term"""
    score = 0.0
    if ctc_weight > 0.0:
        score += ctc_weight * ctc_score
    if ctc_weight < 1.0:
        score += (1.0 - ctc_weight) * s2s_score
    return score


def ctc_greedy(log_probs: np.ndarray) -> List[int]:
    """Best path: per-frame argmax, merge repeats, drop blanks"""
    best = np.argmax(log_probs, axis=1)
    out = []
    prev = None
    for token in best:
        token = int(token)
        if token != prev and token != BLANK_ID:
            out.append(token)
        prev = token
    return out


def ctc_initial_state(log_probs: np.ndarray) -> CTCPrefixState:
    T = log_probs.shape[0]
    return CTCPrefixState(
        r_nonblank=np.full(T, -np.inf),
        r_blank=np.cumsum(log_probs[:, BLANK_ID]),
        last_token=None,
        prefix_score=0.0,
    )


def ctc_prefix_score(state: CTCPrefixState, log_probs: np.ndarray,
                     new_token: int) -> Tuple[CTCPrefixState, float]:
    """
    Extend a prefix by one token

    Returns:
        Tuple of (state of the extended prefix, its prefix log-probability)
    """
    if new_token == BLANK_ID:
        raise InputError("cannot extend a CTC prefix with the blank token")
    T = log_probs.shape[0]
    emit = log_probs[:, new_token]
    blank = log_probs[:, BLANK_ID]

    prev_total = np.logaddexp(state.r_nonblank, state.r_blank)
    # a repeated token must be separated by a blank
    phi = state.r_blank if new_token == state.last_token else prev_total

    r_n = np.full(T, -np.inf)
    r_b = np.full(T, -np.inf)
    if state.last_token is None:
        r_n[0] = emit[0]
    psi = r_n[0]
    for t in range(1, T):
        r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + emit[t]
        r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + blank[t]
        psi = np.logaddexp(psi, phi[t - 1] + emit[t])
    psi = float(psi)
    return CTCPrefixState(r_nonblank=r_n, r_blank=r_b, last_token=new_token, prefix_score=psi), psi


def _rank_key(hyp: Hypothesis):
    return (-hyp.joint_score, len(hyp.tokens), hyp.tokens)


def _check_decode_args(beam: int, ctc_weight: float):
    if beam < 1:
        raise ConfigurationError(f"beam must be >= 1, got {beam}")
    if not 0.0 <= ctc_weight <= 1.0:
        raise ConfigurationError(f"ctc_weight must lie in [0, 1], got {ctc_weight}")


def _extend(hyp: Hypothesis, token: int, next_log_probs: np.ndarray,
            ctc_log_probs: np.ndarray, ctc_weight: float) -> Hypothesis:
    s2s = hyp.s2s_score + float(next_log_probs[token])
    if token == EOS_ID:
        ctc = hyp.ctc_prefix_state.full_score
        return Hypothesis(hyp.tokens, s2s, ctc, hyp.ctc_prefix_state,
                          interpolate(ctc, s2s, ctc_weight), ended=True)
    state, ctc = ctc_prefix_score(hyp.ctc_prefix_state, ctc_log_probs, token)
    return Hypothesis(hyp.tokens + (token,), s2s, ctc, state, interpolate(ctc, s2s, ctc_weight))


def _content_tokens(vocab_size: int) -> List[int]:
    return [v for v in range(vocab_size) if v not in (BLANK_ID, EOS_ID)]


def joint_beam_search(next_token_scorer: NextTokenScorer, ctc_log_probs: np.ndarray,
                      beam: int = 10, ctc_weight: float = 0.3, max_len: int = 16) -> Hypothesis:
    """
    Step-synchronous joint CTC-attention beam search

    Args:
        next_token_scorer: Maps a token prefix onto next-token log-probabilities
        ctc_log_probs: T x V CTC log-probabilities from the encoder
        beam: Number of extensions kept per step
        ctc_weight: Weight of the CTC prefix score
        max_len: Longest content-token sequence; at this length only eos may follow

    Returns:
        The best ended hypothesis (ties: shorter, then lexicographic tokens)
    """
    _check_decode_args(beam, ctc_weight)
    vocab_size = ctc_log_probs.shape[1]
    content = _content_tokens(vocab_size)
    live = [Hypothesis((), 0.0, 0.0, ctc_initial_state(ctc_log_probs), 0.0)]
    ended: List[Hypothesis] = []

    while live:
        candidates = []
        for hyp in live:
            next_log_probs = next_token_scorer(hyp.tokens)
            tokens = [EOS_ID] + (content if len(hyp.tokens) < max_len else [])
            for token in tokens:
                candidates.append(_extend(hyp, token, next_log_probs, ctc_log_probs, ctc_weight))
        candidates.sort(key=_rank_key)
        live = []
        for hyp in candidates[:beam]:
            (ended if hyp.ended else live).append(hyp)

    ended.sort(key=_rank_key)
    return ended[0]


def joint_greedy_search(next_token_scorer: NextTokenScorer, ctc_log_probs: np.ndarray,
                        ctc_weight: float = 0.3, max_len: int = 16) -> Hypothesis:
    """Take the single best extension at every step until eos wins"""
    _check_decode_args(1, ctc_weight)
    content = _content_tokens(ctc_log_probs.shape[1])
    hyp = Hypothesis((), 0.0, 0.0, ctc_initial_state(ctc_log_probs), 0.0)
    while not hyp.ended:
        next_log_probs = next_token_scorer(hyp.tokens)
        tokens = [EOS_ID] + (content if len(hyp.tokens) < max_len else [])
        options = [_extend(hyp, t, next_log_probs, ctc_log_probs, ctc_weight) for t in tokens]
        hyp = min(options, key=_rank_key)
    return hyp


def joint_exhaustive_search(next_token_scorer: NextTokenScorer, ctc_log_probs: np.ndarray,
                            ctc_weight: float = 0.3, max_len: int = 3) -> Hypothesis:
    """Score every content sequence up to max_len (then eos) with the joint rule"""
    _check_decode_args(1, ctc_weight)
    content = _content_tokens(ctc_log_probs.shape[1])
    best = None
    for length in range(max_len + 1):
        for seq in itertools.product(content, repeat=length):
            hyp = Hypothesis((), 0.0, 0.0, ctc_initial_state(ctc_log_probs), 0.0)
            for token in seq:
                hyp = _extend(hyp, token, next_token_scorer(hyp.tokens), ctc_log_probs, ctc_weight)
            hyp = _extend(hyp, EOS_ID, next_token_scorer(hyp.tokens), ctc_log_probs, ctc_weight)
            if best is None or _rank_key(hyp) < _rank_key(best):
                best = hyp
    return best


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit costs, one DP row per reference token"""
    hyp = np.asarray(list(hyp))
    offsets = np.arange(len(hyp) + 1)
    row = offsets.copy()
    for i, token in enumerate(ref, start=1):
        sub = (hyp != token).astype(int)
        best = np.empty_like(row)
        best[0] = i
        best[1:] = np.minimum(row[1:] + 1, row[:-1] + sub)
        # insertions: row[j] = min over k <= j of best[k] + (j - k)
        row = np.minimum.accumulate(best - offsets) + offsets
    return int(row[-1])


def token_error_rate(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise InputError("token error rate needs a non-empty reference")
    return edit_distance(ref, hyp) / len(ref)
