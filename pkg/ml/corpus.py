"""
Synthetic Multi-Accent Corpus
Token prototypes distorted by a per-accent diagonal scale and shift, plus
utterance-level accent embeddings and CMVN preprocessing.
"""

import numpy as np
from dataclasses import dataclass, field
from typing import Dict, List, Tuple
import logging

from ml.accents import accent_names, synth_embeddings
from ml.errors import ConfigurationError, InputError
from ml.model import BLANK_ID, EOS_ID

logger = logging.getLogger(__name__)

CMVN_EPS = 1e-8
SPLITS = ('train', 'cv', 'test')
CMVN_MODES = ('utterance', 'global', 'none')
FIRST_CONTENT_ID = 2


@dataclass
class CorpusSpec:
    n_accents: int = 4
    vocab_content: int = 8
    feat_dim: int = 8
    frames_per_token: int = 3
    min_tokens: int = 2
    max_tokens: int = 6
    noise_sigma: float = 0.05
    prototype_scale: float = 1.0        # spread of the token prototypes
    accent_scale_range: List[float] = field(default_factory=lambda: [0.5, 2.0])
    accent_shift_range: List[float] = field(default_factory=lambda: [-1.0, 1.0])
    train_size: int = 400
    cv_size: int = 100
    test_size: int = 100
    embed_dim: int = 256
    embedding_spread: float = 0.1
    held_out_accents: List[str] = field(default_factory=list)
    cmvn: str = 'global'
    seed: int = 0

    @property
    def vocab_size(self) -> int:
        return self.vocab_content + FIRST_CONTENT_ID

    def split_sizes(self) -> Dict[str, int]:
        return {'train': self.train_size, 'cv': self.cv_size, 'test': self.test_size}

    def validate(self):
        counts = ('n_accents', 'vocab_content', 'feat_dim', 'min_tokens', 'max_tokens',
                  'train_size', 'cv_size', 'test_size', 'embed_dim')
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.frames_per_token < 3:
            raise ConfigurationError(
                f"frames_per_token must be >= 3 so every utterance is CTC-feasible with margin, "
                f"got {self.frames_per_token}"
            )
        if self.min_tokens > self.max_tokens:
            raise ConfigurationError("min_tokens exceeds max_tokens")
        for name in ('accent_scale_range', 'accent_shift_range'):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name} is not ordered: {lo} > {hi}")
        if self.noise_sigma < 0 or self.embedding_spread < 0:
            raise ConfigurationError("noise_sigma and embedding_spread must be >= 0")
        if not self.prototype_scale > 0:
            raise ConfigurationError(f"prototype_scale must be > 0, got {self.prototype_scale}")
        if self.cmvn not in CMVN_MODES:
            raise ConfigurationError(f"Unknown cmvn mode: {self.cmvn}")
        unknown = set(self.held_out_accents) - set(accent_names(self.n_accents))
        if unknown:
            raise ConfigurationError(f"held-out accents {sorted(unknown)} do not exist")
        if len(self.held_out_accents) >= self.n_accents:
            raise ConfigurationError("cannot hold out every accent from training")


@dataclass
class Utterance:
    utt_id: str
    accent: str
    features: np.ndarray
    tokens: List[int]
    embedding: np.ndarray


@dataclass
class AccentTransform:
    scale: np.ndarray
    shift: np.ndarray

    def apply(self, frames: np.ndarray) -> np.ndarray:
        return frames * self.scale + self.shift


@dataclass
class Corpus:
    spec: CorpusSpec
    splits: Dict[str, List[Utterance]]
    transforms: Dict[str, AccentTransform]
    prototypes: np.ndarray

    def utterances(self, split: str) -> List[Utterance]:
        if split not in self.splits:
            raise InputError(f"Unknown split: {split}")
        return self.splits[split]


def cmvn(features: np.ndarray) -> np.ndarray:
    """Utterance-level per-dimension mean/variance normalisation"""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < 1:
        raise InputError("cmvn needs at least one frame")
    mean = features.mean(axis=0, keepdims=True)
    var = np.mean((features - mean) ** 2, axis=0, keepdims=True)
    return (features - mean) / np.sqrt(var + CMVN_EPS)


def cmvn_stats(utterances: List[Utterance]) -> Tuple[np.ndarray, np.ndarray]:
    """Pooled per-dimension mean and standard deviation"""
    frames = np.concatenate([u.features for u in utterances], axis=0)
    mean = frames.mean(axis=0, keepdims=True)
    var = np.mean((frames - mean) ** 2, axis=0, keepdims=True)
    return mean, np.sqrt(var + CMVN_EPS)


def apply_cmvn(corpus: Corpus) -> Corpus:
    """Normalise every split in place according to spec.cmvn"""
    mode = corpus.spec.cmvn
    if mode == 'none':
        return corpus
    if mode == 'global':
        mean, std = cmvn_stats(corpus.splits['train'])
        for utts in corpus.splits.values():
            for u in utts:
                u.features = (u.features - mean) / std
    else:
        for utts in corpus.splits.values():
            for u in utts:
                u.features = cmvn(u.features)
    logger.info(f"Applied {mode} CMVN")
    return corpus


def inverse_distortion(transform: AccentTransform) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gate values (f, g) with (1 + f) * y + g = x for y = scale * x + shift

    These are what a gated adapter wrapped by its residual has to produce to
    undo the accent; they must lie in (-1, 1) to be reachable through tanh.
    """
    f = 1.0 / transform.scale - 1.0
    g = -transform.shift / transform.scale
    return f, g


def _split_accents(spec: CorpusSpec, split: str) -> List[str]:
    names = accent_names(spec.n_accents)
    if split == 'train':
        return [a for a in names if a not in spec.held_out_accents]
    return names


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """
    Build train/cv/test splits deterministically from spec.seed

    Accents are assigned round-robin within a split; held-out accents only
    appear in cv and test.
    """
    spec.validate()
    names = accent_names(spec.n_accents)
    rng = np.random.default_rng(spec.seed)
    prototypes = spec.prototype_scale * rng.standard_normal((spec.vocab_content, spec.feat_dim))
    transforms = {}
    for name in names:
        scale = rng.uniform(*spec.accent_scale_range, size=spec.feat_dim)
        shift = rng.uniform(*spec.accent_shift_range, size=spec.feat_dim)
        transforms[name] = AccentTransform(scale=scale, shift=shift)

    plan = []
    for split in SPLITS:
        accents = _split_accents(spec, split)
        for i in range(spec.split_sizes()[split]):
            plan.append((split, i, accents[i % len(accents)]))

    per_accent = {name: 0 for name in names}
    for _, _, accent in plan:
        per_accent[accent] += 1
    table = synth_embeddings(spec.n_accents, spec.embed_dim, max(1, max(per_accent.values())),
                             spec.embedding_spread, seed=spec.seed + 1, names=names)
    by_accent = {name: [] for name in names}
    for accent, emb in zip(table.accents, table.embeddings):
        by_accent[accent].append(emb)

    used = {name: 0 for name in names}
    splits = {split: [] for split in SPLITS}
    for split, i, accent in plan:
        length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        tokens = [int(t) for t in rng.integers(FIRST_CONTENT_ID, spec.vocab_size, size=length)]
        clean = np.repeat(prototypes[np.array(tokens) - FIRST_CONTENT_ID], spec.frames_per_token, axis=0)
        features = transforms[accent].apply(clean)
        features = features + spec.noise_sigma * rng.standard_normal(features.shape)
        embedding = by_accent[accent][used[accent]]
        used[accent] += 1
        splits[split].append(Utterance(
            utt_id=f"{split}_{accent}_{i:05d}",
            accent=accent,
            features=features,
            tokens=tokens,
            embedding=np.array(embedding),
        ))

    for split, utts in splits.items():
        for u in utts:
            assert BLANK_ID not in u.tokens and EOS_ID not in u.tokens
            assert u.features.shape[0] >= 2 * len(u.tokens) + 1
    logger.info(
        f"Generated corpus: " + ", ".join(f"{s}={len(u)}" for s, u in splits.items())
        + f" over {spec.n_accents} accents (held out: {spec.held_out_accents or 'none'})"
    )
    corpus = Corpus(spec=spec, splits=splits, transforms=transforms, prototypes=prototypes)
    return apply_cmvn(corpus)
