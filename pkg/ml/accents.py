"""
Accent Embeddings and Clustering
Synthetic embedding provider, CSV loader, Lloyd K-means and the reference
coefficient targets derived from it.
"""

import numpy as np
import pandas as pd
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union
import logging

from ml.errors import ConfigurationError, DimensionError, EmbeddingParseError, InputError
from ml.numerics import row_softmax

logger = logging.getLogger(__name__)

REFERENCE_MODES = ('hard', 'uniform', 'soft')


@dataclass
class EmbeddingTable:
    """Utterance-level accent embeddings"""
    utt_ids: List[str]
    accents: List[str]
    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise DimensionError(f"embeddings must be 2-D, got shape {self.embeddings.shape}")
        if not (len(self.utt_ids) == len(self.accents) == self.embeddings.shape[0]):
            raise InputError("utt_ids, accents and embeddings differ in length")
        if len(set(self.utt_ids)) != len(self.utt_ids):
            raise InputError("duplicate utt_id in embedding table")

    def __len__(self):
        return len(self.utt_ids)

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def lookup(self) -> Dict[str, np.ndarray]:
        return {utt: self.embeddings[i] for i, utt in enumerate(self.utt_ids)}

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.embeddings, columns=[f"e{i}" for i in range(self.embed_dim)])
        df.insert(0, 'accent', self.accents)
        df.insert(0, 'utt_id', self.utt_ids)
        return df


@dataclass
class ClusterModel:
    """Frozen K-means result used to build coefficient targets"""
    centroids: np.ndarray
    inertia: float
    iterations_run: int
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    inertia_history: List[float] = field(default_factory=list)
    unit_norm: bool = False

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    def to_dict(self) -> Dict:
        return {
            'centroids': self.centroids,
            'inertia': self.inertia,
            'iterations_run': self.iterations_run,
            'labels': self.labels,
            'inertia_history': list(self.inertia_history),
            'unit_norm': self.unit_norm,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'ClusterModel':
        return cls(
            centroids=np.asarray(data['centroids'], dtype=np.float64),
            inertia=float(data['inertia']),
            iterations_run=int(data['iterations_run']),
            labels=np.asarray(data['labels'], dtype=int),
            inertia_history=list(data['inertia_history']),
            unit_norm=bool(data['unit_norm']),
        )


def _as_points(points: Union[EmbeddingTable, np.ndarray]) -> np.ndarray:
    if isinstance(points, EmbeddingTable):
        return points.embeddings
    return np.atleast_2d(np.asarray(points, dtype=np.float64))


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.sum(diff ** 2, axis=-1)


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int):
    n = centroids.shape[0]
    labels = None
    history = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        d2 = squared_distances(x, centroids)
        new_labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(x.shape[0]), new_labels].sum())
        if history and inertia > history[-1] + 1e-9 * max(1.0, history[-1]):
            logger.warning(f"K-means inertia rose from {history[-1]} to {inertia}")
        history.append(inertia)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids = _update_centroids(x, labels, d2, n)

    d2 = squared_distances(x, centroids)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(x.shape[0]), labels].sum())
    return centroids, labels, inertia, iterations, history


def kmeans_fit(points: Union[EmbeddingTable, np.ndarray], n: int, seed: int = 0,
               max_iter: int = 100, unit_norm: bool = False,
               n_init: int = 100) -> ClusterModel:
    """
    Lloyd's algorithm restarted from seeded samples of distinct points

    Args:
        points: Embedding table or N x D array
        n: Number of clusters (the adapter's basis count)
        seed: Seed for the initial samples
        max_iter: Assignment/update rounds before giving up on stability
        unit_norm: Scale every point to unit length before clustering
        n_init: Restarts; the run with the lowest final inertia is kept

    Returns:
        ClusterModel with the per-iteration inertia trace of the kept run
    """
    x = _as_points(points)
    if unit_norm:
        x = _normalize_rows(x)
    if n < 1:
        raise ConfigurationError(f"number of clusters must be >= 1, got {n}")
    if n_init < 1:
        raise ConfigurationError(f"n_init must be >= 1, got {n_init}")
    if x.shape[0] < n:
        raise InputError(f"need at least {n} points for {n} clusters, got {x.shape[0]}")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        start = x[rng.choice(x.shape[0], size=n, replace=False)].copy()
        run = _lloyd(x, start, max_iter)
        # strict comparison keeps the earliest run on ties
        if best is None or run[2] < best[2]:
            best = run

    centroids, labels, inertia, iterations, history = best
    logger.info(f"K-means: {n} clusters, best of {n_init} runs, {iterations} iterations, "
                f"inertia {inertia:.6g}")
    return ClusterModel(centroids=centroids, inertia=inertia, iterations_run=iterations,
                        labels=labels, inertia_history=history, unit_norm=unit_norm)


def _update_centroids(x: np.ndarray, labels: np.ndarray, d2: np.ndarray, n: int) -> np.ndarray:
    centroids = np.zeros((n, x.shape[1]))
    cost = d2[np.arange(x.shape[0]), labels].copy()
    for k in range(n):
        members = labels == k
        if members.any():
            centroids[k] = x[members].mean(axis=0)
    for k in range(n):
        if not (labels == k).any():
            far = int(np.argmax(cost))
            logger.warning(f"K-means cluster {k} is empty, re-seeding from point {far}")
            centroids[k] = x[far]
            cost[far] = -1.0
    return centroids


def kmeans_assign(model: ClusterModel, z: np.ndarray) -> int:
    """Nearest centroid by squared distance, lowest index on ties"""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != model.centroids.shape[1]:
        raise DimensionError(
            f"embedding has {z.shape[0]} dims, centroids have {model.centroids.shape[1]}"
        )
    if model.unit_norm:
        z = _normalize_rows(z)
    d2 = np.sum((model.centroids - z[None, :]) ** 2, axis=1)
    return int(np.argmin(d2))


def make_reference_targets(model: ClusterModel, z: np.ndarray, mode: str = 'hard',
                           tau: float = 1.0) -> np.ndarray:
    """
    Coefficient target for one embedding

    Args:
        model: Frozen cluster model
        z: Accent embedding
        mode: 'hard' one-hot at the assigned cluster, 'uniform', or 'soft'
            softmax of negative squared distances over tau
        tau: Temperature for 'soft'
    """
    if mode not in REFERENCE_MODES:
        raise ConfigurationError(f"Unknown reference mode: {mode}")
    n = model.n_clusters
    if mode == 'uniform':
        return np.full(n, 1.0 / n)
    if mode == 'hard':
        target = np.zeros(n)
        target[kmeans_assign(model, z)] = 1.0
        return target
    if not tau > 0:
        raise ConfigurationError(f"soft targets need tau > 0, got {tau}")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != model.centroids.shape[1]:
        raise DimensionError(
            f"embedding has {z.shape[0]} dims, centroids have {model.centroids.shape[1]}"
        )
    if model.unit_norm:
        z = _normalize_rows(z)
    d2 = np.sum((model.centroids - z[None, :]) ** 2, axis=1)
    return row_softmax(-d2 / tau)


def accent_names(n_accents: int) -> List[str]:
    return [f"A{a}" for a in range(n_accents)]


def synth_embeddings(n_accents: int, embed_dim: int, per_accent: int, spread: float,
                     seed: int = 0, names: Optional[Sequence[str]] = None) -> EmbeddingTable:
    """
    Gaussian prototype per accent plus isotropic noise per utterance

    Prototypes are drawn before any noise so they depend only on the seed,
    n_accents and embed_dim.
    """
    if min(n_accents, embed_dim, per_accent) < 1:
        raise ConfigurationError("n_accents, embed_dim and per_accent must all be >= 1")
    names = list(names) if names is not None else accent_names(n_accents)
    rng = np.random.default_rng(seed)
    prototypes = rng.standard_normal((n_accents, embed_dim))
    noise = rng.standard_normal((n_accents, per_accent, embed_dim))

    utt_ids, accents, rows = [], [], []
    for a in range(n_accents):
        for i in range(per_accent):
            utt_ids.append(f"{names[a]}_{i:05d}")
            accents.append(names[a])
            rows.append(prototypes[a] + spread * noise[a, i])
    return EmbeddingTable(utt_ids=utt_ids, accents=accents, embeddings=np.array(rows))


def save_embeddings(table: EmbeddingTable, path: str) -> str:
    table.to_frame().to_csv(path, index=False, float_format='%.17g', encoding='utf-8')
    logger.info(f"Saved {len(table)} embeddings to {path}")
    return path


def load_embeddings(path: str) -> EmbeddingTable:
    """
    Parse utt_id,accent,e0,...,e{D-1}

    Raises:
        EmbeddingParseError: with the 1-based file line of the first bad row
    """
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except pd.errors.ParserError as e:
        line = _line_from_parser_error(str(e))
        raise EmbeddingParseError(f"wrong number of columns ({e})", line) from e

    columns = list(df.columns)
    dims = columns[2:]
    if columns[:2] != ['utt_id', 'accent'] or not dims or dims != [f"e{i}" for i in range(len(dims))]:
        raise EmbeddingParseError(f"header must be utt_id,accent,e0..e{{D-1}}, got {columns}", 1)

    seen = {}
    values = np.zeros((len(df), len(dims)))
    for i, row in enumerate(df.itertuples(index=False)):
        line = i + 2
        fields = list(row)
        if any(not isinstance(f, str) or f == '' for f in fields):
            raise EmbeddingParseError("missing value (ragged row)", line)
        utt = fields[0]
        if utt in seen:
            raise EmbeddingParseError(f"duplicate utt_id {utt} (first on line {seen[utt]})", line)
        seen[utt] = line
        try:
            values[i] = [float(f) for f in fields[2:]]
        except ValueError as e:
            raise EmbeddingParseError(f"non-numeric embedding value ({e})", line) from e
        if not np.all(np.isfinite(values[i])):
            raise EmbeddingParseError("non-finite embedding value", line)

    table = EmbeddingTable(utt_ids=list(df['utt_id']), accents=list(df['accent']), embeddings=values)
    logger.info(f"Loaded {len(table)} embeddings of dimension {len(dims)} from {path}")
    return table


def _line_from_parser_error(message: str) -> int:
    # pandas: "Expected 5 fields in line 3, saw 6"
    marker = 'line '
    if marker in message:
        digits = ''
        for ch in message.split(marker, 1)[1]:
            if not ch.isdigit():
                break
            digits += ch
        if digits:
            return int(digits)
    return 0
