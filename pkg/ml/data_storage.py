"""
Data Storage Manager
Handles persistent storage of corpora, checkpoints and training metrics
"""

import json
import os
import joblib
import numpy as np
import pandas as pd
import yaml
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional
import logging

from ml.accents import ClusterModel, EmbeddingTable, load_embeddings, save_embeddings
from ml.adapters import AdapterSpec
from ml.corpus import SPLITS, AccentTransform, Corpus, CorpusSpec, Utterance
from ml.errors import CheckpointError, ConfigurationError, InputError
from ml.model import AccentTransformer, ModelConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 2
METRIC_COLUMNS = ['epoch', 'split', 'l_ctc', 'l_s2s', 'l_jca', 'l_mse', 'l_mtl', 'ter']
FLOAT_FORMAT = '%.17g'


@dataclass
class Checkpoint:
    """A model plus everything training froze alongside it"""
    model: AccentTransformer
    stage: str = 'baseline'
    epoch: int = 0
    cluster_model: Optional[ClusterModel] = None
    reference_mode: str = 'none'
    reference_tau: float = 1.0
    accent_to_cluster: Dict[str, int] = field(default_factory=dict)


def _build(cls, data: Dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown {what} keys: {unknown}")
    return cls(**data)


def save_checkpoint(checkpoint: Checkpoint, path: str) -> str:
    """Write a checkpoint with joblib; identical content gives identical bytes"""
    model = checkpoint.model
    payload = OrderedDict()
    payload['format_version'] = FORMAT_VERSION
    payload['model_config'] = asdict(model.config)
    payload['adapter_spec'] = asdict(model.adapter_spec)
    payload['seed'] = model.seed
    payload['parameters'] = model.state_dict()
    payload['cluster_model'] = (checkpoint.cluster_model.to_dict()
                                if checkpoint.cluster_model is not None else None)
    payload['reference_mode'] = checkpoint.reference_mode
    payload['reference_tau'] = float(checkpoint.reference_tau)
    payload['accent_to_cluster'] = dict(sorted(checkpoint.accent_to_cluster.items()))
    payload['stage'] = checkpoint.stage
    payload['epoch'] = int(checkpoint.epoch)

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    joblib.dump(payload, path)
    logger.info(f"Saved checkpoint ({checkpoint.stage}, epoch {checkpoint.epoch}) to {path}")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = joblib.load(path)
    if not isinstance(payload, dict) or 'format_version' not in payload:
        raise CheckpointError(f"{path} is not a checkpoint")
    if payload['format_version'] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {payload['format_version']}, expected {FORMAT_VERSION}"
        )
    config = _build(ModelConfig, payload['model_config'], 'model')
    spec = _build(AdapterSpec, payload['adapter_spec'], 'adapter')
    model = AccentTransformer(config, spec, seed=payload['seed'])
    model.load_state_dict(payload['parameters'], strict=True)
    cluster = payload['cluster_model']
    return Checkpoint(
        model=model,
        stage=payload['stage'],
        epoch=payload['epoch'],
        cluster_model=ClusterModel.from_dict(cluster) if cluster is not None else None,
        reference_mode=payload['reference_mode'],
        reference_tau=payload['reference_tau'],
        accent_to_cluster=dict(payload['accent_to_cluster']),
    )


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, out_dir: str) -> str:
    """
    Write one JSON-lines file per split plus embeddings.csv, accents.json
    and corpus.yaml

    Features are stored after CMVN, i.e. exactly what the model consumes.
    """
    os.makedirs(out_dir, exist_ok=True)
    utt_ids, accents, embeddings = [], [], []
    for split in SPLITS:
        path = os.path.join(out_dir, f"{split}.jsonl")
        with open(path, 'w', encoding='utf-8') as f:
            for u in corpus.splits[split]:
                record = {
                    'utt_id': u.utt_id,
                    'accent': u.accent,
                    'tokens': [int(t) for t in u.tokens],
                    'features': u.features.tolist(),
                }
                f.write(json.dumps(record) + '\n')
                utt_ids.append(u.utt_id)
                accents.append(u.accent)
                embeddings.append(u.embedding)
        logger.info(f"Saved {len(corpus.splits[split])} {split} utterances to {path}")

    save_embeddings(EmbeddingTable(utt_ids, accents, np.array(embeddings)),
                    os.path.join(out_dir, 'embeddings.csv'))

    distortions = {
        'prototypes': corpus.prototypes.tolist(),
        'accents': {name: {'scale': t.scale.tolist(), 'shift': t.shift.tolist()}
                    for name, t in corpus.transforms.items()},
    }
    with open(os.path.join(out_dir, 'accents.json'), 'w', encoding='utf-8') as f:
        json.dump(distortions, f, indent=2)

    with open(os.path.join(out_dir, 'corpus.yaml'), 'w', encoding='utf-8') as f:
        yaml.safe_dump({'corpus': asdict(corpus.spec)}, f, sort_keys=False)
    return out_dir


def load_corpus(corpus_dir: str) -> Corpus:
    spec_path = os.path.join(corpus_dir, 'corpus.yaml')
    if not os.path.exists(spec_path):
        raise InputError(f"no corpus found in {corpus_dir}")
    with open(spec_path, 'r', encoding='utf-8') as f:
        spec = _build(CorpusSpec, (yaml.safe_load(f) or {}).get('corpus', {}), 'corpus')

    embeddings = load_embeddings(os.path.join(corpus_dir, 'embeddings.csv')).lookup()
    splits = {}
    for split in SPLITS:
        utts = []
        with open(os.path.join(corpus_dir, f"{split}.jsonl"), 'r', encoding='utf-8') as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                record = json.loads(line)
                if record['utt_id'] not in embeddings:
                    raise InputError(f"{split}.jsonl line {line_no}: no embedding for {record['utt_id']}")
                utts.append(Utterance(
                    utt_id=record['utt_id'],
                    accent=record['accent'],
                    features=np.array(record['features'], dtype=np.float64),
                    tokens=[int(t) for t in record['tokens']],
                    embedding=embeddings[record['utt_id']],
                ))
        splits[split] = utts

    with open(os.path.join(corpus_dir, 'accents.json'), 'r', encoding='utf-8') as f:
        distortions = json.load(f)
    transforms = {name: AccentTransform(scale=np.array(t['scale']), shift=np.array(t['shift']))
                  for name, t in distortions['accents'].items()}
    logger.info(f"Loaded corpus from {corpus_dir}: " + ", ".join(f"{s}={len(u)}" for s, u in splits.items()))
    return Corpus(spec=spec, splits=splits, transforms=transforms,
                  prototypes=np.array(distortions['prototypes']))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def save_metrics(rows: List[Dict], path: str) -> str:
    df = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Saved {len(df)} metrics rows to {path}")
    return path


def load_metrics(path: str) -> pd.DataFrame:
    return pd.read_csv(path, float_precision='round_trip')


class DataStorage:
    """Manages the files of one training stage run"""

    def __init__(self, data_dir: str):
        self.data_dir = data_dir
        self.checkpoint_dir = os.path.join(data_dir, 'checkpoints')
        self._create_directories()

    def _create_directories(self):
        os.makedirs(self.checkpoint_dir, exist_ok=True)

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.data_dir, 'metrics.csv')

    @property
    def prometheus_path(self) -> str:
        return os.path.join(self.data_dir, 'metrics.prom')

    def checkpoint_path(self, epoch: int) -> str:
        return os.path.join(self.checkpoint_dir, f"epoch{epoch:04d}.ckpt")

    def save_checkpoint(self, checkpoint: Checkpoint) -> str:
        return save_checkpoint(checkpoint, self.checkpoint_path(checkpoint.epoch))

    def epoch_checkpoints(self) -> List[str]:
        """Checkpoint paths in epoch order, epoch 0 excluded"""
        names = sorted(n for n in os.listdir(self.checkpoint_dir)
                       if n.startswith('epoch') and n.endswith('.ckpt'))
        return [os.path.join(self.checkpoint_dir, n) for n in names if n != 'epoch0000.ckpt']

    def save_metrics(self, rows: List[Dict]) -> str:
        return save_metrics(rows, self.metrics_path)
