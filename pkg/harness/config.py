"""
Experiment Configuration
Maps the YAML sections model/adapter/train/corpus onto dataclasses and reads
ambient settings from the environment.
"""

import os
import yaml
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional
import logging

from ml.adapters import AdapterSpec
from ml.corpus import CorpusSpec
from ml.errors import ConfigurationError
from ml.model import ModelConfig

logger = logging.getLogger(__name__)

STAGES = ('baseline', 'inject_frozen', 'finetune_all')
STAGE_EPOCHS = {'baseline': 6, 'inject_frozen': 3, 'finetune_all': 3}
MTL_MODES = ('none', 'hard', 'uniform', 'soft')
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


@dataclass
class TrainConfig:
    """
    Training schedule and objective weights

    Full-scale reference: warmup 25000 steps, lr 10, average of the last
    five epochs, lambda 0.3, gamma 0.01.
    """
    stage: str = 'baseline'
    epochs: Optional[int] = None
    batch_size: int = 8
    base_lr: float = 10.0
    warmup_steps: int = 200
    momentum: float = 0.0
    grad_clip: float = 0.0
    lambda_ctc: float = 0.3
    gamma_mtl: float = 0.01
    mtl_mode: str = 'hard'
    tau: float = 1.0
    kmeans_unit_norm: bool = False
    kmeans_max_iter: int = 100
    init_predictor_from_clusters: bool = False
    avg_last: int = 5
    beam: int = 10
    ctc_weight: float = 0.3
    seed: int = 0

    def resolved_epochs(self) -> int:
        return self.epochs if self.epochs is not None else STAGE_EPOCHS[self.stage]

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"Unknown stage: {self.stage}")
        if self.mtl_mode not in MTL_MODES:
            raise ConfigurationError(f"Unknown mtl_mode: {self.mtl_mode}")
        if self.resolved_epochs() < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps < 1:
            raise ConfigurationError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.avg_last < 1:
            raise ConfigurationError(f"avg_last must be >= 1, got {self.avg_last}")
        if not 0.0 <= self.lambda_ctc <= 1.0:
            raise ConfigurationError(f"lambda_ctc must lie in [0, 1], got {self.lambda_ctc}")
        if self.gamma_mtl < 0.0:
            raise ConfigurationError(f"gamma_mtl must be >= 0, got {self.gamma_mtl}")
        if self.mtl_mode == 'soft' and not self.tau > 0:
            raise ConfigurationError(f"soft targets need tau > 0, got {self.tau}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.grad_clip < 0.0:
            raise ConfigurationError(f"grad_clip must be >= 0 (0 disables), got {self.grad_clip}")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)

    def validate(self):
        self.model.validate()
        self.adapter.validate(self.model.enc_layers)
        self.train.validate()
        self.corpus.validate()

    def to_dict(self) -> Dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


SECTIONS = {
    'model': ModelConfig,
    'adapter': AdapterSpec,
    'train': TrainConfig,
    'corpus': CorpusSpec,
}


def _section_mapping(name: str, data) -> Dict:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"section '{name}' must be a mapping")
    return dict(data)


def section_from_dict(name: str, data: Optional[Dict]):
    """Build one section's dataclass; unknown keys are errors"""
    cls = SECTIONS[name]
    data = _section_mapping(name, data)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown keys in section '{name}': {unknown}")
    return cls(**data)


def config_from_dict(data: Optional[Dict]) -> ExperimentConfig:
    """
    Build an ExperimentConfig

    Model input_dim/vocab_size and the adapter embed_dim default to the
    corpus section's values when not given explicitly.
    """
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigurationError("configuration must be a mapping of sections")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown config sections: {unknown}")
    corpus = section_from_dict('corpus', data.get('corpus'))
    model_data = _section_mapping('model', data.get('model'))
    model_data.setdefault('input_dim', corpus.feat_dim)
    model_data.setdefault('vocab_size', corpus.vocab_size)
    adapter_data = _section_mapping('adapter', data.get('adapter'))
    adapter_data.setdefault('embed_dim', corpus.embed_dim)
    config = ExperimentConfig(
        model=section_from_dict('model', model_data),
        adapter=section_from_dict('adapter', adapter_data),
        train=section_from_dict('train', data.get('train')),
        corpus=corpus,
    )
    config.validate()
    return config


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        data = yaml.safe_load(f)
    logger.info(f"Loaded configuration from {path}")
    return config_from_dict(data)


def load_corpus_spec(path: str) -> CorpusSpec:
    """Read the corpus section of a YAML file (other sections are ignored)"""
    if not os.path.exists(path):
        raise ConfigurationError(f"corpus spec not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"corpus spec {path} must be a mapping of sections")
    spec = section_from_dict('corpus', data.get('corpus'))
    spec.validate()
    return spec


def save_config(config: ExperimentConfig, path: str) -> str:
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)
    return path


def env_settings() -> Dict:
    """Ambient settings; call load_dotenv() first in entry points"""
    return {
        'log_level': os.getenv('LOG_LEVEL', 'INFO').upper(),
        'data_dir': os.getenv('DATA_DIR', './data'),
        'n_jobs': int(os.getenv('N_JOBS', 1)),
    }
