"""
Staged Trainer
Baseline, adapter injection into the frozen baseline and full fine-tuning,
driven by plain gradient descent on the noam schedule, plus checkpoint
averaging.
"""

import os
import numpy as np
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple
import logging

from ml.accents import ClusterModel, EmbeddingTable, kmeans_fit, make_reference_targets
from ml.adapters import AdapterSpec
from ml.corpus import Corpus, Utterance
from ml.data_storage import Checkpoint, DataStorage, load_checkpoint
from ml.decode import ctc_greedy, edit_distance
from ml.errors import CheckpointError, ConfigurationError, UsageError
from ml.losses import LossBreakdown, coeff_mse, ctc_loss, s2s_loss
from ml.model import AccentTransformer
from ml.numerics import Parameter
from harness.config import STAGES, ExperimentConfig, save_config
from harness.prometheus_exporter import PrometheusExporter

logger = logging.getLogger(__name__)


def noam_lr(step: int, base_lr: float, d_model: int, warmup: int) -> float:
    """Linear warmup then inverse square-root decay"""
    if step < 1:
        raise ConfigurationError(f"step must be >= 1, got {step}")
    return base_lr * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class GradientDescent:
    """
    Gradient descent over the trainable parameters

    Args:
        params: Parameters addressed by name
        momentum: Heavy-ball coefficient; 0 gives plain descent
        grad_clip: Global L2 norm limit; 0 disables clipping
    """

    def __init__(self, params: Dict[str, Parameter], momentum: float = 0.0, grad_clip: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {name: np.zeros_like(p.value) for name, p in params.items()}

    def trainable(self) -> List[Tuple[str, Parameter]]:
        return [(name, p) for name, p in self.params.items() if p.requires_grad]

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(p.grad ** 2) for _, p in self.trainable())))

    def step(self, lr: float) -> float:
        norm = self.grad_norm()
        factor = 1.0
        if self.grad_clip > 0 and norm > self.grad_clip:
            factor = self.grad_clip / norm
        for name, p in self.trainable():
            g = p.grad * factor
            if self.momentum > 0:
                self.velocity[name] = self.momentum * self.velocity[name] + g
                g = self.velocity[name]
            p.value -= lr * g
        return norm


@dataclass
class UtteranceLoss:
    l_ctc: float
    l_s2s: float
    l_mse: float
    hypothesis: List[int]


def utterance_step(model: AccentTransformer, utt: Utterance, lambda_ctc: float,
                   gamma_mtl: float, alpha_ref: Optional[np.ndarray] = None,
                   scale: float = 1.0, backward: bool = True) -> UtteranceLoss:
    """
    Forward one utterance, optionally accumulating scaled gradients of
    lambda*L_ctc + (1 - lambda)*L_s2s + gamma*L_mse
    """
    output, _ = model.forward(utt.features, utt.tokens, utt.embedding)
    l_ctc, g_ctc = ctc_loss(output.ctc_log_probs, utt.tokens)
    l_s2s, g_s2s = s2s_loss(output.s2s_log_probs, utt.tokens)
    l_mse, g_mse = 0.0, None
    if alpha_ref is not None and output.alpha is not None:
        l_mse, g_mse = coeff_mse(alpha_ref, output.alpha)
    if backward:
        model.backward(
            output,
            d_ctc=scale * lambda_ctc * g_ctc,
            d_s2s=scale * (1.0 - lambda_ctc) * g_s2s,
            d_alpha=scale * gamma_mtl * g_mse if g_mse is not None else None,
        )
    return UtteranceLoss(l_ctc, l_s2s, l_mse, ctc_greedy(output.ctc_log_probs))


def split_row(model: AccentTransformer, utts: Sequence[Utterance], epoch: int, split: str,
              lambda_ctc: float, gamma_mtl: float,
              alpha_refs: Optional[Dict[str, np.ndarray]] = None) -> Dict:
    """Mean loss components over a split and greedy-CTC token error rate"""
    totals = np.zeros(3)
    edits = 0
    n_tokens = 0
    for utt in utts:
        ref = alpha_refs.get(utt.utt_id) if alpha_refs else None
        res = utterance_step(model, utt, lambda_ctc, gamma_mtl, ref, backward=False)
        totals += (res.l_ctc, res.l_s2s, res.l_mse)
        edits += edit_distance(utt.tokens, res.hypothesis)
        n_tokens += len(utt.tokens)
    l_ctc, l_s2s, l_mse = totals / max(1, len(utts))
    losses = LossBreakdown.from_components(l_ctc, l_s2s, l_mse, lambda_ctc, gamma_mtl)
    return {
        'epoch': epoch,
        'split': split,
        'l_ctc': losses.l_ctc,
        'l_s2s': losses.l_s2s,
        'l_jca': losses.l_jca,
        'l_mse': losses.l_mse,
        'l_mtl': losses.l_mtl,
        'ter': edits / max(1, n_tokens),
    }


def accent_cluster_mapping(accents: Sequence[str], labels: np.ndarray, n_clusters: int) -> Dict[str, int]:
    """Majority K-means cluster of each accent (lowest index on ties)"""
    mapping = {}
    labels = np.asarray(labels, dtype=int)
    accents = np.asarray(accents)
    for accent in sorted(set(accents.tolist())):
        counts = np.bincount(labels[accents == accent], minlength=n_clusters)
        mapping[accent] = int(np.argmax(counts))
    return mapping


def fit_clusters(utts: Sequence[Utterance], n_clusters: int, seed: int, max_iter: int,
                 unit_norm: bool) -> Tuple[ClusterModel, Dict[str, int]]:
    table = EmbeddingTable(
        utt_ids=[u.utt_id for u in utts],
        accents=[u.accent for u in utts],
        embeddings=np.array([u.embedding for u in utts]),
    )
    model = kmeans_fit(table, n_clusters, seed=seed, max_iter=max_iter, unit_norm=unit_norm)
    mapping = accent_cluster_mapping(table.accents, model.labels, n_clusters)
    logger.info(f"Accent to cluster mapping: {mapping}")
    return model, mapping


def reference_targets(cluster: Optional[ClusterModel], mode: str, tau: float,
                      corpus: Corpus) -> Optional[Dict[str, np.ndarray]]:
    if cluster is None or mode == 'none':
        return None
    refs = {}
    for utts in corpus.splits.values():
        for u in utts:
            refs[u.utt_id] = make_reference_targets(cluster, u.embedding, mode, tau)
    return refs


@dataclass
class StageResult:
    checkpoint: Checkpoint
    rows: List[Dict] = field(default_factory=list)
    checkpoint_paths: List[str] = field(default_factory=list)


def _check_corpus(config: ExperimentConfig, corpus: Corpus):
    cfg = config.model
    if cfg.input_dim != corpus.spec.feat_dim:
        raise ConfigurationError(
            f"model input_dim {cfg.input_dim} does not match corpus feat_dim {corpus.spec.feat_dim}"
        )
    if cfg.vocab_size != corpus.spec.vocab_size:
        raise ConfigurationError(
            f"model vocab_size {cfg.vocab_size} does not match corpus vocabulary {corpus.spec.vocab_size}"
        )


def prepare_stage(config: ExperimentConfig, corpus: Corpus,
                  init: Optional[Checkpoint] = None) -> Checkpoint:
    """
    Build the model a stage starts from

    inject_frozen adds zero-initialized adapters to the init model and fits
    the frozen cluster model; finetune_all continues the init model as is.
    """
    train = config.train
    stage = train.stage
    if stage == 'baseline':
        model = AccentTransformer(config.model, AdapterSpec(mode='none'), seed=train.seed)
        return Checkpoint(model=model, stage=stage, epoch=0)

    if init is None:
        raise UsageError(f"stage {stage} needs a prior checkpoint (--init)")

    if stage == 'finetune_all':
        if not init.model.adapters:
            logger.warning("finetune_all started from a checkpoint without adapters")
        model = init.model
        model.set_trainable(base=True, adapters=True)
        return replace(init, stage=stage, epoch=0)

    if init.model.adapters:
        raise UsageError("inject_frozen expects an adapter-free baseline checkpoint")
    config.adapter.validate(init.model.config.enc_layers)
    if config.adapter.mode == 'none':
        raise UsageError("inject_frozen needs adapter.mode other than 'none'")
    model = AccentTransformer(init.model.config, config.adapter, seed=train.seed)
    model.load_state_dict(init.model.state_dict(), strict=False)

    cluster, mapping = None, {}
    wants_clusters = train.mtl_mode != 'none' or train.init_predictor_from_clusters
    if config.adapter.uses_coefficients and wants_clusters:
        cluster, mapping = fit_clusters(corpus.splits['train'], config.adapter.n_bases, train.seed,
                                        train.kmeans_max_iter, train.kmeans_unit_norm)
        if train.init_predictor_from_clusters:
            freq = np.bincount(cluster.labels, minlength=cluster.n_clusters) / len(cluster.labels)
            model.predictor.set_prior(freq)
            logger.info(f"Predictor prior set from cluster frequencies {np.round(freq, 4).tolist()}")
    model.set_trainable(base=False, adapters=True)
    reference_mode = train.mtl_mode if cluster is not None else 'none'
    return Checkpoint(model=model, stage=stage, epoch=0, cluster_model=cluster,
                      reference_mode=reference_mode, reference_tau=train.tau,
                      accent_to_cluster=mapping)


def train_stage(config: ExperimentConfig, corpus: Corpus, out_dir: str,
                init: Optional[Checkpoint] = None) -> StageResult:
    """
    Run one training stage

    Writes per-epoch checkpoints (epoch 0 is the starting point), metrics.csv
    and metrics.prom under out_dir.

    Returns:
        StageResult with the final checkpoint and every metrics row
    """
    config.validate()
    train = config.train
    if train.stage not in STAGES:
        raise ConfigurationError(f"Unknown stage: {train.stage}")
    state = prepare_stage(config, corpus, init)
    model = state.model
    _check_corpus(replace(config, model=model.config), corpus)

    storage = DataStorage(out_dir)
    save_config(config, os.path.join(out_dir, 'config.yaml'))
    exporter = PrometheusExporter(storage.prometheus_path, train.stage)

    # the baseline objective carries no coefficient term
    gamma = train.gamma_mtl if state.reference_mode != 'none' else 0.0
    alpha_refs = reference_targets(state.cluster_model, state.reference_mode, state.reference_tau, corpus)
    train_utts = corpus.splits['train']
    cv_utts = corpus.splits['cv']
    optimizer = GradientDescent(model.parameters(), train.momentum, train.grad_clip)
    rng = np.random.default_rng([train.seed, STAGES.index(train.stage)])
    epochs = train.resolved_epochs()
    d_model = model.config.d_model

    result = StageResult(checkpoint=state)
    step = 0
    lr = 0.0
    for epoch in range(epochs + 1):
        if epoch > 0:
            order = rng.permutation(len(train_utts))
            for start in range(0, len(order), train.batch_size):
                batch = [train_utts[i] for i in order[start:start + train.batch_size]]
                model.zero_grad()
                for utt in batch:
                    ref = alpha_refs.get(utt.utt_id) if alpha_refs else None
                    utterance_step(model, utt, train.lambda_ctc, gamma, ref, scale=1.0 / len(batch))
                step += 1
                lr = noam_lr(step, train.base_lr, d_model, train.warmup_steps)
                norm = optimizer.step(lr)
                logger.debug(f"step {step} lr={lr:.6g} grad_norm={norm:.6g}")

        for split, utts in (('train', train_utts), ('cv', cv_utts)):
            row = split_row(model, utts, epoch, split, train.lambda_ctc, gamma, alpha_refs)
            result.rows.append(row)
            exporter.record_row(row)
            logger.info(
                f"Epoch {epoch}/{epochs} {split} l_ctc={row['l_ctc']:.4f} l_s2s={row['l_s2s']:.4f} "
                f"l_mtl={row['l_mtl']:.4f} ter={row['ter']:.4f}"
            )
        exporter.record_progress(epoch, step, lr)
        exporter.write()

        state.epoch = epoch
        result.checkpoint_paths.append(storage.save_checkpoint(state))
        storage.save_metrics(result.rows)

    model.zero_grad()
    result.checkpoint = state
    logger.info(f"Stage {train.stage} finished after {step} updates")
    return result


def _same_architecture(a: Checkpoint, b: Checkpoint) -> bool:
    if a.model.config != b.model.config or a.model.adapter_spec != b.model.adapter_spec:
        return False
    pa, pb = a.model.parameters(), b.model.parameters()
    return list(pa) == list(pb) and all(pa[n].shape == pb[n].shape for n in pa)


def average_checkpoints(paths: Sequence[str]) -> Checkpoint:
    """
    Arithmetic mean of every parameter over the given checkpoints

    Metadata (stage, epoch, clusters) comes from the last path.
    """
    if len(paths) < 1:
        raise UsageError("average_checkpoints needs at least one checkpoint")
    checkpoints = [load_checkpoint(p) for p in paths]
    last = checkpoints[-1]
    for path, ckpt in zip(paths, checkpoints):
        if not _same_architecture(ckpt, last):
            raise CheckpointError(f"{path} does not share the architecture of {paths[-1]}")

    all_params = [ckpt.model.parameters() for ckpt in checkpoints]
    state = last.model.state_dict()
    for name in state:
        total = np.zeros_like(state[name])
        for params in all_params:
            total = total + params[name].value
        state[name] = total / len(checkpoints)
    last.model.load_state_dict(state, strict=True)
    logger.info(f"Averaged {len(paths)} checkpoints")
    return last


def last_checkpoints(run_dir: str, k: int) -> List[str]:
    """The last k per-epoch checkpoints of a stage directory"""
    if k < 1:
        raise UsageError(f"--last must be >= 1, got {k}")
    paths = DataStorage(run_dir).epoch_checkpoints()
    if not paths:
        raise UsageError(f"no epoch checkpoints under {run_dir}")
    if len(paths) < k:
        logger.warning(f"only {len(paths)} checkpoints available, averaging all of them")
    return paths[-k:]
