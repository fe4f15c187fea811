"""
Experiment Pipeline
Baseline, adapter injection, full fine-tuning and a baseline trained for the
same total number of epochs, followed by checkpoint averaging, optional
joint decoding and the coefficient report.
"""

import copy
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple
import logging

from harness.config import STAGES, ExperimentConfig
from harness.evaluation import (CoefficientExport, EvaluationResult, evaluate, export_coefficients,
                                write_evaluation)
from harness.trainer import StageResult, average_checkpoints, last_checkpoints, train_stage
from ml.corpus import generate_corpus
from ml.data_storage import save_checkpoint, save_corpus

logger = logging.getLogger(__name__)

MATCHED_BASELINE = 'baseline_matched'


@dataclass
class PipelineSummary:
    cv_l_jca: Dict[str, float]
    cv_ter: Dict[str, float]
    results: Dict[Tuple[str, str], EvaluationResult] = field(default_factory=dict)
    export: Optional[CoefficientExport] = None

    @property
    def relative_reduction(self) -> Optional[float]:
        """Relative cv TER reduction of finetune_all over the matched baseline"""
        base = self.cv_ter[MATCHED_BASELINE]
        if base <= 0:
            return None
        return (base - self.cv_ter['finetune_all']) / base

    @property
    def specialization_matches(self) -> Optional[int]:
        if self.export is None:
            return None
        return int(self.export.specialization['match'].sum())


def stage_config(config: ExperimentConfig, stage: str, epochs: Optional[int] = None) -> ExperimentConfig:
    cfg = copy.deepcopy(config)
    cfg.train.stage = stage
    if epochs is not None:
        cfg.train.epochs = epochs
    return cfg


def _last_cv(stage: StageResult) -> Dict:
    return [r for r in stage.rows if r['split'] == 'cv'][-1]


def run_pipeline(config: ExperimentConfig, out_dir: str, epochs: Optional[Dict[str, int]] = None,
                 decode: bool = True, n_jobs: int = 1) -> PipelineSummary:
    """
    Train every stage under out_dir and report them

    Args:
        config: Experiment configuration; train.stage is set per stage
        out_dir: Run directory (corpus/, one directory per stage, eval/)
        epochs: Per-stage epoch override, e.g. {'baseline': 2, ...}
        decode: Run joint beam search on the averaged checkpoints
        n_jobs: joblib workers for decoding and the coefficient export

    Returns:
        PipelineSummary; cv_ter holds the greedy CTC cv TER of the last epoch
    """
    epochs = epochs or {}
    corpus = generate_corpus(config.corpus)
    save_corpus(corpus, os.path.join(out_dir, 'corpus'))
    seen = {u.accent for u in corpus.utterances('train')}

    stage_cfgs = {s: stage_config(config, s, epochs.get(s, config.train.epochs)) for s in STAGES}
    logger.info("Stage 1: baseline")
    baseline = train_stage(stage_cfgs['baseline'], corpus, os.path.join(out_dir, 'baseline'))
    logger.info("Stage 2: adapters injected into the frozen baseline")
    injected = train_stage(stage_cfgs['inject_frozen'], corpus, os.path.join(out_dir, 'inject_frozen'),
                           baseline.checkpoint)
    logger.info("Stage 3: fine-tuning every parameter")
    finetuned = train_stage(stage_cfgs['finetune_all'], corpus, os.path.join(out_dir, 'finetune_all'),
                            injected.checkpoint)

    total_epochs = sum(c.train.resolved_epochs() for c in stage_cfgs.values())
    logger.info(f"Matched baseline: {total_epochs} epochs without adapters")
    matched = train_stage(stage_config(config, 'baseline', total_epochs), corpus,
                          os.path.join(out_dir, MATCHED_BASELINE))

    summary = PipelineSummary(
        cv_l_jca={
            'baseline': _last_cv(baseline)['l_jca'],
            'inject_frozen': _last_cv(injected)['l_jca'],
            'finetune_all': _last_cv(finetuned)['l_jca'],
        },
        cv_ter={
            MATCHED_BASELINE: _last_cv(matched)['ter'],
            'finetune_all': _last_cv(finetuned)['ter'],
        },
    )

    averaged = {}
    for name in (MATCHED_BASELINE, 'finetune_all'):
        ckpt = average_checkpoints(last_checkpoints(os.path.join(out_dir, name), config.train.avg_last))
        save_checkpoint(ckpt, os.path.join(out_dir, f"{name}_avg.ckpt"))
        averaged[name] = ckpt

    train = config.train
    if decode:
        for name, ckpt in averaged.items():
            for split in ('cv', 'test'):
                result = evaluate(ckpt, corpus.utterances(split), split, beam=train.beam,
                                  ctc_weight=train.ctc_weight, lambda_ctc=train.lambda_ctc,
                                  gamma_mtl=train.gamma_mtl, seen_accents=seen, n_jobs=n_jobs)
                write_evaluation(result, os.path.join(out_dir, 'eval', f"{name}_{split}.csv"))
                summary.results[(name, split)] = result

    if averaged['finetune_all'].model.adapter_spec.uses_coefficients:
        plot_path = os.path.join(out_dir, 'eval', 'coefficients.png') if decode else None
        summary.export = export_coefficients(averaged['finetune_all'], corpus.utterances('test'),
                                             os.path.join(out_dir, 'eval', 'coefficients.csv'),
                                             plot_path=plot_path, n_jobs=n_jobs)

    reduction = summary.relative_reduction
    if reduction is not None:
        logger.info(f"cv TER {summary.cv_ter[MATCHED_BASELINE]:.4f} -> {summary.cv_ter['finetune_all']:.4f} "
                    f"({reduction:.1%} relative reduction)")
    return summary
