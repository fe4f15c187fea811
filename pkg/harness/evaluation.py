"""
Evaluation and Coefficient Reporting
Joint CTC-attention decoding of a split with per-accent token error rates,
and export of the predicted interpolation coefficients with their
per-accent, per-basis distribution summary.
"""

import os
import numpy as np
import pandas as pd
from dataclasses import dataclass
from joblib import Parallel, delayed
from sklearn.metrics import adjusted_rand_score
from typing import Dict, List, Optional, Sequence, Set
import logging

from ml.accents import kmeans_assign, make_reference_targets
from ml.corpus import Utterance
from ml.data_storage import FLOAT_FORMAT, Checkpoint
from ml.decode import edit_distance, joint_beam_search
from ml.errors import CTCInfeasibleError, UsageError
from ml.losses import LossBreakdown, coeff_mse, ctc_loss, s2s_loss
from ml.model import AccentTransformer

logger = logging.getLogger(__name__)

QUARTILES = (('min', 0.0), ('q1', 0.25), ('median', 0.5), ('q3', 0.75), ('max', 1.0))


def decode_utterance(model: AccentTransformer, utt: Utterance, beam: int, ctc_weight: float,
                     alpha_ref: Optional[np.ndarray] = None) -> Dict:
    """Teacher-forced losses plus a joint beam-search decode of one utterance"""
    output, state = model.forward(utt.features, utt.tokens, utt.embedding)
    try:
        l_ctc, _ = ctc_loss(output.ctc_log_probs, utt.tokens)
    except CTCInfeasibleError as e:
        logger.warning(f"{utt.utt_id}: {e}")
        l_ctc = float('inf')
    l_s2s, _ = s2s_loss(output.s2s_log_probs, utt.tokens)
    l_mse = 0.0
    if alpha_ref is not None and output.alpha is not None:
        l_mse, _ = coeff_mse(alpha_ref, output.alpha)

    hyp = joint_beam_search(model.next_token_scorer(state.final), output.ctc_log_probs,
                            beam=beam, ctc_weight=ctc_weight, max_len=model.config.max_len)
    return {
        'utt_id': utt.utt_id,
        'accent': utt.accent,
        'reference': ' '.join(str(t) for t in utt.tokens),
        'hypothesis': ' '.join(str(t) for t in hyp.tokens),
        'n_tokens': len(utt.tokens),
        'edits': edit_distance(utt.tokens, list(hyp.tokens)),
        'joint_score': hyp.joint_score,
        'l_ctc': l_ctc,
        'l_s2s': l_s2s,
        'l_mse': l_mse,
    }


@dataclass
class EvaluationResult:
    row: Dict
    decodes: pd.DataFrame
    per_accent: pd.DataFrame


def per_accent_breakdown(decodes: pd.DataFrame, seen_accents: Optional[Set[str]] = None) -> pd.DataFrame:
    grouped = decodes.groupby('accent', sort=True).agg(
        n_utts=('utt_id', 'count'),
        n_tokens=('n_tokens', 'sum'),
        edits=('edits', 'sum'),
    ).reset_index()
    grouped['ter'] = grouped['edits'] / grouped['n_tokens']
    if seen_accents is not None:
        grouped['seen'] = grouped['accent'].isin(seen_accents)
    return grouped


def evaluate(checkpoint: Checkpoint, utts: Sequence[Utterance], split: str, beam: int = 10,
             ctc_weight: float = 0.3, lambda_ctc: float = 0.3, gamma_mtl: float = 0.01,
             seen_accents: Optional[Set[str]] = None, n_jobs: int = 1) -> EvaluationResult:
    """
    Decode a split and aggregate losses and token error rates

    Args:
        checkpoint: Model plus its frozen cluster model
        utts: Utterances to evaluate
        split: Split name written into the metrics row
        beam: Beam width of the joint search
        ctc_weight: CTC weight of the joint score
        lambda_ctc: CTC weight of the training objective reported in the row
        gamma_mtl: Coefficient regularizer weight reported in the row
        seen_accents: Accents present in training, flagged in the breakdown
        n_jobs: joblib workers; results are merged in utt_id order

    Returns:
        EvaluationResult with the metrics row, per-utterance decodes and the
        per-accent breakdown
    """
    if not utts:
        raise UsageError(f"split {split} is empty")
    model = checkpoint.model
    refs = {}
    if checkpoint.cluster_model is not None and checkpoint.reference_mode != 'none':
        for u in utts:
            refs[u.utt_id] = make_reference_targets(checkpoint.cluster_model, u.embedding,
                                                    checkpoint.reference_mode, checkpoint.reference_tau)
    else:
        gamma_mtl = 0.0

    records = Parallel(n_jobs=n_jobs)(
        delayed(decode_utterance)(model, u, beam, ctc_weight, refs.get(u.utt_id)) for u in utts
    )
    decodes = pd.DataFrame(records).sort_values('utt_id', kind='mergesort').reset_index(drop=True)

    losses = LossBreakdown.from_components(decodes['l_ctc'].mean(), decodes['l_s2s'].mean(),
                                           decodes['l_mse'].mean(), lambda_ctc, gamma_mtl)
    row = {
        'epoch': checkpoint.epoch,
        'split': split,
        'l_ctc': losses.l_ctc,
        'l_s2s': losses.l_s2s,
        'l_jca': losses.l_jca,
        'l_mse': losses.l_mse,
        'l_mtl': losses.l_mtl,
        'ter': float(decodes['edits'].sum() / decodes['n_tokens'].sum()),
    }
    per_accent = per_accent_breakdown(decodes, seen_accents)
    logger.info(f"Evaluated {len(decodes)} {split} utterances: ter={row['ter']:.4f} "
                f"l_jca={row['l_jca']:.4f} (beam {beam}, ctc weight {ctc_weight})")
    for rec in per_accent.itertuples(index=False):
        logger.info(f"  {rec.accent}: ter={rec.ter:.4f} over {rec.n_tokens} tokens")
    return EvaluationResult(row=row, decodes=decodes, per_accent=per_accent)


def write_evaluation(result: EvaluationResult, out_path: str) -> List[str]:
    """Metrics row at out_path, decodes and per-accent breakdown beside it"""
    stem, _ = os.path.splitext(out_path)
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    pd.DataFrame([result.row]).to_csv(out_path, index=False, float_format=FLOAT_FORMAT)
    result.decodes.to_csv(f"{stem}_decodes.csv", index=False, float_format=FLOAT_FORMAT)
    result.per_accent.to_csv(f"{stem}_accents.csv", index=False, float_format=FLOAT_FORMAT)
    return [out_path, f"{stem}_decodes.csv", f"{stem}_accents.csv"]


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------

def _alpha_row(model: AccentTransformer, utt: Utterance) -> Dict:
    alpha = model.coefficients(utt.embedding)
    row = {'utt_id': utt.utt_id, 'accent': utt.accent}
    for k, a in enumerate(alpha):
        row[f"alpha_{k}"] = float(a)
    return row


def coefficient_summary(coeffs: pd.DataFrame) -> pd.DataFrame:
    """min/q1/median/q3/max of every alpha_k per accent (linear interpolation)"""
    alpha_cols = [c for c in coeffs.columns if c.startswith('alpha_')]
    rows = []
    for accent, group in coeffs.groupby('accent', sort=True):
        for k, col in enumerate(alpha_cols):
            values = group[col].to_numpy()
            row = {'accent': accent, 'basis': k, 'n': len(values)}
            for name, q in QUARTILES:
                row[name] = float(np.quantile(values, q))
            rows.append(row)
    return pd.DataFrame(rows, columns=['accent', 'basis', 'n'] + [name for name, _ in QUARTILES])


def basis_specialization(summary: pd.DataFrame, accent_to_cluster: Dict[str, int]) -> pd.DataFrame:
    """Per accent: the basis with the largest median alpha against its K-means cluster"""
    rows = []
    for accent, group in summary.groupby('accent', sort=True):
        group = group.sort_values('basis')
        winner = int(group['basis'].to_numpy()[np.argmax(group['median'].to_numpy())])
        cluster = accent_to_cluster.get(accent)
        rows.append({
            'accent': accent,
            'winning_basis': winner,
            'cluster': -1 if cluster is None else int(cluster),
            'match': cluster is not None and winner == cluster,
        })
    return pd.DataFrame(rows, columns=['accent', 'winning_basis', 'cluster', 'match'])


@dataclass
class CoefficientExport:
    coefficients: pd.DataFrame
    summary: pd.DataFrame
    specialization: pd.DataFrame
    adjusted_rand_index: Optional[float]


def export_coefficients(checkpoint: Checkpoint, utts: Sequence[Utterance], out_path: str,
                        plot_path: Optional[str] = None, n_jobs: int = 1) -> CoefficientExport:
    """
    Write utt_id,accent,alpha_0..alpha_{n-1} for every utterance

    Also writes <stem>_summary.csv (quartiles per accent and basis) and
    <stem>_specialization.csv, and optionally a box plot.
    """
    model = checkpoint.model
    if not model.adapter_spec.uses_coefficients:
        raise UsageError(f"adapter mode '{model.adapter_spec.mode}' has no interpolation coefficients")
    if not utts:
        raise UsageError("no utterances to export")

    records = Parallel(n_jobs=n_jobs)(delayed(_alpha_row)(model, u) for u in utts)
    coeffs = pd.DataFrame(records).sort_values('utt_id', kind='mergesort').reset_index(drop=True)
    summary = coefficient_summary(coeffs)
    specialization = basis_specialization(summary, checkpoint.accent_to_cluster)

    ari = None
    if checkpoint.cluster_model is not None:
        assigned = [kmeans_assign(checkpoint.cluster_model, u.embedding) for u in utts]
        ari = float(adjusted_rand_score([u.accent for u in utts], assigned))
        logger.info(f"Adjusted Rand index between clusters and accents: {ari:.4f}")

    stem, _ = os.path.splitext(out_path)
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    coeffs.to_csv(out_path, index=False, float_format=FLOAT_FORMAT)
    summary.to_csv(f"{stem}_summary.csv", index=False, float_format=FLOAT_FORMAT)
    specialization.to_csv(f"{stem}_specialization.csv", index=False)
    logger.info(f"Exported coefficients of {len(coeffs)} utterances to {out_path}")
    for rec in specialization.itertuples(index=False):
        logger.info(f"  {rec.accent}: winning basis {rec.winning_basis}, cluster {rec.cluster}")

    if plot_path:
        plot_coefficients(coeffs, plot_path)
    return CoefficientExport(coeffs, summary, specialization, ari)


def plot_coefficients(coeffs: pd.DataFrame, path: str) -> str:
    """Box plot of alpha per basis, one box per accent"""
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    import seaborn as sns

    long = coeffs.melt(id_vars=['utt_id', 'accent'], var_name='basis', value_name='alpha')
    long['basis'] = long['basis'].str.replace('alpha_', 'basis ', regex=False)
    fig, ax = plt.subplots(figsize=(8, 4))
    sns.boxplot(data=long, x='basis', y='alpha', hue='accent', ax=ax)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel('interpolation coefficient')
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info(f"Saved coefficient plot to {path}")
    return path


def quartile_report(coeff_csv: str) -> str:
    """Text table of the per-accent, per-basis quartiles of an exported CSV"""
    coeffs = pd.read_csv(coeff_csv, float_precision='round_trip')
    summary = coefficient_summary(coeffs)
    return summary.to_string(index=False, float_format=lambda v: f"{v:.4f}")
