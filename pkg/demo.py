#!/usr/bin/env python
"""
Quick Start Demo
Runs the whole accent adapter pipeline on the synthetic corpus: baseline,
adapter injection into the frozen baseline, full fine-tuning, checkpoint
averaging, joint decoding and the coefficient report.
"""

import argparse
import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from dotenv import load_dotenv
import logging

from harness.config import LOG_FORMAT, env_settings, load_config
from harness.experiment import MATCHED_BASELINE, PipelineSummary, run_pipeline

logger = logging.getLogger(__name__)

QUICK_EPOCHS = {'baseline': 2, 'inject_frozen': 1, 'finetune_all': 1}


def run(config_path: str, out_dir: str, quick: bool = False, hold_out=None, n_jobs: int = 1) -> PipelineSummary:
    config = load_config(config_path)
    if hold_out:
        config.corpus.held_out_accents = list(hold_out)
    print("\n🧠 Baseline, 🔌 adapter injection, 🔓 fine-tuning, 📏 matched baseline")
    return run_pipeline(config, out_dir, epochs=QUICK_EPOCHS if quick else None, n_jobs=n_jobs)


def print_summary(summary: PipelineSummary):
    print("\n" + "=" * 60)
    print("📋 Summary")
    print("=" * 60)

    jca = summary.cv_l_jca
    print("\n📉 cv L_jca at the end of each stage:")
    for stage, value in jca.items():
        print(f"   • {stage:<14} {value:.4f}")
    ordered = jca['finetune_all'] <= jca['inject_frozen'] <= jca['baseline']
    print(f"   {'✅' if ordered else '⚠️ '} finetune_all <= inject_frozen <= baseline: {ordered}")

    print("\n🎯 cv TER at matched epochs (last epoch, greedy CTC):")
    print(f"   • baseline      {summary.cv_ter[MATCHED_BASELINE]:.4f}")
    print(f"   • adapted       {summary.cv_ter['finetune_all']:.4f}")
    if summary.relative_reduction is not None:
        print(f"   • relative reduction {summary.relative_reduction:.1%}")

    results = summary.results
    if results:
        print("\n🔍 cv TER of the averaged checkpoints (joint beam search):")
        print(f"   • baseline      {results[(MATCHED_BASELINE, 'cv')].row['ter']:.4f}")
        print(f"   • adapted       {results[('finetune_all', 'cv')].row['ter']:.4f}")

        print("\n🗺️  test TER per accent (adapted model):")
        for rec in results[('finetune_all', 'test')].per_accent.itertuples(index=False):
            flag = '' if rec.seen else '  (held out of training)'
            print(f"   • {rec.accent}: {rec.ter:.4f} over {rec.n_tokens} tokens{flag}")

    export = summary.export
    if export is not None:
        print(f"\n🧩 Basis specialization: {summary.specialization_matches}/{len(export.specialization)} accents "
              f"peak on their K-means cluster's basis")
        if export.adjusted_rand_index is not None:
            print(f"   • adjusted Rand index (clusters vs accents): {export.adjusted_rand_index:.3f}")


def main():
    load_dotenv()
    settings = env_settings()
    parser = argparse.ArgumentParser(description='Accent adapter lab quick start')
    parser.add_argument('--config', default=os.path.join(os.path.dirname(os.path.abspath(__file__)),
                                                         'config', 'config.yaml'))
    parser.add_argument('--out', default=os.path.join(settings['data_dir'], 'demo'))
    parser.add_argument('--quick', action='store_true', help='a few epochs per stage')
    parser.add_argument('--hold-out', nargs='*', default=None, help='accents kept out of training')
    args = parser.parse_args()

    logging.basicConfig(level=settings['log_level'], format=LOG_FORMAT)

    print("=" * 60)
    print("🗣️  Accent Adapter Lab - Quick Start Demo")
    print("=" * 60)
    summary = run(args.config, args.out, quick=args.quick, hold_out=args.hold_out,
                  n_jobs=settings['n_jobs'])
    print_summary(summary)

    print("\n📁 Files created under", args.out)
    print("   • corpus/                      - synthetic corpus")
    print("   • <stage>/metrics.csv          - per-epoch losses and TER")
    print("   • <stage>/metrics.prom         - Prometheus textfile")
    print("   • <stage>/checkpoints/         - per-epoch checkpoints")
    print("   • eval/                        - decodes, per-accent TER, coefficients")
    print()


if __name__ == "__main__":
    main()
