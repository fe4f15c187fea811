#!/usr/bin/env python
"""
Accent Adapter Lab CLI
Corpus generation, staged training, checkpoint averaging, evaluation,
coefficient export and the gradient check suite.
"""

import argparse
import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from dotenv import load_dotenv
import logging

from harness.config import LOG_FORMAT, env_settings, load_config, load_corpus_spec
from harness.evaluation import evaluate, export_coefficients, quartile_report, write_evaluation
from harness.gradcheck import SUITE, run_gradcheck
from harness.trainer import average_checkpoints, last_checkpoints, train_stage
from ml.corpus import generate_corpus
from ml.data_storage import load_checkpoint, load_corpus, save_checkpoint, save_corpus

logger = logging.getLogger('accent_lab')

DEFAULT_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config', 'config.yaml')


def _corpus(args):
    """Load --corpus if given, otherwise regenerate from the config's corpus section"""
    if args.corpus:
        return load_corpus(args.corpus)
    config = load_config(args.config)
    logger.info(f"No --corpus given, generating it from {args.config}")
    return generate_corpus(config.corpus)


def cmd_gen_corpus(args) -> int:
    spec = load_corpus_spec(args.spec)
    corpus = generate_corpus(spec)
    save_corpus(corpus, args.out)
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    config.train.stage = args.stage.replace('-', '_')
    if args.epochs is not None:
        config.train.epochs = args.epochs
    corpus = load_corpus(args.corpus) if args.corpus else generate_corpus(config.corpus)
    init = load_checkpoint(args.init) if args.init else None
    result = train_stage(config, corpus, args.out, init)
    last_cv = [r for r in result.rows if r['split'] == 'cv'][-1]
    logger.info(f"cv after epoch {last_cv['epoch']}: l_jca={last_cv['l_jca']:.4f} ter={last_cv['ter']:.4f}")
    return 0


def cmd_avg(args) -> int:
    checkpoint = average_checkpoints(last_checkpoints(args.input, args.last))
    save_checkpoint(checkpoint, args.out)
    logger.info(f"Saved averaged checkpoint to {args.out}")
    return 0


def cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    corpus = _corpus(args)
    seen = {u.accent for u in corpus.utterances('train')}
    result = evaluate(checkpoint, corpus.utterances(args.split), args.split, beam=args.beam,
                      ctc_weight=args.ctc_weight, lambda_ctc=args.lambda_ctc,
                      gamma_mtl=args.gamma_mtl, seen_accents=seen, n_jobs=args.n_jobs)
    for path in write_evaluation(result, args.out):
        logger.info(f"Wrote {path}")
    return 0


def cmd_export_coeffs(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    corpus = _corpus(args)
    export_coefficients(checkpoint, corpus.utterances(args.split), args.out,
                        plot_path=args.plot, n_jobs=args.n_jobs)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.module, instances=args.instances, seed=args.seed)
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    if failed:
        logger.error(f"{len(failed)} of {len(results)} gradient checks failed: "
                     + ", ".join(f"{r.module}.{r.name}" for r in failed))
        return 1
    logger.info(f"All {len(results)} gradient checks passed in {total:.1f}s")
    return 0


def cmd_report(args) -> int:
    print(quartile_report(args.coeffs))
    return 0


def build_parser(settings) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='accent-lab', description=__doc__.strip().splitlines()[0])
    parser.add_argument('--verbose', '-v', action='store_true', help='debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-corpus', help='generate the synthetic accented corpus')
    p.add_argument('--spec', required=True, help='YAML file with a corpus section')
    p.add_argument('--out', required=True, help='output directory')
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser('train', help='run one training stage')
    p.add_argument('--config', required=True)
    p.add_argument('--stage', required=True, choices=['baseline', 'inject-frozen', 'finetune-all'])
    p.add_argument('--out', required=True, help='stage directory')
    p.add_argument('--init', help='checkpoint the stage starts from')
    p.add_argument('--corpus', help='corpus directory (default: generate from the config)')
    p.add_argument('--epochs', type=int, help='override train.epochs')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('avg', help='average the last K epoch checkpoints of a stage')
    p.add_argument('--last', type=int, default=5)
    p.add_argument('--in', dest='input', required=True, help='stage directory')
    p.add_argument('--out', required=True, help='averaged checkpoint file')
    p.set_defaults(func=cmd_avg)

    for name, func, helptext in (('eval', cmd_eval, 'decode a split and score it'),
                                 ('export-coeffs', cmd_export_coeffs, 'export interpolation coefficients')):
        p = sub.add_parser(name, help=helptext)
        p.add_argument('--checkpoint', required=True)
        p.add_argument('--split', default='cv', choices=['train', 'cv', 'test'])
        p.add_argument('--out', required=True, help='output CSV')
        p.add_argument('--corpus', help='corpus directory (default: generate from --config)')
        p.add_argument('--config', default=DEFAULT_CONFIG)
        p.add_argument('--n-jobs', type=int, default=settings['n_jobs'])
        p.set_defaults(func=func)
        if name == 'eval':
            p.add_argument('--beam', type=int, default=10)
            p.add_argument('--ctc-weight', type=float, default=0.3)
            p.add_argument('--lambda-ctc', type=float, default=0.3)
            p.add_argument('--gamma-mtl', type=float, default=0.01)
        else:
            p.add_argument('--plot', help='box plot PNG')

    p = sub.add_parser('gradcheck', help='finite-difference gradient suite')
    p.add_argument('--module', choices=sorted(SUITE))
    p.add_argument('--instances', type=int, default=20)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser('report', help='quartile table of an exported coefficient CSV')
    p.add_argument('--coeffs', required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    load_dotenv()
    settings = env_settings()
    args = build_parser(settings).parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else settings['log_level'],
        format=LOG_FORMAT,
    )
    try:
        return args.func(args)
    except ValueError as e:
        logger.error(f"{args.command} failed: {e}")
        return 2


if __name__ == '__main__':
    sys.exit(main())
