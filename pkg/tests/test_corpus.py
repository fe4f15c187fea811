"""
Unit tests for the synthetic multi-accent corpus and CMVN
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest
import numpy as np
import numpy.testing as npt
from sklearn.metrics import adjusted_rand_score
from ml.accents import EmbeddingTable, kmeans_fit
from ml.adapters import GatedAdapter
from ml.corpus import CorpusSpec, cmvn, generate_corpus, inverse_distortion
from ml.errors import ConfigurationError, InputError
from ml.losses import min_ctc_frames


def small_spec(**overrides):
    values = dict(train_size=40, cv_size=8, test_size=8, embed_dim=16)
    values.update(overrides)
    return CorpusSpec(**values)


def test_noiseless_identity_tiles_prototypes():
    spec = small_spec(noise_sigma=0.0, accent_scale_range=[1.0, 1.0],
                      accent_shift_range=[0.0, 0.0], cmvn='none')
    corpus = generate_corpus(spec)
    for utt in corpus.utterances('train'):
        expected = np.repeat(corpus.prototypes[np.array(utt.tokens) - 2], spec.frames_per_token, axis=0)
        npt.assert_array_equal(utt.features, expected)


def test_same_seed_same_corpus():
    a = generate_corpus(small_spec(seed=3))
    b = generate_corpus(small_spec(seed=3))
    for split in ('train', 'cv', 'test'):
        for u, v in zip(a.utterances(split), b.utterances(split)):
            assert u.utt_id == v.utt_id
            assert u.tokens == v.tokens
            npt.assert_array_equal(u.features, v.features)
            npt.assert_array_equal(u.embedding, v.embedding)


def test_utterances_are_ctc_feasible():
    corpus = generate_corpus(small_spec(min_tokens=1, max_tokens=6))
    for split in ('train', 'cv', 'test'):
        for utt in corpus.utterances(split):
            assert utt.features.shape[0] >= 2 * len(utt.tokens) + 1
            assert utt.features.shape[0] >= min_ctc_frames(utt.tokens)
            assert min(utt.tokens) >= 2
            assert max(utt.tokens) < corpus.spec.vocab_size


def test_splits_are_disjoint():
    corpus = generate_corpus(small_spec())
    ids = [u.utt_id for s in ('train', 'cv', 'test') for u in corpus.utterances(s)]
    assert len(ids) == len(set(ids))
    with pytest.raises(InputError):
        corpus.utterances('dev')


def test_held_out_accents_only_in_evaluation_splits():
    corpus = generate_corpus(small_spec(held_out_accents=['A3']))
    assert 'A3' not in {u.accent for u in corpus.utterances('train')}
    assert 'A3' in {u.accent for u in corpus.utterances('test')}


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        small_spec(held_out_accents=['A9']).validate()
    with pytest.raises(ConfigurationError):
        small_spec(n_accents=2, held_out_accents=['A0', 'A1']).validate()
    with pytest.raises(ConfigurationError):
        small_spec(accent_scale_range=[2.0, 0.5]).validate()
    with pytest.raises(ConfigurationError):
        small_spec(frames_per_token=2).validate()
    with pytest.raises(ConfigurationError):
        small_spec(cmvn='speaker').validate()


def test_kmeans_recovers_corpus_accents():
    corpus = generate_corpus(small_spec(embedding_spread=0.1))
    utts = corpus.utterances('train')
    table = EmbeddingTable([u.utt_id for u in utts], [u.accent for u in utts],
                           np.stack([u.embedding for u in utts]))
    model = kmeans_fit(table, corpus.spec.n_accents, seed=0)
    assert adjusted_rand_score(table.accents, model.labels) == 1.0


def test_cmvn_examples():
    out = cmvn(np.array([[1.0, 4.0], [3.0, 4.0]]))
    npt.assert_allclose(out[:, 0], [-1.0, 1.0], atol=1e-7)
    npt.assert_array_equal(out[:, 1], 0.0)


def test_cmvn_statistics_and_idempotence():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal((12, 5)) * rng.uniform(0.5, 3.0, size=5) + rng.uniform(-2, 2, size=5)
        once = cmvn(x)
        npt.assert_allclose(once.mean(axis=0), 0.0, atol=1e-9)
        npt.assert_allclose(once.var(axis=0), 1.0, atol=1e-6)
        npt.assert_allclose(cmvn(once), once, atol=1e-9)


def test_cmvn_needs_a_frame():
    with pytest.raises(InputError):
        cmvn(np.zeros((0, 3)))


def test_gated_correction_realizes_every_accent():
    """on a noiseless corpus each accent is undone by gated-adapter biases alone"""
    spec = small_spec(noise_sigma=0.0, accent_scale_range=[0.6, 1.8],
                      accent_shift_range=[-0.25, 0.25], cmvn='none')
    corpus = generate_corpus(spec)
    z = np.zeros(spec.embed_dim)
    for accent, transform in corpus.transforms.items():
        f, g = inverse_distortion(transform)
        assert np.all(np.abs(f) < 1) and np.all(np.abs(g) < 1)
        gated = GatedAdapter(f'gated.{accent}', spec.feat_dim, spec.embed_dim)
        gated.b_f.value[0] = np.arctanh(f)
        gated.b_g.value[0] = np.arctanh(g)
        for utt in corpus.utterances('train'):
            if utt.accent != accent:
                continue
            clean = np.repeat(corpus.prototypes[np.array(utt.tokens) - 2], spec.frames_per_token, axis=0)
            restored = utt.features + gated.forward(utt.features, z).output
            assert np.max(np.abs(restored - clean)) < 1e-6


def test_prototype_scale():
    wide = generate_corpus(small_spec())
    narrow = generate_corpus(small_spec(prototype_scale=0.3))
    npt.assert_allclose(narrow.prototypes, 0.3 * wide.prototypes, rtol=1e-15)
    with pytest.raises(ConfigurationError):
        small_spec(prototype_scale=0.0).validate()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
