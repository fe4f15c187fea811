"""
Unit tests for the joint CTC-attention transformer
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest
import numpy as np
import numpy.testing as npt
from ml.adapters import AdapterSpec
from ml.errors import CheckpointError, ConfigurationError, DimensionError, InputError
from ml.losses import ctc_loss, s2s_loss
from dataclasses import replace
from ml.model import BLANK_ID, EOS_ID, AccentTransformer, ModelConfig, encoder_block_forward

CONFIG = ModelConfig(input_dim=6, d_model=8, n_heads=2, enc_layers=3, dec_layers=2,
                     ffn_dim=16, vocab_size=7, max_len=6)
EMBED_DIM = 5


def adapter_spec(mode, positions=(1,)):
    return AdapterSpec(mode=mode, positions=positions if isinstance(positions, str) else list(positions),
                       n_bases=3, embed_dim=EMBED_DIM, predictor_hidden=[4])


def random_utterances(n, seed=0):
    rng = np.random.default_rng(seed)
    utts = []
    for _ in range(n):
        length = int(rng.integers(1, 4))
        tokens = [int(t) for t in rng.integers(2, CONFIG.vocab_size, size=length)]
        features = rng.standard_normal((3 * length, CONFIG.input_dim))
        utts.append((features, tokens, rng.standard_normal(EMBED_DIM)))
    return utts


def test_output_shapes():
    """CTC rows per frame, decoder rows per target plus eos"""
    model = AccentTransformer(CONFIG, seed=0)
    features, tokens, _ = random_utterances(1)[0]
    out, state = model.forward(features, tokens)
    assert out.ctc_log_probs.shape == (features.shape[0], CONFIG.vocab_size)
    assert out.s2s_log_probs.shape == (len(tokens) + 1, CONFIG.vocab_size)
    npt.assert_allclose(np.exp(out.ctc_log_probs).sum(axis=1), 1.0, atol=1e-12)
    npt.assert_allclose(np.exp(out.s2s_log_probs).sum(axis=1), 1.0, atol=1e-12)
    assert len(state.block_inputs) == CONFIG.enc_layers
    assert out.alpha is None


def test_invalid_inputs():
    model = AccentTransformer(CONFIG, seed=0)
    features = np.zeros((6, CONFIG.input_dim))
    with pytest.raises(InputError):
        model.forward(features, [2, BLANK_ID])
    with pytest.raises(InputError):
        model.forward(features, [EOS_ID])
    with pytest.raises(InputError):
        model.forward(features, [2] * (CONFIG.max_len + 1))
    with pytest.raises(InputError):
        model.forward(np.zeros((0, CONFIG.input_dim)), [2])
    with pytest.raises(DimensionError):
        model.forward(np.zeros((6, CONFIG.input_dim + 1)), [2])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=10, n_heads=3).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(enc_layers=0).validate()


@pytest.mark.parametrize('mode', ['gated', 'multi', 'combined'])
@pytest.mark.parametrize('positions', [(1,), (CONFIG.enc_layers,), 'all'])
def test_zero_init_identity(mode, positions):
    """freshly injected adapters leave every output bit-identical"""
    plain = AccentTransformer(CONFIG, seed=3)
    adapted = AccentTransformer(CONFIG, adapter_spec(mode, positions), seed=3)
    for features, tokens, z in random_utterances(50, seed=1):
        a, _ = plain.forward(features, tokens)
        b, _ = adapted.forward(features, tokens, z)
        npt.assert_array_equal(a.ctc_log_probs, b.ctc_log_probs)
        npt.assert_array_equal(a.s2s_log_probs, b.s2s_log_probs)


def test_base_init_independent_of_adapters():
    plain = AccentTransformer(CONFIG, seed=5)
    adapted = AccentTransformer(CONFIG, adapter_spec('combined', 'all'), seed=5)
    for name, param in plain.base.items():
        npt.assert_array_equal(param.value, adapted.base[name].value)


def test_shared_predictor_and_coefficients():
    """one predictor drives every multi-basis adapter; alpha is on the simplex"""
    model = AccentTransformer(CONFIG, adapter_spec('multi', 'all'), seed=0)
    assert sorted(model.adapters) == [1, 2, 3]
    assert all(a.predictor is model.predictor for a in model.adapters.values())
    features, tokens, z = random_utterances(1)[0]
    out, _ = model.forward(features, tokens, z)
    npt.assert_allclose(out.alpha.sum(), 1.0, atol=1e-12)
    npt.assert_array_equal(out.alpha, model.coefficients(z))


def test_missing_embedding():
    model = AccentTransformer(CONFIG, adapter_spec('multi'), seed=0)
    features, tokens, _ = random_utterances(1)[0]
    with pytest.raises(ConfigurationError):
        model.forward(features, tokens)


def test_wrong_embedding_length():
    model = AccentTransformer(CONFIG, adapter_spec('gated'), seed=0)
    features, tokens, _ = random_utterances(1)[0]
    with pytest.raises(ConfigurationError):
        model.forward(features, tokens, np.zeros(EMBED_DIM + 1))


def test_state_dict_round_trip():
    source = AccentTransformer(CONFIG, adapter_spec('combined'), seed=1)
    target = AccentTransformer(CONFIG, adapter_spec('combined'), seed=2)
    target.load_state_dict(source.state_dict())
    for name, param in source.parameters().items():
        npt.assert_array_equal(param.value, target.parameters()[name].value)


def test_strict_load_rejects_extra_names():
    plain = AccentTransformer(CONFIG, seed=0)
    adapted = AccentTransformer(CONFIG, adapter_spec('gated'), seed=0)
    with pytest.raises(CheckpointError):
        plain.load_state_dict(adapted.state_dict(), strict=True)
    # non-strict loading of a baseline into an adapted model is how injection works
    adapted.load_state_dict(plain.state_dict(), strict=False)


def test_frozen_base_gets_no_gradient():
    """with the base frozen only adapter and predictor gradients accumulate"""
    model = AccentTransformer(CONFIG, adapter_spec('combined'), seed=0)
    model.set_trainable(base=False, adapters=True)
    features, tokens, z = random_utterances(1, seed=4)[0]
    out, _ = model.forward(features, tokens, z)
    _, g_ctc = ctc_loss(out.ctc_log_probs, tokens)
    _, g_s2s = s2s_loss(out.s2s_log_probs, tokens)
    model.zero_grad()
    model.backward(out, d_ctc=0.3 * g_ctc, d_s2s=0.7 * g_s2s)
    for param in model.base.values():
        npt.assert_array_equal(param.grad, 0.0)
    assert any(np.any(p.grad != 0) for p in model.adapter_parameters().values())


def test_next_token_scorer_matches_teacher_forcing():
    """scoring a prefix reproduces the teacher-forced decoder row"""
    model = AccentTransformer(CONFIG, seed=0)
    features, _, _ = random_utterances(1)[0]
    tokens = [2, 4, 3]
    out, state = model.forward(features, tokens)
    score = model.next_token_scorer(state.final)
    for k in range(len(tokens) + 1):
        npt.assert_allclose(score(tokens[:k]), out.s2s_log_probs[k], atol=1e-12)


def test_key_projections_have_no_bias():
    model = AccentTransformer(CONFIG, seed=0)
    names = list(model.parameters())
    assert any(n.endswith('.wk') for n in names)
    assert not any(n.endswith('.bk') for n in names)
    assert 'enc_norm.gain' in names and 'dec_norm.gain' in names


def test_forward_is_deterministic():
    model = AccentTransformer(CONFIG, adapter_spec('combined'), seed=0)
    features, tokens, z = random_utterances(1)[0]
    a, _ = model.forward(features, tokens, z)
    b, _ = model.forward(features, tokens, z)
    npt.assert_array_equal(a.ctc_log_probs, b.ctc_log_probs)
    npt.assert_array_equal(a.s2s_log_probs, b.s2s_log_probs)


def zeroed(model):
    model.load_state_dict({name: np.zeros_like(v) for name, v in model.state_dict().items()})
    return model


def test_decoder_is_causal():
    """changing target j leaves every decoder row that only reads eos..t_{j-1} unchanged"""
    model = AccentTransformer(CONFIG, seed=0)
    rng = np.random.default_rng(6)
    features = rng.standard_normal((12, CONFIG.input_dim))
    tokens = [2, 3, 4, 5]
    base, _ = model.forward(features, tokens)
    for j in range(len(tokens)):
        changed = list(tokens)
        changed[j] = 6
        out, _ = model.forward(features, changed)
        npt.assert_allclose(out.s2s_log_probs[:j + 1], base.s2s_log_probs[:j + 1], atol=1e-12)
        assert not np.allclose(out.s2s_log_probs[j + 1:], base.s2s_log_probs[j + 1:])


def test_encoder_permutation_equivariant_without_positions():
    """with positional encoding off, permuting frames permutes the CTC rows"""
    model = AccentTransformer(replace(CONFIG, positional_encoding=False), seed=0)
    rng = np.random.default_rng(7)
    for _ in range(5):
        features = rng.standard_normal((9, CONFIG.input_dim))
        perm = rng.permutation(features.shape[0])
        out, _ = model.forward(features, [2, 3])
        permuted, _ = model.forward(features[perm], [2, 3])
        npt.assert_allclose(permuted.ctc_log_probs, out.ctc_log_probs[perm], atol=1e-12)


def test_zero_weight_encoder_block_is_identity():
    model = zeroed(AccentTransformer(CONFIG, seed=0))
    params = {name[len('enc1.'):]: p for name, p in model.parameters().items() if name.startswith('enc1.')}
    h = np.random.default_rng(8).standard_normal((5, CONFIG.d_model))
    npt.assert_array_equal(encoder_block_forward(h, params, CONFIG.n_heads).output, h)


def test_zero_parameters_give_uniform_outputs():
    """every CTC and decoder row is -ln V when all parameters are zero"""
    model = zeroed(AccentTransformer(CONFIG, seed=0))
    features, tokens, _ = random_utterances(1, seed=9)[0]
    out, _ = model.forward(features, tokens)
    npt.assert_allclose(out.ctc_log_probs, -np.log(CONFIG.vocab_size), atol=1e-12)
    npt.assert_allclose(out.s2s_log_probs, -np.log(CONFIG.vocab_size), atol=1e-12)

if __name__ == "__main__":
    pytest.main([__file__, "-v"])
