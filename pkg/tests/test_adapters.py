"""
Unit tests for the accent adapters and the coefficient predictor
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest
import numpy as np
import numpy.testing as npt
from ml.adapters import (
    AdapterBasis, AdapterSpec, CoefficientPredictor, CombinedAdapter, GatedAdapter, MultiBasisAdapter,
    build_adapters,
)
from ml.corpus import AccentTransform, inverse_distortion
from ml.errors import ConfigurationError

D_MODEL = 6
EMBED_DIM = 4


def make_multi(n_bases=3, connection='both', seed=0, randomize=True):
    rng = np.random.default_rng(seed)
    spec = AdapterSpec(mode='multi', n_bases=n_bases, connection=connection, bottleneck=3,
                       embed_dim=EMBED_DIM, predictor_hidden=[5])
    predictor = CoefficientPredictor(EMBED_DIM, spec.predictor_hidden, n_bases, rng)
    adapter = MultiBasisAdapter('multi', D_MODEL, spec, predictor, rng)
    if randomize:
        for p in list(adapter.parameters().values()) + list(predictor.parameters().values()):
            p.value[...] = 0.5 * rng.standard_normal(p.shape)
    return adapter, predictor


def test_spec_validation():
    AdapterSpec(mode='combined', positions='all').validate(4)
    with pytest.raises(ConfigurationError):
        AdapterSpec(mode='mixture').validate(4)
    with pytest.raises(ConfigurationError):
        AdapterSpec(mode='gated', positions=[5]).validate(4)
    with pytest.raises(ConfigurationError):
        AdapterSpec(mode='gated', positions='middle').validate(4)
    with pytest.raises(ConfigurationError):
        AdapterSpec(mode='multi', n_bases=0).validate(4)
    with pytest.raises(ConfigurationError):
        AdapterSpec(mode='multi', connection='gating').validate(4)
    with pytest.raises(ConfigurationError):
        AdapterSpec(mode='none', positions=[9]).validate(4)
    with pytest.raises(ConfigurationError):
        AdapterSpec(mode='none', positions=['x']).validate(4)


def test_spec_resolution():
    assert AdapterSpec(mode='gated', positions='all').resolved_positions(3) == [1, 2, 3]
    assert AdapterSpec(mode='gated', positions='first').resolved_positions(3) == [1]
    assert AdapterSpec(mode='none', positions='all').resolved_positions(3) == []
    assert AdapterSpec(mode='gated', positions=[3, 1, 3]).resolved_positions(3) == [1, 3]
    assert AdapterSpec().resolved_bottleneck(512) == 128
    assert AdapterSpec().resolved_bottleneck(8) == 4
    assert AdapterSpec(bottleneck=2).resolved_bottleneck(512) == 2


def test_predictor_simplex():
    """1,000 random embeddings all map onto the probability simplex"""
    rng = np.random.default_rng(0)
    predictor = CoefficientPredictor(EMBED_DIM, [8, 8], 4, rng)
    for p in predictor.parameters().values():
        p.value[...] = 2.0 * rng.standard_normal(p.shape)
    for _ in range(1000):
        alpha = predictor.forward(5.0 * rng.standard_normal(EMBED_DIM)).output
        assert abs(alpha.sum() - 1.0) <= 1e-9
        assert np.all(alpha >= 0.0)


def test_single_basis_coefficient_is_one():
    predictor = CoefficientPredictor(EMBED_DIM, [3], 1, np.random.default_rng(0))
    npt.assert_array_equal(predictor.forward(np.ones(EMBED_DIM)).output, [1.0])


def test_predictor_prior():
    """zero final weights plus the log prior reproduce the prior"""
    predictor = CoefficientPredictor(EMBED_DIM, [3], 4, np.random.default_rng(0))
    weight, _ = predictor.final_layer
    weight.value[...] = 0.0
    prior = np.array([0.1, 0.2, 0.3, 0.4])
    predictor.set_prior(prior)
    npt.assert_allclose(predictor.forward(np.ones(EMBED_DIM)).output, prior, atol=1e-12)


def test_basis_permutation_equivariance():
    """permuting bases together with predictor outputs leaves A_m unchanged"""
    rng = np.random.default_rng(1)
    for instance in range(50):
        adapter, predictor = make_multi(seed=instance)
        h = rng.standard_normal((4, D_MODEL))
        z = rng.standard_normal(EMBED_DIM)
        before, alpha = adapter.forward(h, z)

        perm = rng.permutation(adapter.n_bases)
        weight, bias = predictor.final_layer
        weight.value[...] = weight.value[:, perm]
        bias.value[...] = bias.value[:, perm]
        adapter.bases = [adapter.bases[k] for k in perm]
        after, alpha_perm = adapter.forward(h, z)

        npt.assert_allclose(alpha_perm, alpha[perm], atol=1e-12)
        npt.assert_allclose(after.output, before.output, atol=1e-12)


def test_multi_basis_is_weighted_sum():
    adapter, _ = make_multi()
    h = np.random.default_rng(2).standard_normal((3, D_MODEL))
    alpha = np.array([0.2, 0.5, 0.3])
    io, used = adapter.forward(h, np.zeros(EMBED_DIM), alpha=alpha)
    expected = sum(a * adapter.basis_forward(h, k).output for k, a in enumerate(alpha))
    npt.assert_array_equal(used, alpha)
    npt.assert_allclose(io.output, expected, atol=1e-14)


def test_one_hot_alpha_selects_basis():
    adapter, _ = make_multi()
    h = np.random.default_rng(3).standard_normal((3, D_MODEL))
    io, _ = adapter.forward(h, np.zeros(EMBED_DIM), alpha=np.array([0.0, 1.0, 0.0]))
    npt.assert_allclose(io.output, adapter.basis_forward(h, 1).output, atol=1e-14)


def test_coefficient_count_checked():
    adapter, _ = make_multi()
    with pytest.raises(ConfigurationError):
        adapter.forward(np.zeros((2, D_MODEL)), np.zeros(EMBED_DIM), alpha=np.array([0.5, 0.5]))
    with pytest.raises(ConfigurationError):
        adapter.basis_forward(np.zeros((2, D_MODEL)), 3)


@pytest.mark.parametrize('connection, has_scale, has_shift', [
    ('scaling_only', True, False),
    ('shifting_only', False, True),
    ('both', True, True),
])
def test_connection_modes(connection, has_scale, has_shift):
    adapter, _ = make_multi(connection=connection)
    for basis in adapter.bases:
        assert (basis.scale is not None) == has_scale
        assert (basis.shift is not None) == has_shift


def test_zero_init_outputs_zero():
    """up-projections and gates start at zero so every adapter contributes nothing"""
    rng = np.random.default_rng(4)
    h = rng.standard_normal((5, D_MODEL))
    z = rng.standard_normal(EMBED_DIM)
    gated = GatedAdapter('gated', D_MODEL, EMBED_DIM)
    multi, _ = make_multi(randomize=False)
    npt.assert_array_equal(gated.forward(h, z).output, 0.0)
    npt.assert_array_equal(multi.forward(h, z)[0].output, 0.0)
    combined = CombinedAdapter(GatedAdapter('g', D_MODEL, EMBED_DIM), multi)
    npt.assert_array_equal(combined.forward(h, z)[0].output, 0.0)


def test_gated_adapter_undoes_affine_accent():
    """with b_f = atanh(f), b_g = atanh(g) the residual gated adapter inverts scale+shift"""
    rng = np.random.default_rng(5)
    transform = AccentTransform(scale=rng.uniform(0.6, 1.8, D_MODEL),
                                shift=rng.uniform(-0.25, 0.25, D_MODEL))
    f, g = inverse_distortion(transform)
    assert np.all(np.abs(f) < 1) and np.all(np.abs(g) < 1)

    gated = GatedAdapter('gated', D_MODEL, EMBED_DIM)
    gated.b_f.value[0] = np.arctanh(f)
    gated.b_g.value[0] = np.arctanh(g)
    clean = rng.standard_normal((7, D_MODEL))
    distorted = transform.apply(clean)
    restored = distorted + gated.forward(distorted, rng.standard_normal(EMBED_DIM)).output
    npt.assert_allclose(restored, clean, atol=1e-12)


def test_build_adapters():
    spec = AdapterSpec(mode='combined', positions=[1, 3], n_bases=2, embed_dim=EMBED_DIM,
                       predictor_hidden=[3])
    adapters, predictor = build_adapters(spec, D_MODEL, 3, np.random.default_rng(0))
    assert sorted(adapters) == [1, 3]
    assert adapters[1].multi.predictor is predictor
    assert adapters[3].multi.predictor is predictor
    assert adapters[1].gated is not adapters[3].gated

    gated_only, none = build_adapters(AdapterSpec(mode='gated', embed_dim=EMBED_DIM), D_MODEL, 3,
                                      np.random.default_rng(0))
    assert none is None
    assert isinstance(gated_only[1], GatedAdapter)


def test_multi_basis_output_is_linear_in_alpha():
    adapter, _ = make_multi(seed=6)
    rng = np.random.default_rng(6)
    h = rng.standard_normal((4, D_MODEL))
    z = np.zeros(EMBED_DIM)
    for _ in range(10):
        a1, a2 = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
        c = rng.uniform()
        mixed, _ = adapter.forward(h, z, alpha=c * a1 + (1 - c) * a2)
        out1, _ = adapter.forward(h, z, alpha=a1)
        out2, _ = adapter.forward(h, z, alpha=a2)
        npt.assert_allclose(mixed.output, c * out1.output + (1 - c) * out2.output, atol=1e-12)


def copy_projection(source, target):
    for src, dst in zip(source.parameters().values(), target.parameters().values()):
        dst.value[...] = src.value


@pytest.mark.parametrize('single, kept', [('scaling_only', 'scale'), ('shifting_only', 'shift')])
def test_both_with_silent_projection_matches_single_mode(single, kept):
    """'both' with a zero up-projection on one side equals the one-sided mode bit for bit"""
    rng = np.random.default_rng(7)
    both = AdapterBasis('both', D_MODEL, 3, 'both', rng)
    one = AdapterBasis('one', D_MODEL, 3, single, rng)
    for p in getattr(one, kept).parameters().values():
        p.value[...] = 0.5 * rng.standard_normal(p.shape)
    copy_projection(getattr(one, kept), getattr(both, kept))
    h = rng.standard_normal((5, D_MODEL))
    npt.assert_array_equal(both.forward(h).output, one.forward(h).output)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
