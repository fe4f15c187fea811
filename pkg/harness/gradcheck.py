"""
Gradient Check Suite
Compares every hand-derived backward pass against central finite
differences on small seeded instances.
"""

import time
import numpy as np
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence
import logging

from ml.adapters import (
    AdapterBasis, AdapterSpec, CoefficientPredictor, CombinedAdapter, GatedAdapter,
    MultiBasisAdapter, SandglassProjection,
)
from ml.errors import UsageError
from ml.losses import coeff_mse, ctc_loss, s2s_loss
from ml.model import (
    AccentTransformer, ModelConfig, decoder_block_backward, decoder_block_forward,
    encoder_block_backward, encoder_block_forward, ffn_backward, ffn_forward,
    mhsa_backward, mhsa_forward,
)
from ml.numerics import (
    Parameter, activation_backward, activation_forward, finite_difference_grad,
    layer_norm_backward, layer_norm_forward, linear_backward, linear_forward,
    log_softmax_backward, relative_error, row_log_softmax,
)

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
D_MODEL = 4
N_HEADS = 2
FFN_DIM = 8
VOCAB = 5
EMBED_DIM = 4
BOTTLENECK = 2
N_BASES = 3


@dataclass
class CheckResult:
    module: str
    name: str
    instances: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def gradient_error(params: Sequence[Parameter], loss: Callable[[], float],
                   backward: Callable[[], None], max_entries: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> float:
    """
    Largest per-entry relative error between backward() and finite differences

    backward() must run the forward pass itself and accumulate into the
    parameters' gradients.
    """
    for p in params:
        p.zero_grad()
    backward()
    analytic = [p.grad.copy() for p in params]
    numeric = finite_difference_grad(loss, params, max_entries=max_entries, rng=rng)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def randomize(params, rng: np.random.Generator, scale: float = 0.5):
    """Overwrite values in place so no gradient vanishes by initialization"""
    for p in params:
        p.value[...] = scale * rng.standard_normal(p.shape)
        if p.name.endswith('gain'):
            p.value += 1.0


def _param(name: str, rng: np.random.Generator, shape, scale: float = 0.5) -> Parameter:
    return Parameter(name, scale * rng.standard_normal(shape))


def _attention_params(rng: np.random.Generator, prefix: str = '') -> Dict[str, Parameter]:
    p = {}
    for proj in ('q', 'k', 'v', 'o'):
        p[f"{prefix}w{proj}"] = _param(f"w{proj}", rng, (D_MODEL, D_MODEL))
        if proj != 'k':
            p[f"{prefix}b{proj}"] = _param(f"b{proj}", rng, (1, D_MODEL))
    return p


def _ffn_params(rng: np.random.Generator, prefix: str = '') -> Dict[str, Parameter]:
    return {
        f"{prefix}w1": _param('w1', rng, (D_MODEL, FFN_DIM)),
        f"{prefix}b1": _param('b1', rng, (1, FFN_DIM)),
        f"{prefix}w2": _param('w2', rng, (FFN_DIM, D_MODEL)),
        f"{prefix}b2": _param('b2', rng, (1, D_MODEL)),
    }


def _norm_params(rng: np.random.Generator, prefix: str) -> Dict[str, Parameter]:
    return {
        f"{prefix}.gain": Parameter(f"{prefix}.gain", 1.0 + 0.3 * rng.standard_normal((1, D_MODEL))),
        f"{prefix}.bias": _param(f"{prefix}.bias", rng, (1, D_MODEL)),
    }


def _frames(rng: np.random.Generator) -> int:
    return int(rng.integers(2, 7))


def _projection_loss(fwd: Callable[[np.ndarray], np.ndarray], x: Parameter, r: np.ndarray) -> Callable[[], float]:
    return lambda: float(np.sum(fwd(x.value) * r))


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------

def check_layer_norm(rng: np.random.Generator) -> float:
    x = _param('x', rng, (_frames(rng), D_MODEL), 1.0)
    p = _norm_params(rng, 'ln')
    r = rng.standard_normal(x.shape)

    def backward():
        io = layer_norm_forward(x.value, p['ln.gain'], p['ln.bias'])
        x.accumulate(layer_norm_backward(r, io, p['ln.gain'], p['ln.bias']))

    loss = _projection_loss(lambda v: layer_norm_forward(v, p['ln.gain'], p['ln.bias']).output, x, r)
    return gradient_error([x] + list(p.values()), loss, backward)


def check_activation(kind: str) -> Callable[[np.random.Generator], float]:
    def check(rng: np.random.Generator) -> float:
        x = _param('x', rng, (_frames(rng), D_MODEL), 1.0)
        r = rng.standard_normal(x.shape)

        def backward():
            io = activation_forward(x.value, kind)
            x.accumulate(activation_backward(r, io))

        loss = _projection_loss(lambda v: activation_forward(v, kind).output, x, r)
        return gradient_error([x], loss, backward)
    return check


def check_linear(rng: np.random.Generator) -> float:
    x = _param('x', rng, (_frames(rng), D_MODEL), 1.0)
    w = _param('w', rng, (D_MODEL, FFN_DIM))
    b = _param('b', rng, (1, FFN_DIM))
    r = rng.standard_normal((x.shape[0], FFN_DIM))

    def backward():
        io = linear_forward(x.value, w, b)
        x.accumulate(linear_backward(r, io, w, b))

    loss = _projection_loss(lambda v: linear_forward(v, w, b).output, x, r)
    return gradient_error([x, w, b], loss, backward)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def check_mhsa(causal: bool) -> Callable[[np.random.Generator], float]:
    def check(rng: np.random.Generator) -> float:
        x = _param('x', rng, (_frames(rng), D_MODEL), 1.0)
        p = _attention_params(rng)
        r = rng.standard_normal(x.shape)

        def backward():
            io = mhsa_forward(x.value, p, N_HEADS, causal)
            x.accumulate(mhsa_backward(r, io, p))

        loss = _projection_loss(lambda v: mhsa_forward(v, p, N_HEADS, causal).output, x, r)
        return gradient_error([x] + list(p.values()), loss, backward)
    return check


def check_ffn(rng: np.random.Generator) -> float:
    x = _param('x', rng, (_frames(rng), D_MODEL), 1.0)
    p = _ffn_params(rng)
    r = rng.standard_normal(x.shape)

    def backward():
        io = ffn_forward(x.value, p)
        x.accumulate(ffn_backward(r, io, p))

    loss = _projection_loss(lambda v: ffn_forward(v, p).output, x, r)
    return gradient_error([x] + list(p.values()), loss, backward)


def _labels(rng: np.random.Generator, T: int, max_len: int = 3) -> List[int]:
    # repeats need a separating blank, so keep L well inside T
    length = int(rng.integers(1, min(max_len, (T + 1) // 2) + 1))
    return [int(t) for t in rng.integers(2, VOCAB, size=length)]


def check_ctc_head(rng: np.random.Generator) -> float:
    enc = _param('enc', rng, (_frames(rng), D_MODEL), 1.0)
    w = _param('ctc.weight', rng, (D_MODEL, VOCAB))
    b = _param('ctc.bias', rng, (1, VOCAB))
    labels = _labels(rng, enc.shape[0])

    def forward():
        io = linear_forward(enc.value, w, b)
        return io, row_log_softmax(io.output)

    def backward():
        io, logp = forward()
        _, g = ctc_loss(logp, labels)
        enc.accumulate(linear_backward(log_softmax_backward(g, logp), io, w, b))

    return gradient_error([enc, w, b], lambda: ctc_loss(forward()[1], labels)[0], backward)


def _block_params(rng: np.random.Generator, decoder: bool) -> Dict[str, Parameter]:
    p = {}
    p.update(_norm_params(rng, 'ln1'))
    p.update(_norm_params(rng, 'ln2'))
    if decoder:
        p.update(_attention_params(rng, 'self_attn.'))
        p.update(_norm_params(rng, 'ln3'))
        p.update(_attention_params(rng, 'cross_attn.'))
    else:
        p.update(_attention_params(rng, 'attn.'))
    p.update(_ffn_params(rng, 'ffn.'))
    return p


def _small_spec(mode: str, connection: str = 'both') -> AdapterSpec:
    return AdapterSpec(mode=mode, positions=[1], n_bases=N_BASES, connection=connection,
                       bottleneck=BOTTLENECK, embed_dim=EMBED_DIM, predictor_hidden=[3])


def _make_adapter(mode: str, rng: np.random.Generator):
    spec = _small_spec(mode)
    predictor = CoefficientPredictor(EMBED_DIM, spec.predictor_hidden, N_BASES, rng)
    gated = GatedAdapter('gated', D_MODEL, EMBED_DIM)
    multi = MultiBasisAdapter('multi', D_MODEL, spec, predictor, rng)
    adapter = {'gated': gated, 'multi': multi, 'combined': CombinedAdapter(gated, multi)}[mode]
    params = list(adapter.parameters().values())
    if mode != 'gated':
        params += list(predictor.parameters().values())
    randomize(params, rng)
    return adapter, params


def check_encoder_block(adapter_mode: Optional[str]) -> Callable[[np.random.Generator], float]:
    def check(rng: np.random.Generator) -> float:
        x = _param('x', rng, (_frames(rng), D_MODEL), 1.0)
        p = _block_params(rng, decoder=False)
        z = rng.standard_normal(EMBED_DIM)
        adapter, adapter_params = (None, [])
        if adapter_mode is not None:
            adapter, adapter_params = _make_adapter(adapter_mode, rng)
        r = rng.standard_normal(x.shape)

        def backward():
            io = encoder_block_forward(x.value, p, N_HEADS, adapter, z)
            dx, _ = encoder_block_backward(r, io, p, adapter)
            x.accumulate(dx)

        loss = _projection_loss(lambda v: encoder_block_forward(v, p, N_HEADS, adapter, z).output, x, r)
        return gradient_error([x] + list(p.values()) + adapter_params, loss, backward)
    return check


def check_decoder_block(rng: np.random.Generator) -> float:
    x = _param('x', rng, (int(rng.integers(1, 5)), D_MODEL), 1.0)
    enc = _param('enc', rng, (_frames(rng), D_MODEL), 1.0)
    p = _block_params(rng, decoder=True)
    r = rng.standard_normal(x.shape)

    def backward():
        io = decoder_block_forward(x.value, enc.value, p, N_HEADS)
        dx, denc = decoder_block_backward(r, io, p)
        x.accumulate(dx)
        enc.accumulate(denc)

    def loss():
        return float(np.sum(decoder_block_forward(x.value, enc.value, p, N_HEADS).output * r))

    return gradient_error([x, enc] + list(p.values()), loss, backward)


def tiny_model(rng: np.random.Generator, mode: str = 'combined') -> AccentTransformer:
    config = ModelConfig(input_dim=3, d_model=D_MODEL, n_heads=N_HEADS, enc_layers=2,
                         dec_layers=1, ffn_dim=FFN_DIM, vocab_size=VOCAB, max_len=4)
    spec = AdapterSpec(mode=mode, positions='all', n_bases=2, bottleneck=BOTTLENECK,
                       embed_dim=EMBED_DIM, predictor_hidden=[3])
    model = AccentTransformer(config, spec, seed=int(rng.integers(1 << 30)))
    randomize(model.parameters().values(), rng, scale=0.4)
    return model


def check_model_end_to_end(rng: np.random.Generator, max_entries: Optional[int] = None) -> float:
    """L_mtl through a 2-block model with combined adapters at every block"""
    model = tiny_model(rng)
    features = rng.standard_normal((5, 3))
    targets = _labels(rng, 5, max_len=2)
    z = rng.standard_normal(EMBED_DIM)
    alpha_ref = np.eye(2)[int(rng.integers(2))]
    lam, gamma = 0.3, 0.5

    def loss():
        out, _ = model.forward(features, targets, z)
        l_mse, _ = coeff_mse(alpha_ref, out.alpha)
        return (lam * ctc_loss(out.ctc_log_probs, targets)[0]
                + (1 - lam) * s2s_loss(out.s2s_log_probs, targets)[0] + gamma * l_mse)

    def backward():
        out, _ = model.forward(features, targets, z)
        _, g_ctc = ctc_loss(out.ctc_log_probs, targets)
        _, g_s2s = s2s_loss(out.s2s_log_probs, targets)
        _, g_mse = coeff_mse(alpha_ref, out.alpha)
        model.backward(out, d_ctc=lam * g_ctc, d_s2s=(1 - lam) * g_s2s, d_alpha=gamma * g_mse)

    return gradient_error(list(model.parameters().values()), loss, backward,
                          max_entries=max_entries, rng=rng)


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------

def check_gated(rng: np.random.Generator) -> float:
    adapter, params = _make_adapter('gated', rng)
    x = _param('x', rng, (_frames(rng), D_MODEL), 1.0)
    z = rng.standard_normal(EMBED_DIM)
    r = rng.standard_normal(x.shape)

    def backward():
        x.accumulate(adapter.backward(r, adapter.forward(x.value, z)))

    loss = _projection_loss(lambda v: adapter.forward(v, z).output, x, r)
    return gradient_error([x] + params, loss, backward)


def check_sandglass(rng: np.random.Generator) -> float:
    proj = SandglassProjection('proj', D_MODEL, BOTTLENECK, rng)
    params = list(proj.parameters().values())
    randomize(params, rng)
    x = _param('x', rng, (_frames(rng), D_MODEL), 1.0)
    r = rng.standard_normal(x.shape)

    def backward():
        x.accumulate(proj.backward(r, proj.forward(x.value)))

    loss = _projection_loss(lambda v: proj.forward(v).output, x, r)
    return gradient_error([x] + params, loss, backward)


def check_basis(connection: str) -> Callable[[np.random.Generator], float]:
    def check(rng: np.random.Generator) -> float:
        basis = AdapterBasis('basis', D_MODEL, BOTTLENECK, connection, rng)
        params = list(basis.parameters().values())
        randomize(params, rng)
        x = _param('x', rng, (_frames(rng), D_MODEL), 1.0)
        r = rng.standard_normal(x.shape)

        def backward():
            x.accumulate(basis.backward(r, basis.forward(x.value)))

        loss = _projection_loss(lambda v: basis.forward(v).output, x, r)
        return gradient_error([x] + params, loss, backward)
    return check


def check_predictor(rng: np.random.Generator) -> float:
    predictor = CoefficientPredictor(EMBED_DIM, [3, 3], N_BASES, rng)
    params = list(predictor.parameters().values())
    randomize(params, rng)
    z = rng.standard_normal(EMBED_DIM)
    r = rng.standard_normal(N_BASES)

    def backward():
        predictor.backward(r, predictor.forward(z))

    return gradient_error(params, lambda: float(predictor.forward(z).output @ r), backward)


def check_coefficient_adapter(mode: str) -> Callable[[np.random.Generator], float]:
    """Multi-basis or combined adapter including its own predictor"""
    def check(rng: np.random.Generator) -> float:
        adapter, params = _make_adapter(mode, rng)
        x = _param('x', rng, (_frames(rng), D_MODEL), 1.0)
        z = rng.standard_normal(EMBED_DIM)
        r = rng.standard_normal(x.shape)

        def backward():
            io, _ = adapter.forward(x.value, z)
            dx, _ = adapter.backward(r, io)
            x.accumulate(dx)

        loss = _projection_loss(lambda v: adapter.forward(v, z)[0].output, x, r)
        return gradient_error([x] + params, loss, backward)
    return check


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def check_ctc_loss(rng: np.random.Generator) -> float:
    T = _frames(rng)
    lp = Parameter('log_probs', row_log_softmax(rng.standard_normal((T, VOCAB))))
    labels = _labels(rng, T)

    def backward():
        lp.accumulate(ctc_loss(lp.value, labels)[1])

    return gradient_error([lp], lambda: ctc_loss(lp.value, labels)[0], backward)


def check_s2s_loss(rng: np.random.Generator) -> float:
    targets = [int(t) for t in rng.integers(2, VOCAB, size=int(rng.integers(1, 4)))]
    logits = _param('logits', rng, (len(targets) + 1, VOCAB), 1.0)

    def backward():
        logp = row_log_softmax(logits.value)
        logits.accumulate(log_softmax_backward(s2s_loss(logp, targets)[1], logp))

    return gradient_error([logits], lambda: s2s_loss(row_log_softmax(logits.value), targets)[0], backward)


def _jca_parts(rng: np.random.Generator):
    T = _frames(rng)
    labels = _labels(rng, T)
    ctc_logits = _param('ctc_logits', rng, (T, VOCAB), 1.0)
    s2s_logits = _param('s2s_logits', rng, (len(labels) + 1, VOCAB), 1.0)
    lam = float(rng.uniform(0.0, 1.0))

    def value() -> float:
        l_ctc = ctc_loss(row_log_softmax(ctc_logits.value), labels)[0]
        l_s2s = s2s_loss(row_log_softmax(s2s_logits.value), labels)[0]
        return lam * l_ctc + (1 - lam) * l_s2s

    def backward():
        lp_c = row_log_softmax(ctc_logits.value)
        lp_s = row_log_softmax(s2s_logits.value)
        ctc_logits.accumulate(log_softmax_backward(lam * ctc_loss(lp_c, labels)[1], lp_c))
        s2s_logits.accumulate(log_softmax_backward((1 - lam) * s2s_loss(lp_s, labels)[1], lp_s))

    return [ctc_logits, s2s_logits], value, backward


def check_jca_loss(rng: np.random.Generator) -> float:
    params, value, backward = _jca_parts(rng)
    return gradient_error(params, value, backward)


def check_coeff_mse(rng: np.random.Generator) -> float:
    predictor = CoefficientPredictor(EMBED_DIM, [3], N_BASES, rng)
    params = list(predictor.parameters().values())
    randomize(params, rng)
    z = rng.standard_normal(EMBED_DIM)
    ref = np.eye(N_BASES)[int(rng.integers(N_BASES))]

    def backward():
        io = predictor.forward(z)
        predictor.backward(coeff_mse(ref, io.output)[1], io)

    return gradient_error(params, lambda: coeff_mse(ref, predictor.forward(z).output)[0], backward)


def check_mtl_loss(rng: np.random.Generator) -> float:
    params, jca_value, jca_backward = _jca_parts(rng)
    predictor = CoefficientPredictor(EMBED_DIM, [3], N_BASES, rng)
    pred_params = list(predictor.parameters().values())
    randomize(pred_params, rng)
    z = rng.standard_normal(EMBED_DIM)
    ref = np.full(N_BASES, 1.0 / N_BASES)
    gamma = float(rng.uniform(0.0, 1.0))

    def value() -> float:
        return jca_value() + gamma * coeff_mse(ref, predictor.forward(z).output)[0]

    def backward():
        jca_backward()
        io = predictor.forward(z)
        predictor.backward(gamma * coeff_mse(ref, io.output)[1], io)

    return gradient_error(params + pred_params, value, backward)


SUITE: Dict[str, Dict[str, Callable[[np.random.Generator], float]]] = {
    'numerics': {
        'layer_norm': check_layer_norm,
        'tanh': check_activation('tanh'),
        'relu': check_activation('relu'),
        'linear': check_linear,
    },
    'model': {
        'mhsa': check_mhsa(False),
        'mhsa_causal': check_mhsa(True),
        'ffn': check_ffn,
        'ctc_head': check_ctc_head,
        'encoder_block': check_encoder_block(None),
        'encoder_block_gated': check_encoder_block('gated'),
        'encoder_block_combined': check_encoder_block('combined'),
        'decoder_block': check_decoder_block,
        'end_to_end': check_model_end_to_end,
    },
    'adapters': {
        'gated': check_gated,
        'sandglass': check_sandglass,
        'basis_scaling_only': check_basis('scaling_only'),
        'basis_shifting_only': check_basis('shifting_only'),
        'basis_both': check_basis('both'),
        'predictor': check_predictor,
        'multi_basis': check_coefficient_adapter('multi'),
        'combined': check_coefficient_adapter('combined'),
    },
    'losses': {
        'ctc': check_ctc_loss,
        's2s': check_s2s_loss,
        'jca': check_jca_loss,
        'coeff_mse': check_coeff_mse,
        'mtl': check_mtl_loss,
    },
}


def run_gradcheck(module: Optional[str] = None, instances: int = 20, seed: int = 0) -> List[CheckResult]:
    """
    Run every check of one module (or all) on seeded instances

    Returns:
        One CheckResult per check, with the worst error over its instances
    """
    if module is not None and module not in SUITE:
        raise UsageError(f"unknown gradcheck module {module}; choose from {sorted(SUITE)}")
    modules = [module] if module is not None else list(SUITE)
    results = []
    for mod_index, mod in enumerate(modules):
        for check_index, (name, check) in enumerate(SUITE[mod].items()):
            start = time.perf_counter()
            worst = 0.0
            for i in range(instances):
                rng = np.random.default_rng([seed, mod_index, check_index, i])
                worst = max(worst, check(rng))
            result = CheckResult(mod, name, instances, worst, time.perf_counter() - start)
            status = 'ok' if result.passed else 'FAILED'
            log = logger.info if result.passed else logger.error
            log(f"gradcheck {mod}.{name}: max relative error {worst:.3e} over {instances} "
                f"instances ({result.seconds:.2f}s) {status}")
            results.append(result)
    return results
