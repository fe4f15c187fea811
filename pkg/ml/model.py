"""
Joint CTC-Attention Transformer
Pre-norm encoder/decoder with a CTC head and adapter injection points before
any encoder block. Every layer pairs a forward with a hand-derived backward.
"""

import numpy as np
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging

from ml.adapters import AdapterSpec, build_adapters
from ml.errors import CheckpointError, ConfigurationError, DimensionError, InputError
from ml.numerics import (
    LayerIO, Parameter, activation_backward, activation_forward, as_matrix,
    layer_norm_backward, layer_norm_forward, linear_backward, linear_forward,
    log_softmax_backward, row_log_softmax, row_softmax, sinusoidal_positions,
    softmax_backward, uniform_init,
)

logger = logging.getLogger(__name__)

BLANK_ID = 0
EOS_ID = 1


@dataclass
class ModelConfig:
    """
    Architecture hyperparameters

    Full scale: d_model 512, 8 heads, 12 encoder and 6 decoder blocks.
    """
    input_dim: int = 8
    d_model: int = 16
    n_heads: int = 2
    enc_layers: int = 4
    dec_layers: int = 2
    ffn_dim: int = 32
    vocab_size: int = 10
    max_len: int = 16
    positional_encoding: bool = True

    def validate(self):
        for name in ('input_dim', 'd_model', 'n_heads', 'enc_layers', 'dec_layers',
                     'ffn_dim', 'max_len'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}"
            )
        if self.vocab_size < 3:
            raise ConfigurationError(f"vocab_size must be >= 3, got {self.vocab_size}")


@dataclass
class EncoderState:
    block_inputs: List[np.ndarray]
    final: np.ndarray


@dataclass
class ModelOutput:
    ctc_log_probs: np.ndarray
    s2s_log_probs: np.ndarray
    alpha: Optional[np.ndarray] = None
    cache: Dict = field(default_factory=dict, repr=False)


# ---------------------------------------------------------------------------
# Sublayers
# ---------------------------------------------------------------------------

def attention_forward(xq: np.ndarray, xkv: np.ndarray, p: Dict[str, Parameter],
                      n_heads: int, causal_mask: bool = False) -> LayerIO:
    """Multi-head scaled dot-product attention (queries from xq, keys/values from xkv)"""
    d_model = p['wq'].shape[0]
    if xq.shape[1] != d_model or xkv.shape[1] != d_model:
        raise DimensionError(f"attention inputs {xq.shape}/{xkv.shape} need {d_model} columns")
    q_io = linear_forward(xq, p['wq'], p['bq'])
    # a key bias shifts every score of a query row equally, so keys have none
    k_io = linear_forward(xkv, p['wk'])
    v_io = linear_forward(xkv, p['wv'], p['bv'])
    q, k, v = q_io.output, k_io.output, v_io.output

    d_head = d_model // n_heads
    scale = 1.0 / np.sqrt(d_head)
    mask = None
    if causal_mask:
        mask = np.triu(np.ones((xq.shape[0], xkv.shape[0]), dtype=bool), k=1)

    heads = np.zeros((xq.shape[0], d_model))
    weights = []
    for hd in range(n_heads):
        sl = slice(hd * d_head, (hd + 1) * d_head)
        scores = (q[:, sl] @ k[:, sl].T) * scale
        if mask is not None:
            scores = np.where(mask, -np.inf, scores)
        attn = row_softmax(scores)
        heads[:, sl] = attn @ v[:, sl]
        weights.append(attn)

    o_io = linear_forward(heads, p['wo'], p['bo'])
    return LayerIO(o_io.output, {'q': q_io, 'k': k_io, 'v': v_io, 'o': o_io,
                                 'weights': weights, 'scale': scale, 'n_heads': n_heads})


def attention_backward(dout: np.ndarray, io: LayerIO,
                       p: Dict[str, Parameter]) -> Tuple[np.ndarray, np.ndarray]:
    """Returns gradients wrt the query input and the key/value input"""
    c = io.cache
    q, k, v = c['q'].output, c['k'].output, c['v'].output
    n_heads = c['n_heads']
    d_head = q.shape[1] // n_heads

    dheads = linear_backward(dout, c['o'], p['wo'], p['bo'])
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for hd in range(n_heads):
        sl = slice(hd * d_head, (hd + 1) * d_head)
        attn = c['weights'][hd]
        dh = dheads[:, sl]
        dv[:, sl] = attn.T @ dh
        dscores = softmax_backward(dh @ v[:, sl].T, attn) * c['scale']
        dq[:, sl] = dscores @ k[:, sl]
        dk[:, sl] = dscores.T @ q[:, sl]

    dxq = linear_backward(dq, c['q'], p['wq'], p['bq'])
    dxkv = linear_backward(dk, c['k'], p['wk']) + linear_backward(dv, c['v'], p['wv'], p['bv'])
    return dxq, dxkv


def mhsa_forward(x: np.ndarray, p: Dict[str, Parameter], n_heads: int,
                 causal_mask: bool = False) -> LayerIO:
    return attention_forward(x, x, p, n_heads, causal_mask)


def mhsa_backward(dout: np.ndarray, io: LayerIO, p: Dict[str, Parameter]) -> np.ndarray:
    dxq, dxkv = attention_backward(dout, io, p)
    return dxq + dxkv


def ffn_forward(x: np.ndarray, p: Dict[str, Parameter]) -> LayerIO:
    hidden = linear_forward(x, p['w1'], p['b1'])
    act = activation_forward(hidden.output, 'relu')
    out = linear_forward(act.output, p['w2'], p['b2'])
    return LayerIO(out.output, {'hidden': hidden, 'act': act, 'out': out})


def ffn_backward(dout: np.ndarray, io: LayerIO, p: Dict[str, Parameter]) -> np.ndarray:
    c = io.cache
    dx = linear_backward(dout, c['out'], p['w2'], p['b2'])
    dx = activation_backward(dx, c['act'])
    return linear_backward(dx, c['hidden'], p['w1'], p['b1'])


def _sub(p: Dict[str, Parameter], prefix: str) -> Dict[str, Parameter]:
    return {name[len(prefix) + 1:]: param for name, param in p.items() if name.startswith(prefix + '.')}


def encoder_block_forward(h_in: np.ndarray, p: Dict[str, Parameter], n_heads: int,
                          adapter=None, z: Optional[np.ndarray] = None,
                          alpha: Optional[np.ndarray] = None) -> LayerIO:
    """
    Pre-norm encoder block; with an adapter the block input becomes h + A(h, z)
    """
    if h_in.shape[1] != p['ln1.gain'].shape[1]:
        raise DimensionError(f"encoder block input {h_in.shape} does not match d_model")
    cache = {'adapter': None}
    x = h_in
    if adapter is not None:
        if z is None:
            raise ConfigurationError("adapter attached but no accent embedding given")
        if adapter.uses_coefficients:
            a_io, _ = adapter.forward(h_in, z, alpha)
        else:
            a_io = adapter.forward(h_in, z)
        x = h_in + a_io.output
        cache['adapter'] = a_io

    ln1 = layer_norm_forward(x, p['ln1.gain'], p['ln1.bias'])
    att = mhsa_forward(ln1.output, _sub(p, 'attn'), n_heads)
    y = x + att.output
    ln2 = layer_norm_forward(y, p['ln2.gain'], p['ln2.bias'])
    ffn = ffn_forward(ln2.output, _sub(p, 'ffn'))
    out = y + ffn.output
    cache.update({'ln1': ln1, 'att': att, 'ln2': ln2, 'ffn': ffn})
    return LayerIO(out, cache)


def encoder_block_backward(dout: np.ndarray, io: LayerIO, p: Dict[str, Parameter],
                           adapter=None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    c = io.cache
    dy = dout + layer_norm_backward(ffn_backward(dout, c['ffn'], _sub(p, 'ffn')),
                                    c['ln2'], p['ln2.gain'], p['ln2.bias'])
    dx = dy + layer_norm_backward(mhsa_backward(dy, c['att'], _sub(p, 'attn')),
                                  c['ln1'], p['ln1.gain'], p['ln1.bias'])
    dalpha = None
    if adapter is not None:
        if adapter.uses_coefficients:
            da, dalpha = adapter.backward(dx, c['adapter'])
        else:
            da = adapter.backward(dx, c['adapter'])
        dx = dx + da
    return dx, dalpha


def decoder_block_forward(x: np.ndarray, enc: np.ndarray, p: Dict[str, Parameter],
                          n_heads: int) -> LayerIO:
    ln1 = layer_norm_forward(x, p['ln1.gain'], p['ln1.bias'])
    self_att = mhsa_forward(ln1.output, _sub(p, 'self_attn'), n_heads, causal_mask=True)
    y1 = x + self_att.output
    ln2 = layer_norm_forward(y1, p['ln2.gain'], p['ln2.bias'])
    cross = attention_forward(ln2.output, enc, _sub(p, 'cross_attn'), n_heads)
    y2 = y1 + cross.output
    ln3 = layer_norm_forward(y2, p['ln3.gain'], p['ln3.bias'])
    ffn = ffn_forward(ln3.output, _sub(p, 'ffn'))
    return LayerIO(y2 + ffn.output, {'ln1': ln1, 'self_att': self_att, 'ln2': ln2,
                                      'cross': cross, 'ln3': ln3, 'ffn': ffn})


def decoder_block_backward(dout: np.ndarray, io: LayerIO,
                           p: Dict[str, Parameter]) -> Tuple[np.ndarray, np.ndarray]:
    """Returns gradients wrt the block input and the encoder memory"""
    c = io.cache
    dy2 = dout + layer_norm_backward(ffn_backward(dout, c['ffn'], _sub(p, 'ffn')),
                                     c['ln3'], p['ln3.gain'], p['ln3.bias'])
    dq, denc = attention_backward(dy2, c['cross'], _sub(p, 'cross_attn'))
    dy1 = dy2 + layer_norm_backward(dq, c['ln2'], p['ln2.gain'], p['ln2.bias'])
    dx = dy1 + layer_norm_backward(mhsa_backward(dy1, c['self_att'], _sub(p, 'self_attn')),
                                   c['ln1'], p['ln1.gain'], p['ln1.bias'])
    return dx, denc


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

class AccentTransformer:
    """
    Encoder/decoder transformer with CTC head and optional accent adapters

    Parameters live in flat name -> Parameter dictionaries so checkpoints,
    freezing and averaging can address them by name.
    """

    def __init__(self, config: ModelConfig, adapter_spec: Optional[AdapterSpec] = None,
                 seed: int = 0):
        config.validate()
        self.config = config
        self.adapter_spec = adapter_spec or AdapterSpec(mode='none')
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.base: Dict[str, Parameter] = OrderedDict()
        self._build_base(rng)
        # adapters get their own stream so the base init never depends on them
        self.adapters, self.predictor = build_adapters(
            self.adapter_spec, config.d_model, config.enc_layers,
            np.random.default_rng([seed, 1]),
        )

    # -- construction -------------------------------------------------------

    def _add(self, name: str, value: np.ndarray):
        self.base[name] = Parameter(name, value)

    def _add_norm(self, prefix: str):
        d = self.config.d_model
        self._add(f"{prefix}.gain", np.ones((1, d)))
        self._add(f"{prefix}.bias", np.zeros((1, d)))

    def _add_linear(self, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator,
                    weight: str = 'weight', bias: Optional[str] = 'bias'):
        self._add(f"{prefix}.{weight}", uniform_init(rng, (fan_in, fan_out), fan_in))
        if bias is not None:
            self._add(f"{prefix}.{bias}", np.zeros((1, fan_out)))

    def _add_attention(self, prefix: str, rng: np.random.Generator):
        d = self.config.d_model
        for proj in ('q', 'k', 'v', 'o'):
            self._add_linear(prefix, d, d, rng, weight=f"w{proj}", bias=None if proj == 'k' else f"b{proj}")

    def _add_ffn(self, prefix: str, rng: np.random.Generator):
        d, f = self.config.d_model, self.config.ffn_dim
        self._add_linear(prefix, d, f, rng, weight='w1', bias='b1')
        self._add_linear(prefix, f, d, rng, weight='w2', bias='b2')

    def _build_base(self, rng: np.random.Generator):
        cfg = self.config
        self._add_linear('input', cfg.input_dim, cfg.d_model, rng)
        for i in range(1, cfg.enc_layers + 1):
            self._add_norm(f"enc{i}.ln1")
            self._add_attention(f"enc{i}.attn", rng)
            self._add_norm(f"enc{i}.ln2")
            self._add_ffn(f"enc{i}.ffn", rng)
        self._add_norm('enc_norm')
        self._add_linear('ctc', cfg.d_model, cfg.vocab_size, rng)
        self._add('dec.embed', uniform_init(rng, (cfg.vocab_size, cfg.d_model), cfg.d_model))
        for j in range(1, cfg.dec_layers + 1):
            self._add_norm(f"dec{j}.ln1")
            self._add_attention(f"dec{j}.self_attn", rng)
            self._add_norm(f"dec{j}.ln2")
            self._add_attention(f"dec{j}.cross_attn", rng)
            self._add_norm(f"dec{j}.ln3")
            self._add_ffn(f"dec{j}.ffn", rng)
        self._add_norm('dec_norm')
        self._add_linear('out', cfg.d_model, cfg.vocab_size, rng)

    # -- parameter access ---------------------------------------------------

    def adapter_parameters(self) -> Dict[str, Parameter]:
        params = OrderedDict()
        for pos in sorted(self.adapters):
            params.update(self.adapters[pos].parameters())
        if self.predictor is not None:
            params.update(self.predictor.parameters())
        return params

    def parameters(self) -> Dict[str, Parameter]:
        params = OrderedDict(self.base)
        params.update(self.adapter_parameters())
        return params

    def zero_grad(self):
        for param in self.parameters().values():
            param.zero_grad()

    def set_trainable(self, base: bool = True, adapters: bool = True):
        for param in self.base.values():
            param.requires_grad = base
        for param in self.adapter_parameters().values():
            param.requires_grad = adapters

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, p.value.copy()) for name, p in self.parameters().items())

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        """
        Copy parameter values in by name

        Args:
            state: name -> array
            strict: Require exactly the same names; otherwise only base
                parameters must all be present and adapter ones are optional
        """
        params = self.parameters()
        missing = [n for n in params if n not in state]
        unexpected = [n for n in state if n not in params]
        if strict and (missing or unexpected):
            raise CheckpointError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        missing_base = [n for n in self.base if n not in state]
        if missing_base:
            raise CheckpointError(f"state lacks base parameters: {missing_base[:5]}")
        for name, param in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise CheckpointError(f"{name}: shape {value.shape} != {param.shape}")
            param.value[...] = value

    def _block(self, prefix: str) -> Dict[str, Parameter]:
        return _sub(self.base, prefix)

    # -- forward ------------------------------------------------------------

    def _check_inputs(self, features: np.ndarray, targets: Sequence[int]):
        if features is None or np.asarray(features).size == 0:
            raise InputError("empty feature sequence")
        features = as_matrix(features, 'features')
        if features.shape[1] != self.config.input_dim:
            raise DimensionError(
                f"features have {features.shape[1]} columns, model expects {self.config.input_dim}"
            )
        targets = [int(t) for t in targets]
        if len(targets) > self.config.max_len:
            raise InputError(f"target length {len(targets)} exceeds max_len {self.config.max_len}")
        for t in targets:
            if t == BLANK_ID:
                raise InputError("targets contain the blank token")
            if t == EOS_ID:
                raise InputError("targets contain the end-of-sequence token")
            if not 0 <= t < self.config.vocab_size:
                raise InputError(f"token {t} outside vocabulary of size {self.config.vocab_size}")
        return features, targets

    def coefficients(self, z: np.ndarray) -> Optional[np.ndarray]:
        if self.predictor is None:
            return None
        return self.predictor.forward(z).output

    def encode(self, features: np.ndarray, z: Optional[np.ndarray] = None):
        """
        Run the encoder

        Returns:
            Tuple of (EncoderState, alpha or None, cache for backward)
        """
        features, _ = self._check_inputs(features, [])
        cfg = self.config
        pred_io = None
        alpha = None
        if self.predictor is not None:
            if z is None:
                raise ConfigurationError("multi-basis adapters need an accent embedding")
            pred_io = self.predictor.forward(z)
            alpha = pred_io.output

        in_io = linear_forward(features, self.base['input.weight'], self.base['input.bias'])
        x = in_io.output
        if cfg.positional_encoding:
            x = x + sinusoidal_positions(x.shape[0], cfg.d_model)

        block_inputs = []
        block_ios = []
        for i in range(1, cfg.enc_layers + 1):
            block_inputs.append(x)
            io = encoder_block_forward(x, self._block(f"enc{i}"), cfg.n_heads,
                                       self.adapters.get(i), z, alpha)
            block_ios.append(io)
            x = io.output
        norm_io = layer_norm_forward(x, self.base['enc_norm.gain'], self.base['enc_norm.bias'])
        state = EncoderState(block_inputs=block_inputs, final=norm_io.output)
        cache = {'input': in_io, 'blocks': block_ios, 'norm': norm_io, 'predictor': pred_io}
        return state, alpha, cache

    def ctc_head(self, enc: np.ndarray) -> LayerIO:
        logits = linear_forward(enc, self.base['ctc.weight'], self.base['ctc.bias'])
        return LayerIO(row_log_softmax(logits.output), {'logits': logits})

    def decode_forward(self, enc: np.ndarray, decoder_input: Sequence[int]) -> LayerIO:
        """Teacher-forced decoder over the given input tokens"""
        cfg = self.config
        tokens = np.asarray(decoder_input, dtype=int)
        x = self.base['dec.embed'].value[tokens]
        if cfg.positional_encoding:
            x = x + sinusoidal_positions(x.shape[0], cfg.d_model)
        block_ios = []
        for j in range(1, cfg.dec_layers + 1):
            io = decoder_block_forward(x, enc, self._block(f"dec{j}"), cfg.n_heads)
            block_ios.append(io)
            x = io.output
        norm_io = layer_norm_forward(x, self.base['dec_norm.gain'], self.base['dec_norm.bias'])
        logits = linear_forward(norm_io.output, self.base['out.weight'], self.base['out.bias'])
        log_probs = row_log_softmax(logits.output)
        return LayerIO(log_probs, {'tokens': tokens, 'blocks': block_ios,
                                   'norm': norm_io, 'logits': logits})

    def forward(self, features: np.ndarray, targets: Sequence[int],
                z: Optional[np.ndarray] = None) -> Tuple[ModelOutput, EncoderState]:
        """
        Full teacher-forced forward pass

        The decoder reads [eos, t1..tL] and its L+1 output rows score
        [t1..tL, eos].
        """
        features, targets = self._check_inputs(features, targets)
        state, alpha, enc_cache = self.encode(features, z)
        ctc_io = self.ctc_head(state.final)
        dec_io = self.decode_forward(state.final, [EOS_ID] + targets)
        output = ModelOutput(
            ctc_log_probs=ctc_io.output,
            s2s_log_probs=dec_io.output,
            alpha=alpha,
            cache={'encoder': enc_cache, 'ctc': ctc_io, 'decoder': dec_io},
        )
        return output, state

    # -- backward -----------------------------------------------------------

    def backward(self, output: ModelOutput, d_ctc: Optional[np.ndarray] = None,
                 d_s2s: Optional[np.ndarray] = None, d_alpha: Optional[np.ndarray] = None):
        """
        Accumulate parameter gradients

        Args:
            output: Result of forward()
            d_ctc: Gradient wrt ctc_log_probs
            d_s2s: Gradient wrt s2s_log_probs
            d_alpha: Extra gradient wrt the coefficients (coefficient regularizer)
        """
        cfg = self.config
        c = output.cache
        enc_cache = c['encoder']
        d_enc = np.zeros_like(enc_cache['norm'].output)

        if d_s2s is not None:
            dec = c['decoder'].cache
            dx = log_softmax_backward(d_s2s, c['decoder'].output)
            dx = linear_backward(dx, dec['logits'], self.base['out.weight'], self.base['out.bias'])
            dx = layer_norm_backward(dx, dec['norm'], self.base['dec_norm.gain'], self.base['dec_norm.bias'])
            for j in range(cfg.dec_layers, 0, -1):
                dx, denc_j = decoder_block_backward(dx, dec['blocks'][j - 1], self._block(f"dec{j}"))
                d_enc += denc_j
            d_embed = np.zeros_like(self.base['dec.embed'].value)
            np.add.at(d_embed, dec['tokens'], dx)
            self.base['dec.embed'].accumulate(d_embed)

        if d_ctc is not None:
            ctc = c['ctc']
            dx = log_softmax_backward(d_ctc, ctc.output)
            d_enc += linear_backward(dx, ctc.cache['logits'], self.base['ctc.weight'], self.base['ctc.bias'])

        dx = layer_norm_backward(d_enc, enc_cache['norm'], self.base['enc_norm.gain'], self.base['enc_norm.bias'])
        dalpha_total = None
        if output.alpha is not None:
            dalpha_total = np.zeros_like(output.alpha)
        for i in range(cfg.enc_layers, 0, -1):
            dx, dalpha = encoder_block_backward(dx, enc_cache['blocks'][i - 1],
                                                self._block(f"enc{i}"), self.adapters.get(i))
            if dalpha is not None:
                dalpha_total += dalpha
        linear_backward(dx, enc_cache['input'], self.base['input.weight'], self.base['input.bias'])

        if enc_cache['predictor'] is not None:
            if d_alpha is not None:
                dalpha_total = dalpha_total + d_alpha
            self.predictor.backward(dalpha_total, enc_cache['predictor'])

    # -- decoding support ---------------------------------------------------

    def next_token_scorer(self, enc: np.ndarray) -> Callable[[Sequence[int]], np.ndarray]:
        """Log-probabilities of the next token after a prefix, for beam search"""
        def score(prefix: Sequence[int]) -> np.ndarray:
            io = self.decode_forward(enc, [EOS_ID] + list(prefix))
            return io.output[-1]
        return score
