"""
Accent Adapter Layers
Gated adapter, multi-basis adapter with sandglass bases, the coefficient
predictor and the combined gated + multi-basis composition.

Every adapter returns only its contribution A(h, z); the encoder block adds
the residual h itself.
"""

import numpy as np
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union
import logging

from ml.errors import ConfigurationError, DimensionError
from ml.numerics import (
    LayerIO, Parameter, activation_backward, activation_forward,
    layer_norm_backward, layer_norm_forward, linear_backward, linear_forward,
    row_softmax, softmax_backward, uniform_init,
)

logger = logging.getLogger(__name__)

ADAPTER_MODES = ('none', 'gated', 'multi', 'combined')
CONNECTIONS = ('scaling_only', 'shifting_only', 'both')


@dataclass
class AdapterSpec:
    """
    Adapter hyperparameters

    Full-scale reference: 4 bases, bottleneck 128 at d_model 512,
    256-dimensional accent embeddings, first encoder block.
    """
    mode: str = 'none'
    positions: Union[List[int], str] = field(default_factory=lambda: [1])
    n_bases: int = 4
    connection: str = 'both'
    bottleneck: Optional[int] = None
    embed_dim: int = 256
    predictor_hidden: List[int] = field(default_factory=lambda: [32])

    def resolved_positions(self, enc_layers: int) -> List[int]:
        if self.mode == 'none':
            return []
        return self._listed_positions(enc_layers)

    def _listed_positions(self, enc_layers: int) -> List[int]:
        if self.positions == 'all':
            return list(range(1, enc_layers + 1))
        if self.positions == 'first':
            return [1]
        return sorted(set(int(p) for p in self.positions))

    def resolved_bottleneck(self, d_model: int) -> int:
        if self.bottleneck is not None:
            return self.bottleneck
        return max(4, d_model // 4)

    @property
    def uses_coefficients(self) -> bool:
        return self.mode in ('multi', 'combined')

    def validate(self, enc_layers: int):
        if self.mode not in ADAPTER_MODES:
            raise ConfigurationError(f"Unknown adapter mode: {self.mode}")
        if self.connection not in CONNECTIONS:
            raise ConfigurationError(f"Unknown connection mode: {self.connection}")
        if self.n_bases < 1:
            raise ConfigurationError(f"n_bases must be >= 1, got {self.n_bases}")
        if self.bottleneck is not None and self.bottleneck < 1:
            raise ConfigurationError(f"bottleneck must be >= 1, got {self.bottleneck}")
        if self.embed_dim < 1:
            raise ConfigurationError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if isinstance(self.positions, str) and self.positions not in ('all', 'first'):
            raise ConfigurationError(f"Unknown position set: {self.positions}")
        try:
            positions = self._listed_positions(enc_layers)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"adapter positions must be block numbers, got {self.positions!r}") from e
        bad = [p for p in positions if p < 1 or p > enc_layers]
        if bad:
            raise ConfigurationError(
                f"adapter positions {bad} outside encoder blocks 1..{enc_layers}"
            )
        if self.mode != 'none' and not positions:
            raise ConfigurationError("adapter mode set but no positions given")


def check_embedding(z: np.ndarray, embed_dim: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != embed_dim:
        raise ConfigurationError(
            f"accent embedding has length {z.shape[0]}, adapter expects {embed_dim}"
        )
    return z


def _check_hidden(h: np.ndarray, d_model: int):
    if h.ndim != 2 or h.shape[1] != d_model:
        raise DimensionError(f"adapter input {h.shape} does not have {d_model} columns")


class CoefficientPredictor:
    """Dense network mapping an accent embedding onto the basis simplex"""

    def __init__(self, embed_dim: int, hidden: List[int], n_bases: int,
                 rng: np.random.Generator, prefix: str = 'predictor'):
        self.embed_dim = embed_dim
        self.n_bases = n_bases
        self.layers: List[Tuple[Parameter, Parameter]] = []
        widths = [embed_dim] + list(hidden) + [n_bases]
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            weight = Parameter(f"{prefix}.layer{i}.weight", uniform_init(rng, (fan_in, fan_out), fan_in))
            bias = Parameter(f"{prefix}.layer{i}.bias", np.zeros((1, fan_out)))
            self.layers.append((weight, bias))

    def parameters(self) -> Dict[str, Parameter]:
        params = {}
        for weight, bias in self.layers:
            params[weight.name] = weight
            params[bias.name] = bias
        return params

    @property
    def final_layer(self) -> Tuple[Parameter, Parameter]:
        return self.layers[-1]

    def forward(self, z: np.ndarray) -> LayerIO:
        z = check_embedding(z, self.embed_dim)
        x = z.reshape(1, -1)
        ios = []
        for i, (weight, bias) in enumerate(self.layers):
            lin = linear_forward(x, weight, bias)
            x = lin.output
            act = None
            if i < len(self.layers) - 1:
                act = activation_forward(x, 'relu')
                x = act.output
            ios.append((lin, act))
        alpha = row_softmax(x)[0]
        return LayerIO(alpha, {'ios': ios})

    def backward(self, dalpha: np.ndarray, io: LayerIO):
        alpha = io.output.reshape(1, -1)
        dx = softmax_backward(np.asarray(dalpha).reshape(1, -1), alpha)
        for (weight, bias), (lin, act) in zip(reversed(self.layers), reversed(io.cache['ios'])):
            if act is not None:
                dx = activation_backward(dx, act)
            dx = linear_backward(dx, lin, weight, bias)

    def set_prior(self, coefficients: np.ndarray):
        """Bias the final layer towards a coefficient prior (log-probabilities)"""
        _, bias = self.final_layer
        bias.value[0, :] = np.log(np.clip(coefficients, 1e-6, None))


class SandglassProjection:
    """LayerNorm, down-projection, ReLU, up-projection"""

    def __init__(self, prefix: str, d_model: int, bottleneck: int, rng: np.random.Generator):
        self.ln_gain = Parameter(f"{prefix}.ln.gain", np.ones((1, d_model)))
        self.ln_bias = Parameter(f"{prefix}.ln.bias", np.zeros((1, d_model)))
        self.w_down = Parameter(f"{prefix}.w_down", uniform_init(rng, (d_model, bottleneck), d_model))
        self.b_down = Parameter(f"{prefix}.b_down", np.zeros((1, bottleneck)))
        self.w_up = Parameter(f"{prefix}.w_up", np.zeros((bottleneck, d_model)))
        self.b_up = Parameter(f"{prefix}.b_up", np.zeros((1, d_model)))

    def parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in (self.ln_gain, self.ln_bias, self.w_down,
                                    self.b_down, self.w_up, self.b_up)}

    def forward(self, h: np.ndarray) -> LayerIO:
        ln = layer_norm_forward(h, self.ln_gain, self.ln_bias)
        down = linear_forward(ln.output, self.w_down, self.b_down)
        act = activation_forward(down.output, 'relu')
        up = linear_forward(act.output, self.w_up, self.b_up)
        return LayerIO(up.output, {'ln': ln, 'down': down, 'act': act, 'up': up})

    def backward(self, dout: np.ndarray, io: LayerIO) -> np.ndarray:
        c = io.cache
        dx = linear_backward(dout, c['up'], self.w_up, self.b_up)
        dx = activation_backward(dx, c['act'])
        dx = linear_backward(dx, c['down'], self.w_down, self.b_down)
        return layer_norm_backward(dx, c['ln'], self.ln_gain, self.ln_bias)


class AdapterBasis:
    """B_k(h) = F_k(h) * h + G_k(h), with one of the terms dropped by connection mode"""

    def __init__(self, prefix: str, d_model: int, bottleneck: int, connection: str,
                 rng: np.random.Generator):
        if connection not in CONNECTIONS:
            raise ConfigurationError(f"Unknown connection mode: {connection}")
        self.connection = connection
        self.scale = None
        self.shift = None
        if connection in ('scaling_only', 'both'):
            self.scale = SandglassProjection(f"{prefix}.scale", d_model, bottleneck, rng)
        if connection in ('shifting_only', 'both'):
            self.shift = SandglassProjection(f"{prefix}.shift", d_model, bottleneck, rng)

    def parameters(self) -> Dict[str, Parameter]:
        params = {}
        for proj in (self.scale, self.shift):
            if proj is not None:
                params.update(proj.parameters())
        return params

    def forward(self, h: np.ndarray) -> LayerIO:
        cache = {'input': h}
        out = None
        if self.scale is not None:
            scale_io = self.scale.forward(h)
            cache['scale'] = scale_io
            out = scale_io.output * h
        if self.shift is not None:
            shift_io = self.shift.forward(h)
            cache['shift'] = shift_io
            out = shift_io.output if out is None else out + shift_io.output
        return LayerIO(out, cache)

    def backward(self, dout: np.ndarray, io: LayerIO) -> np.ndarray:
        h = io.cache['input']
        dh = np.zeros_like(h)
        if self.scale is not None:
            scale_io = io.cache['scale']
            dh += dout * scale_io.output
            dh += self.scale.backward(dout * h, scale_io)
        if self.shift is not None:
            dh += self.shift.backward(dout, io.cache['shift'])
        return dh


class GatedAdapter:
    """A_g(h, z) = tanh(z W_f + b_f) * h + tanh(z W_g + b_g)"""

    uses_coefficients = False

    def __init__(self, prefix: str, d_model: int, embed_dim: int):
        self.d_model = d_model
        self.embed_dim = embed_dim
        self.w_f = Parameter(f"{prefix}.w_f", np.zeros((embed_dim, d_model)))
        self.b_f = Parameter(f"{prefix}.b_f", np.zeros((1, d_model)))
        self.w_g = Parameter(f"{prefix}.w_g", np.zeros((embed_dim, d_model)))
        self.b_g = Parameter(f"{prefix}.b_g", np.zeros((1, d_model)))

    def parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in (self.w_f, self.b_f, self.w_g, self.b_g)}

    def forward(self, h: np.ndarray, z: np.ndarray) -> LayerIO:
        _check_hidden(h, self.d_model)
        z = check_embedding(z, self.embed_dim).reshape(1, -1)
        f_lin = linear_forward(z, self.w_f, self.b_f)
        f_act = activation_forward(f_lin.output, 'tanh')
        g_lin = linear_forward(z, self.w_g, self.b_g)
        g_act = activation_forward(g_lin.output, 'tanh')
        out = f_act.output * h + g_act.output
        return LayerIO(out, {'input': h, 'f_lin': f_lin, 'f_act': f_act,
                             'g_lin': g_lin, 'g_act': g_act})

    def backward(self, dout: np.ndarray, io: LayerIO) -> np.ndarray:
        c = io.cache
        h = c['input']
        df = np.sum(dout * h, axis=0, keepdims=True)
        dg = np.sum(dout, axis=0, keepdims=True)
        linear_backward(activation_backward(df, c['f_act']), c['f_lin'], self.w_f, self.b_f)
        linear_backward(activation_backward(dg, c['g_act']), c['g_lin'], self.w_g, self.b_g)
        return dout * c['f_act'].output


class MultiBasisAdapter:
    """A_m(h, z) = sum_k alpha_k B_k(h) with alpha from the (shared) predictor"""

    uses_coefficients = True

    def __init__(self, prefix: str, d_model: int, spec: AdapterSpec,
                 predictor: CoefficientPredictor, rng: np.random.Generator):
        self.d_model = d_model
        self.predictor = predictor
        bottleneck = spec.resolved_bottleneck(d_model)
        self.bases = [
            AdapterBasis(f"{prefix}.basis{k}", d_model, bottleneck, spec.connection, rng)
            for k in range(spec.n_bases)
        ]

    @property
    def n_bases(self) -> int:
        return len(self.bases)

    def parameters(self) -> Dict[str, Parameter]:
        params = {}
        for basis in self.bases:
            params.update(basis.parameters())
        return params

    def basis_forward(self, h: np.ndarray, k: int) -> LayerIO:
        if not 0 <= k < self.n_bases:
            raise ConfigurationError(f"basis index {k} outside 0..{self.n_bases - 1}")
        return self.bases[k].forward(h)

    def forward(self, h: np.ndarray, z: np.ndarray,
                alpha: Optional[np.ndarray] = None) -> Tuple[LayerIO, np.ndarray]:
        """
        Weighted basis sum

        Args:
            h: Block input, T x d_model
            z: Accent embedding
            alpha: Coefficients computed elsewhere; when omitted the predictor
                runs here and its backward is driven by this adapter

        Returns:
            Tuple of (LayerIO, alpha actually used)
        """
        _check_hidden(h, self.d_model)
        pred_io = None
        if alpha is None:
            pred_io = self.predictor.forward(z)
            alpha = pred_io.output
        alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
        if alpha.shape[0] != self.n_bases:
            raise ConfigurationError(f"got {alpha.shape[0]} coefficients for {self.n_bases} bases")
        basis_ios = [basis.forward(h) for basis in self.bases]
        out = np.zeros_like(h)
        for a_k, io_k in zip(alpha, basis_ios):
            out = out + a_k * io_k.output
        return LayerIO(out, {'input': h, 'alpha': alpha, 'bases': basis_ios,
                             'predictor': pred_io}), alpha

    def backward(self, dout: np.ndarray, io: LayerIO) -> Tuple[np.ndarray, np.ndarray]:
        alpha = io.cache['alpha']
        dh = np.zeros_like(io.cache['input'])
        dalpha = np.zeros_like(alpha)
        for k, (basis, io_k) in enumerate(zip(self.bases, io.cache['bases'])):
            dalpha[k] = np.sum(dout * io_k.output)
            dh += basis.backward(alpha[k] * dout, io_k)
        if io.cache['predictor'] is not None:
            self.predictor.backward(dalpha, io.cache['predictor'])
        return dh, dalpha


class CombinedAdapter:
    """A_m(h + A_g(h, z), z); the block wrap adds h on top"""

    uses_coefficients = True

    def __init__(self, gated: GatedAdapter, multi: MultiBasisAdapter):
        self.gated = gated
        self.multi = multi

    def parameters(self) -> Dict[str, Parameter]:
        params = dict(self.gated.parameters())
        params.update(self.multi.parameters())
        return params

    def forward(self, h: np.ndarray, z: np.ndarray,
                alpha: Optional[np.ndarray] = None) -> Tuple[LayerIO, np.ndarray]:
        gated_io = self.gated.forward(h, z)
        inner = h + gated_io.output
        multi_io, alpha = self.multi.forward(inner, z, alpha)
        return LayerIO(multi_io.output, {'gated': gated_io, 'multi': multi_io}), alpha

    def backward(self, dout: np.ndarray, io: LayerIO) -> Tuple[np.ndarray, np.ndarray]:
        dinner, dalpha = self.multi.backward(dout, io.cache['multi'])
        dh = dinner + self.gated.backward(dinner, io.cache['gated'])
        return dh, dalpha


def build_adapters(spec: AdapterSpec, d_model: int, enc_layers: int,
                   rng: np.random.Generator):
    """
    Create the adapters for every configured position

    Returns:
        Tuple of ({position: adapter}, shared predictor or None)
    """
    spec.validate(enc_layers)
    positions = spec.resolved_positions(enc_layers)
    predictor = None
    if spec.uses_coefficients:
        predictor = CoefficientPredictor(spec.embed_dim, spec.predictor_hidden, spec.n_bases, rng)

    adapters = {}
    for pos in positions:
        prefix = f"adapter{pos}"
        if spec.mode == 'gated':
            adapters[pos] = GatedAdapter(f"{prefix}.gated", d_model, spec.embed_dim)
        elif spec.mode == 'multi':
            adapters[pos] = MultiBasisAdapter(f"{prefix}.multi", d_model, spec, predictor, rng)
        elif spec.mode == 'combined':
            adapters[pos] = CombinedAdapter(
                GatedAdapter(f"{prefix}.gated", d_model, spec.embed_dim),
                MultiBasisAdapter(f"{prefix}.multi", d_model, spec, predictor, rng),
            )

    if adapters:
        logger.info(f"Built {spec.mode} adapters at encoder blocks {positions}")
    return adapters, predictor
