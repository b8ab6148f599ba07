# ===== IMPORTS =====
# === Standard library ===
from dataclasses import dataclass, field
import enum
import logging
import math
from typing import List, Sequence, Tuple

# === Thirdparty ===
import numpy as np
import torch
import torch.nn.functional as tfunctional

# === Local ===
from coldrank.exceptions import DimensionError


# ===== GLOBALS =====
logger = logging.getLogger(__name__)
HALF_MAX = 65504.0
HEADS = ('softmax2', 'linear')


# ===== CLASSES =====
class PrecisionMode(str, enum.Enum):
    FULL32 = 'full32'
    EMULATED16 = 'emulated16'

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass(frozen=True)
class Half:
    """IEEE 754 binary16 value kept as its raw 16-bit pattern."""
    bits: int

    def __float__(self):
        return from_half(self)


class LinearLogFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return _linear_log_tensor(x)

    @staticmethod
    def backward(ctx, grad_output):
        x, = ctx.saved_tensors
        return grad_output * linear_log_grad(x)


@dataclass
class MlpTape:
    """Everything `mlp_backward` needs: the autograd graph of one forward pass."""
    inputs: torch.Tensor
    activations: List[torch.Tensor]
    logits: torch.Tensor
    output: torch.Tensor
    params: List[torch.Tensor]
    n_layers: int


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    _optimizer: torch.optim.Adam = field(default=None, repr=False)
    _params: List[torch.Tensor] = field(default=None, repr=False)

    def bind(self, params):
        params = list(params)
        if self._optimizer is None:
            self._optimizer = torch.optim.Adam(
                params, lr=self.learning_rate,
                betas=(self.beta1, self.beta2), eps=self.epsilon)
            self._params = params
        elif len(params) != len(self._params) or any(p is not q for p, q in zip(params, self._params)):
            raise DimensionError('AdamState is bound to a different parameter list')
        return self._optimizer

    def moments(self, param):
        state = self._optimizer.state.get(param, {}) if self._optimizer is not None else {}
        if 'exp_avg' not in state:
            return torch.zeros_like(param), torch.zeros_like(param)
        return state['exp_avg'], state['exp_avg_sq']

    def export_tensors(self, names):
        # names follow the order of the bound parameter list
        tensors = {}
        for name, param in zip(names, self._params or []):
            m, v = self.moments(param)
            tensors[f'adam/{name}/exp_avg'] = m.detach().clone()
            tensors[f'adam/{name}/exp_avg_sq'] = v.detach().clone()
        return tensors

    def load_tensors(self, params, names, tensors, step):
        optimizer = self.bind(params)
        for name, param in zip(names, self._params):
            optimizer.state[param] = {
                'step': torch.tensor(float(step)),
                'exp_avg': tensors[f'adam/{name}/exp_avg'].clone(),
                'exp_avg_sq': tensors[f'adam/{name}/exp_avg_sq'].clone(),
            }
        self.step = int(step)


# ===== FUNCTIONS =====
def _linear_log_tensor(x):
    magnitude = torch.log(torch.clamp(x.abs(), min=1.0)) + 1.0
    return torch.where(x.abs() > 1.0, torch.sign(x) * magnitude, x)


def linear_log(x):
    """Odd, C1 range compressor: identity on [-1, 1], sign(x) * (ln|x| + 1) outside.

    Accepts python scalars, numpy arrays and torch tensors; tensors keep
    their autograd graph.
    """
    if isinstance(x, torch.Tensor):
        return LinearLogFunction.apply(x)
    if isinstance(x, np.ndarray):
        # integer input promotes to float32, float64 stays float64
        magnitude = np.log(np.maximum(np.abs(x), 1.0)) + 1.0
        out = np.where(np.abs(x) > 1.0, np.sign(x) * magnitude, x)
        return out.astype(np.promote_types(x.dtype, np.float32), copy=False)
    if x > 1.0:
        return math.log(x) + 1.0
    if x < -1.0:
        return -math.log(-x) - 1.0
    return float(x)


def linear_log_grad(x):
    if isinstance(x, torch.Tensor):
        return torch.where(x.abs() > 1.0, 1.0 / torch.clamp(x.abs(), min=1.0), torch.ones_like(x))
    if isinstance(x, np.ndarray):
        grad = np.where(np.abs(x) > 1.0, 1.0 / np.maximum(np.abs(x), 1.0), 1.0)
        return grad.astype(np.promote_types(x.dtype, np.float32), copy=False)
    if abs(x) > 1.0:
        return 1.0 / abs(x)
    return 1.0


def sigmoid(x):
    if isinstance(x, torch.Tensor):
        return torch.sigmoid(x)
    if isinstance(x, np.ndarray):
        out = np.empty_like(x, dtype=np.float64)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def to_half(x) -> Half:
    with np.errstate(over='ignore'):
        bits = np.array([x], dtype=np.float32).astype(np.float16).view(np.uint16)[0]
    return Half(int(bits))


def from_half(h: Half) -> float:
    return float(np.array([h.bits], dtype=np.uint16).view(np.float16).astype(np.float32)[0])


def quantize_half(x):
    """Round to the nearest binary16 value and widen back to float32."""
    if isinstance(x, torch.Tensor):
        return x.to(torch.float32).to(torch.float16).to(torch.float32)
    with np.errstate(over='ignore'):
        return np.asarray(x, dtype=np.float32).astype(np.float16).astype(np.float32)


def matmul(a: torch.Tensor, b: torch.Tensor, mode=PrecisionMode.FULL32) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f'Cannot multiply {tuple(a.shape)} by {tuple(b.shape)}')
    if PrecisionMode.parse(mode) is PrecisionMode.EMULATED16:
        # binary16 operands, float32 accumulation
        return quantize_half(a) @ quantize_half(b)
    return a @ b


def _check_chain(layers, width):
    if not layers:
        raise DimensionError('MLP needs at least one layer')
    for i, layer in enumerate(layers):
        if layer.in_features != width:
            raise DimensionError(f'Layer {i} expects width {layer.in_features}, got {width}')
        width = layer.out_features


def mlp_forward(layers: Sequence[torch.nn.Linear], inputs: torch.Tensor,
                mode=PrecisionMode.FULL32, head='softmax2') -> Tuple[torch.Tensor, MlpTape]:
    """Affine + ReLU per hidden layer, linear last layer, then the head.

    `softmax2` expects two output logits and returns the second softmax
    component (pCTR); `linear` returns the last layer as is.
    """
    assert head in HEADS
    if inputs.dim() != 2:
        raise DimensionError(f'MLP input must be 2-D, got {tuple(inputs.shape)}')
    _check_chain(layers, inputs.shape[1])
    mode = PrecisionMode.parse(mode)

    h = inputs
    activations = []
    for i, layer in enumerate(layers):
        bias = quantize_half(layer.bias) if mode is PrecisionMode.EMULATED16 else layer.bias
        h = matmul(h, layer.weight.t(), mode) + bias
        if i < len(layers) - 1:
            h = torch.relu(h)
        activations.append(h)

    logits = h
    if head == 'softmax2':
        if logits.shape[1] != 2:
            raise DimensionError(f'softmax2 head needs 2 logits, got {logits.shape[1]}')
        output = torch.softmax(logits, dim=1)[:, 1]
    else:
        output = logits

    params = [p for layer in layers for p in (layer.weight, layer.bias)]
    tape = MlpTape(inputs, activations, logits, output, params, len(layers))
    return output, tape


def mlp_backward(tape: MlpTape, upstream_grad: torch.Tensor) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """Gradients of <upstream_grad, output> w.r.t. every (weight, bias) pair."""
    if upstream_grad.shape != tape.output.shape:
        raise DimensionError(
            f'Upstream gradient {tuple(upstream_grad.shape)} does not match output {tuple(tape.output.shape)}')
    if not tape.output.requires_grad:
        raise DimensionError('Tape was recorded without autograd')
    grads = torch.autograd.grad(
        tape.output, tape.params, grad_outputs=upstream_grad,
        retain_graph=True, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(tape.params, grads)]
    return [(grads[2 * i], grads[2 * i + 1]) for i in range(tape.n_layers)]


def adam_step(state: AdamState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]):
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise DimensionError(f'{len(params)} parameters but {len(grads)} gradients')
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f'Gradient {tuple(g.shape)} does not match parameter {tuple(p.shape)}')
    optimizer = state.bind(params)
    for p, g in zip(params, grads):
        p.grad = g.detach().clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    state.step += 1
    return params


def xavier_init_(layers: Sequence[torch.nn.Linear], generator: torch.Generator):
    with torch.no_grad():
        for layer in layers:
            fan_out, fan_in = layer.weight.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            uniform = torch.rand(layer.weight.shape, generator=generator)
            layer.weight.copy_((uniform * 2.0 - 1.0) * bound)
            layer.bias.zero_()


def build_layers(dims: Sequence[int], generator: torch.Generator) -> torch.nn.ModuleList:
    layers = torch.nn.ModuleList(
        torch.nn.Linear(d_in, d_out) for d_in, d_out in zip(dims[:-1], dims[1:]))
    xavier_init_(layers, generator)
    return layers


def cross_entropy_2(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return tfunctional.cross_entropy(logits, labels.long())
