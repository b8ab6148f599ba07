# ===== IMPORTS =====
# === Standard library ===
from dataclasses import dataclass
import logging
from typing import Dict, List, Optional, Sequence

# === Thirdparty ===
import numpy as np
import torch

# === Local ===
from coldrank.exceptions import DimensionError, SchemaError
from coldrank.features.batch import (ColumnarBatch, build_batch_column, build_batch_row,
                                     concat_embeddings, encode_examples, lookup_batch)
from coldrank.features.dataset import AdCandidate, RawExample, UserContext
from coldrank.features.schema import FeatureSchema
from coldrank.models.base import EmbeddingModel
from coldrank.numerics import PrecisionMode, build_layers, linear_log, matmul, mlp_forward, quantize_half


# ===== GLOBALS =====
logger = logging.getLogger(__name__)
DEFAULT_HIDDEN = (1024, 512, 256, 128, 64)
BATCH_BUILDERS = {
    'row': build_batch_row,
    'column': build_batch_column,
}


# ===== CLASSES =====
@dataclass
class SEWeights:
    groups: List[str]
    per_example: np.ndarray
    s: np.ndarray

    def as_dict(self):
        return {g: float(w) for g, w in zip(self.groups, self.s)}


class SEBlock(torch.nn.Module):
    """s = sigmoid(W [e_1, ..., e_M] + b), one importance weight per group."""

    def __init__(self, input_width, n_groups):
        super().__init__()
        self.linear = torch.nn.Linear(input_width, n_groups)
        with torch.no_grad():
            self.linear.weight.zero_()
            self.linear.bias.zero_()

    def forward(self, x, mode=PrecisionMode.FULL32):
        if x.shape[1] != self.linear.in_features:
            raise DimensionError(f'SE block expects width {self.linear.in_features}, got {x.shape[1]}')
        bias = self.linear.bias
        if PrecisionMode.parse(mode) is PrecisionMode.EMULATED16:
            bias = quantize_half(bias)
        return torch.sigmoid(matmul(x, self.linear.weight.t(), mode) + bias)


class ColdModel(EmbeddingModel):
    """GwEN-style pre-ranking model: group embeddings -> [linear_log] -> SE -> FCN."""

    kind = 'cold'

    def __init__(self, schema: FeatureSchema, selected_groups: Optional[Sequence[str]] = None,
                 hidden=DEFAULT_HIDDEN, use_linear_log=False, precision=PrecisionMode.FULL32,
                 embed_init_std=0.05, seed=0):
        generator = torch.Generator().manual_seed(seed)
        selected = [g.id for g in schema.restrict(selected_groups)]
        if not selected:
            raise SchemaError('COLD model needs at least one feature group')
        super().__init__(schema, selected, generator, embed_init_std=embed_init_std, seed=seed)
        self.selected = selected
        self.group_dims = [schema.group(g).embed_dim for g in selected]
        self.hidden = tuple(int(h) for h in hidden)
        self.use_linear_log = bool(use_linear_log)
        self.precision = PrecisionMode.parse(precision)
        d_in = sum(self.group_dims)
        self.se = SEBlock(d_in, len(selected))
        self.fcn = build_layers([d_in, *self.hidden, 2], generator)

    @property
    def d_in(self):
        return sum(self.group_dims)

    def config(self):
        return {
            'selected_groups': list(self.selected),
            'hidden': list(self.hidden),
            'use_linear_log': self.use_linear_log,
            'precision': self.precision.value,
            'embed_init_std': self.embed_init_std,
            'seed': self.seed,
        }

    def head(self, x: torch.Tensor, precision=None, activations: Optional[Dict] = None):
        """Returns (pCTR, logits) for a concatenated embedding matrix."""
        mode = self.precision if precision is None else PrecisionMode.parse(precision)
        if x.shape[1] != self.d_in:
            raise DimensionError(f'Model expects D_in={self.d_in}, got {x.shape[1]}')
        if activations is not None:
            activations['input'] = x
        if self.use_linear_log:
            x = linear_log(x)
            if activations is not None:
                activations['linear_log'] = x
        s = self.se(x, mode)
        v = apply_se(x, s, self.group_dims)
        pctr, tape = mlp_forward(self.fcn, v, mode)
        if activations is not None:
            activations['se'] = s
            activations['reweighted'] = v
            for i, h in enumerate(tape.activations):
                activations[f'fcn_{i}'] = h
        return pctr, tape.logits

    def training_logits(self, batch: ColumnarBatch) -> torch.Tensor:
        return self.head(self.embed_ids(batch, self.selected), precision=PrecisionMode.FULL32)[1]

    def build_batch(self, user: UserContext, ads: Sequence[AdCandidate], path='column') -> ColumnarBatch:
        return BATCH_BUILDERS[path](self.schema, self.tables(), user, ads, groups=self.selected)

    def score_batch(self, batch: ColumnarBatch, precision=None, activations=None) -> np.ndarray:
        x = torch.from_numpy(concat_embeddings(batch, self.selected))
        with torch.no_grad():
            pctr, _ = self.head(x, precision, activations)
        return pctr.numpy().astype(np.float64)

    def score(self, user: UserContext, ads: Sequence[AdCandidate], path='column', precision=None) -> np.ndarray:
        if not ads:
            return np.zeros(0, dtype=np.float64)
        return self.score_batch(self.build_batch(user, ads, path), precision)

    def score_examples(self, examples: Sequence[RawExample], precision=None, activations=None) -> np.ndarray:
        batch = lookup_batch(self.schema, self.tables(), encode_examples(self.schema, examples, self.selected))
        return self.score_batch(batch, precision, activations)


# ===== FUNCTIONS =====
def apply_se(embeddings, s, group_dims: Sequence[int]):
    """Scales the embedding block of group i by s_i (v_i = s_i * e_i)."""
    as_numpy = isinstance(embeddings, np.ndarray)
    e = torch.from_numpy(embeddings) if as_numpy else embeddings
    s = torch.as_tensor(s, dtype=e.dtype)
    if s.shape[-1] != len(group_dims):
        raise DimensionError(f'{s.shape[-1]} weights for {len(group_dims)} groups')
    if e.shape[-1] != sum(group_dims):
        raise DimensionError(f'Embedding width {e.shape[-1]} != {sum(group_dims)}')
    scale = torch.repeat_interleave(s, torch.tensor(list(group_dims)), dim=-1)
    out = e * scale
    return out.numpy() if as_numpy else out


def se_weights(model: ColdModel, batch: ColumnarBatch, precision=None) -> SEWeights:
    missing = set(model.selected) - set(batch.groups)
    if missing:
        raise DimensionError(f'Batch lacks groups {sorted(missing)} of the model')
    x = torch.from_numpy(concat_embeddings(batch, model.selected))
    if x.shape[1] != model.d_in:
        raise DimensionError(f'Model expects D_in={model.d_in}, got {x.shape[1]}')
    with torch.no_grad():
        if model.use_linear_log:
            x = linear_log(x)
        s = model.se(x, model.precision if precision is None else precision).numpy().astype(np.float64)
    return SEWeights(list(model.selected), s, s.mean(axis=0))


def cold_score(model: ColdModel, user: UserContext, ads: Sequence[AdCandidate],
               schema: Optional[FeatureSchema] = None, path='column') -> np.ndarray:
    """pCTR per ad through the column path; `schema` guards against scoring foreign data."""
    if schema is not None and schema.digest() != model.schema.digest():
        raise SchemaError('Request schema differs from the model schema')
    return model.score(user, ads, path=path)
