# ===== IMPORTS =====
# === Standard library ===
import copy
import logging
from typing import Dict, List, Sequence

# === Thirdparty ===
import numpy as np
import torch
import torch.nn.functional as tfunctional

# === Local ===
from coldrank.features.batch import ColumnarBatch
from coldrank.features.schema import EmbeddingTable, FeatureSchema


# ===== GLOBALS =====
logger = logging.getLogger(__name__)


# ===== CLASSES =====
class EmbeddingModel(torch.nn.Module):
    """Embedding tables for a subset of feature groups plus snapshot bookkeeping."""

    kind = None

    def __init__(self, schema: FeatureSchema, groups: Sequence[str], generator: torch.Generator,
                 embed_init_std=0.05, seed=0):
        super().__init__()
        self.schema = schema
        self.embed_init_std = embed_init_std
        self.seed = seed
        self.version = 0
        self.embeddings = torch.nn.ModuleDict()
        for group in schema.restrict(groups):
            embedding = torch.nn.Embedding(group.cardinality, group.embed_dim)
            with torch.no_grad():
                embedding.weight.copy_(
                    torch.randn(embedding.weight.shape, generator=generator) * embed_init_std)
            self.embeddings[group.id] = embedding

    def embed_ids(self, batch: ColumnarBatch, groups: Sequence[str]) -> torch.Tensor:
        """Differentiable concatenated embeddings of an id-only batch."""
        blocks = []
        for group_id in groups:
            weight = self.embeddings[group_id].weight
            if group_id in batch.pooled:
                column = batch.pooled[group_id]
                blocks.append(tfunctional.embedding_bag(
                    torch.from_numpy(column.ids), weight, torch.from_numpy(column.offsets),
                    mode='sum', per_sample_weights=torch.from_numpy(column.counts.astype(np.float32)),
                    include_last_offset=True))
            else:
                blocks.append(tfunctional.embedding(torch.from_numpy(batch.ids[group_id]), weight))
        return torch.cat(blocks, dim=1)

    def tables(self) -> Dict[str, EmbeddingTable]:
        return {g: EmbeddingTable(g, emb.weight.detach().numpy()) for g, emb in self.embeddings.items()}

    def param_names(self) -> List[str]:
        return [name for name, _ in self.named_parameters()]

    def clone(self):
        return copy.deepcopy(self)

    def config(self):
        raise NotImplementedError

    def training_logits(self, batch: ColumnarBatch) -> torch.Tensor:
        """(B, 2) logits whose softmax second component is pCTR."""
        raise NotImplementedError
