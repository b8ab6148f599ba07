# ===== IMPORTS =====
# === Standard library ===
import logging
from typing import Dict, Iterable, Optional, Sequence, Union

# === Thirdparty ===
import numpy as np
import torch

# === Local ===
from coldrank.exceptions import DimensionError, ModelNotReadyError, SchemaError
from coldrank.features.batch import ColumnarBatch, build_batch_column, concat_embeddings
from coldrank.features.dataset import AdCandidate, RawExample, UserContext
from coldrank.features.schema import FeatureSchema, Side
from coldrank.models.base import EmbeddingModel
from coldrank.numerics import PrecisionMode, build_layers, mlp_forward, sigmoid


# ===== GLOBALS =====
logger = logging.getLogger(__name__)
DEFAULT_TOWER = (200, 200, 10)

Entity = Union[UserContext, AdCandidate]


# ===== CLASSES =====
class VectorIndex:
    """Offline-computed tower outputs keyed by user or ad id."""

    def __init__(self, side: Side, dim: int, version: int):
        self.side = side
        self.dim = dim
        self.version = version
        self._vectors: Dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self._vectors)

    def __contains__(self, entity_id):
        return entity_id in self._vectors

    def __getitem__(self, entity_id) -> np.ndarray:
        try:
            return self._vectors[entity_id]
        except KeyError:
            raise KeyError(f'No precomputed {self.side.value} vector for id {entity_id}') from None

    def add(self, entity_id, vector: np.ndarray):
        if vector.shape != (self.dim,):
            raise DimensionError(f'Vector of shape {vector.shape} in a {self.dim}-d index')
        self._vectors[entity_id] = vector

    def matrix(self, ids: Sequence[int]) -> np.ndarray:
        if not ids:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self[i] for i in ids])


class TwoTowerModel(EmbeddingModel):
    """Vector-product baseline: p = sigmoid(<user_tower(u), ad_tower(a)>)."""

    kind = 'two_tower'

    def __init__(self, schema: FeatureSchema, selected_groups: Optional[Sequence[str]] = None,
                 tower=DEFAULT_TOWER, precision=PrecisionMode.FULL32, embed_init_std=0.05, seed=0):
        if selected_groups is None:
            selected_groups = [g.id for g in schema.groups if g.side is not Side.CROSS]
        chosen = schema.restrict(selected_groups)
        crossed = [g.id for g in chosen if g.side is Side.CROSS]
        if crossed:
            raise SchemaError(f'Two-tower model cannot use cross feature groups: {crossed}')
        generator = torch.Generator().manual_seed(seed)
        user_group_ids = [g.id for g in chosen if g.side is Side.USER]
        ad_group_ids = [g.id for g in chosen if g.side is Side.AD]
        if not user_group_ids or not ad_group_ids:
            raise SchemaError('Two-tower model needs at least one user and one ad group')
        super().__init__(schema, user_group_ids + ad_group_ids, generator,
                         embed_init_std=embed_init_std, seed=seed)
        self.user_group_ids = user_group_ids
        self.ad_group_ids = ad_group_ids
        self.tower = tuple(int(t) for t in tower)
        self.precision = PrecisionMode.parse(precision)
        self.user_tower = build_layers([schema.input_width(self.user_group_ids), *self.tower], generator)
        self.ad_tower = build_layers([schema.input_width(self.ad_group_ids), *self.tower], generator)
        self.user_index: Optional[VectorIndex] = None
        self.ad_index: Optional[VectorIndex] = None

    @property
    def dim(self):
        return self.tower[-1]

    @property
    def selected(self):
        return self.user_group_ids + self.ad_group_ids

    def config(self):
        return {
            'selected_groups': self.selected,
            'tower': list(self.tower),
            'precision': self.precision.value,
            'embed_init_std': self.embed_init_std,
            'seed': self.seed,
        }

    def _tower_output(self, side: Side, x: torch.Tensor, precision=None) -> torch.Tensor:
        layers = self.user_tower if side is Side.USER else self.ad_tower
        mode = self.precision if precision is None else precision
        return mlp_forward(layers, x, mode, head='linear')[0]

    def training_logits(self, batch: ColumnarBatch) -> torch.Tensor:
        u = self._tower_output(Side.USER, self.embed_ids(batch, self.user_group_ids), PrecisionMode.FULL32)
        a = self._tower_output(Side.AD, self.embed_ids(batch, self.ad_group_ids), PrecisionMode.FULL32)
        logit = (u * a).sum(dim=1)
        return torch.stack([torch.zeros_like(logit), logit], dim=1)

    def _entity_vector(self, side: Side, entity: Entity, precision=None) -> np.ndarray:
        _reject_cross(self.schema, entity)
        if side is Side.USER:
            groups, user, ads = self.user_group_ids, entity, [AdCandidate(0)]
        else:
            groups, user, ads = self.ad_group_ids, UserContext(0), [entity]
        batch = build_batch_column(self.schema, self.tables(), user, ads, groups=groups)
        x = torch.from_numpy(concat_embeddings(batch, groups))
        with torch.no_grad():
            return self._tower_output(side, x, precision)[0].numpy().copy()

    def user_vector(self, user: UserContext, precision=None) -> np.ndarray:
        return self._entity_vector(Side.USER, user, precision)

    def ad_vector(self, ad: AdCandidate, precision=None) -> np.ndarray:
        return self._entity_vector(Side.AD, ad, precision)

    def precompute(self, users: Iterable[UserContext], ads: Iterable[AdCandidate]):
        self.user_index = two_tower_vectors(self, users)
        self.ad_index = two_tower_vectors(self, ads)
        logger.info('Precomputed %d user and %d ad vectors at version %d',
                    len(self.user_index), len(self.ad_index), self.version)

    def _vector(self, index, entity, vector_fn, precision):
        entity_id = entity.user_id if isinstance(entity, UserContext) else entity.ad_id
        if precision is None and index is not None and index.version == self.version and entity_id in index:
            return index[entity_id]
        return vector_fn(entity, precision)

    def score(self, user: UserContext, ads: Sequence[AdCandidate], path='column', precision=None) -> np.ndarray:
        """Inner-product scores; vectors come from the precomputed indexes when they are current."""
        if not ads:
            return np.zeros(0, dtype=np.float64)
        u = self._vector(self.user_index, user, self.user_vector, precision)
        a = np.stack([self._vector(self.ad_index, ad, self.ad_vector, precision) for ad in ads])
        return two_tower_score(u, a)

    def score_examples(self, examples: Sequence[RawExample], precision=None, activations=None) -> np.ndarray:
        users, ads = {}, {}
        for e in examples:
            if e.user_id not in users:
                users[e.user_id] = self.user_vector(e.user_context(self.schema), precision)
            if e.ad_id not in ads:
                ads[e.ad_id] = self.ad_vector(e.ad_candidate(self.schema), precision)
        return np.array([two_tower_score(users[e.user_id], ads[e.ad_id]) for e in examples], dtype=np.float64)


# ===== FUNCTIONS =====
def _reject_cross(schema: FeatureSchema, entity: Entity):
    crossed = [g.id for g in schema.cross_groups if g.id in entity.features]
    if crossed:
        raise SchemaError(f'Cross features {crossed} cannot enter a tower')


def two_tower_vectors(model: TwoTowerModel, entities: Iterable[Entity]) -> VectorIndex:
    """Tower forward pass per entity; users and ads must not be mixed."""
    index = None
    for entity in entities:
        side = Side.USER if isinstance(entity, UserContext) else Side.AD
        if index is None:
            index = VectorIndex(side, model.dim, model.version)
        elif index.side is not side:
            raise SchemaError('Cannot mix users and ads in one vector index')
        if side is Side.USER:
            index.add(entity.user_id, model.user_vector(entity))
        else:
            index.add(entity.ad_id, model.ad_vector(entity))
    if index is None:
        raise ModelNotReadyError('No entities to precompute')
    return index


def two_tower_score(user_vector, ad_vector):
    """sigmoid(<v_u, v_a>) for one ad vector or a matrix of ad vectors."""
    u = np.asarray(user_vector, dtype=np.float64)
    a = np.asarray(ad_vector, dtype=np.float64)
    if u.ndim != 1 or a.shape[-1] != u.shape[0]:
        raise DimensionError(f'User vector {u.shape} vs ad vector {a.shape}')
    if a.ndim == 1:
        return float(sigmoid(np.array([np.sum(u * a)]))[0])
    if a.ndim != 2:
        raise DimensionError(f'Ad vectors must be 1-D or 2-D, got {a.shape}')
    return sigmoid(np.sum(a * u[None, :], axis=1))
