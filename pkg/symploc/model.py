"""
Three-branch coarse retrieval model plus the fine-stage position regressor.

Branches (all parameters disjoint, registered under their prefix):
- instance.*  projection -> RIE -> MLP on instances; MLP on hints
- relation.*  ISRE over centroid offsets (point) and hint pairs (text)
- global.*    SMT + sequence encoder (point); attention pooling (text)
- fine.*      cross-attention of hints over instances -> offset from the cell center

Forward methods return Tensors, so the same code serves training (inside a
Tape) and retrieval (plain evaluation).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Query, Submap
from .hyperbolic import GEOMETRY_MODES, RiemannianInstanceEnhancer
from .layers import MLP, Linear, attention
from .losses import DEFAULT_GAMMA, AlignmentLoss, batched_set_lambdas
from .params import ModelParams
from .relation import SYMPLECTIC_VARIANTS, RelationEncoder, build_offset_tensor, build_text_offset_tensor
from .spectral import (
    DEFAULT_ORDER,
    LanguagePooler,
    PointSequenceEncoder,
    SpectralManifoldTransform,
    canonical_order,
    canonical_row_order,
)

logger = logging.getLogger('symploc')

BRANCHES = ('instance', 'relation', 'global')
FINE_PREFIX = 'fine.'


@dataclass
class ModelConfig:
    dim: int = 32
    d_features: int = 16
    d_hints: int = 24
    fine_dim: int = 32
    geometry_mode: str = 'default'
    symplectic_variant: str = 'literal'
    chebyshev_order: int = DEFAULT_ORDER
    gamma: float = DEFAULT_GAMMA
    alpha_res: float = 0.1
    dt_init: float = 0.1
    tau_init: Optional[float] = None
    use_rie: bool = True
    use_isre: bool = True
    use_smt: bool = True
    branches: Tuple[str, ...] = BRANCHES
    seed: int = 0

    def __post_init__(self):
        self.branches = tuple(self.branches)
        if self.geometry_mode not in GEOMETRY_MODES:
            raise ValueError(f"Unknown geometry mode '{self.geometry_mode}'")
        if self.symplectic_variant not in SYMPLECTIC_VARIANTS:
            raise ValueError(f"Unknown symplectic variant '{self.symplectic_variant}'")
        unknown = set(self.branches) - set(BRANCHES)
        if unknown or not self.branches:
            raise ValueError(f"branches must be a non-empty subset of {BRANCHES}, got {self.branches}")
        if self.dim % 4:
            raise ValueError(f"dim must be a multiple of 4, got {self.dim}")


@dataclass
class GalleryEncoding:
    """Point-side encodings of every gallery submap, computed once per evaluation."""
    ids: List[int]
    instance: List[np.ndarray] = field(default_factory=list)
    relation: List[np.ndarray] = field(default_factory=list)
    global_: Optional[np.ndarray] = None


@dataclass
class CoarseLoss:
    total: Tensor
    parts: Dict[str, float]


def _relative_centroids(submap: Submap) -> np.ndarray:
    return submap.centroids / submap.side


def _fine_keys(submap: Submap) -> np.ndarray:
    xy = (submap.centroids[:, :2] - submap.anchor) / submap.side
    return np.concatenate([submap.features, xy], axis=1)


class SympLocModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.params = ModelParams()
        rng = np.random.default_rng(config.seed)
        D, D_f, D_t = config.dim, config.d_features, config.d_hints
        store = self.params

        if 'instance' in config.branches:
            self.inst_point_proj = Linear(store, 'instance.point_proj', D_f, D, rng)
            self.inst_rie = RiemannianInstanceEnhancer(store, 'instance.rie', D, rng, mode=config.geometry_mode)
            self.inst_point_mlp = MLP(store, 'instance.point_mlp', D, D, D, rng)
            self.inst_text_mlp = MLP(store, 'instance.text_mlp', D_t, D, D, rng)
            self.inst_loss = AlignmentLoss(store, 'instance.loss', gamma=config.gamma)

        if 'relation' in config.branches:
            common = dict(alpha_res=config.alpha_res, dt_init=config.dt_init,
                          variant=config.symplectic_variant, use_isre=config.use_isre)
            self.rel_point = RelationEncoder(store, 'relation.point', D_f, 3, D, rng, **common)
            self.rel_text = RelationEncoder(store, 'relation.text', D_t, 2 * D_t, D, rng, **common)
            self.rel_loss = AlignmentLoss(store, 'relation.loss', gamma=config.gamma)

        if 'global' in config.branches:
            tau_init = float(D) if config.tau_init is None else config.tau_init
            self.glob_point_proj = Linear(store, 'global.point_proj', D_f, D, rng)
            self.glob_smt = SpectralManifoldTransform(store, 'global.smt', config.chebyshev_order, tau_init)
            self.glob_seq = PointSequenceEncoder(store, 'global.seq', D, rng)
            self.glob_pool = LanguagePooler(store, 'global.pool', D_t, D, rng)
            self.glob_loss = AlignmentLoss(store, 'global.loss', gamma=config.gamma, j_mode='iou')

        F = config.fine_dim
        self.fine_query = Linear(store, 'fine.query', D_t, F, rng)
        self.fine_key = Linear(store, 'fine.key', D_f + 2, F, rng)
        self.fine_value = Linear(store, 'fine.value', D_f + 2, F, rng)
        self.fine_regressor = MLP(store, 'fine.regressor', 2 * F, F, 2, rng)

        logger.debug(f"Built model with {len(self.params)} tensors / {self.params.count()} values")

    @property
    def branches(self) -> Tuple[str, ...]:
        return self.config.branches

    def coarse_parameter_names(self) -> List[str]:
        return self.params.names(lambda name: not name.startswith(FINE_PREFIX))

    def fine_parameter_names(self) -> List[str]:
        return self.params.names(lambda name: name.startswith(FINE_PREFIX))

    # ------------------------------------------------------------------ instance

    def encode_submap_instance(self, submap: Submap) -> Tensor:
        V = self.inst_point_proj(submap.features)
        if self.config.use_rie:
            V = self.inst_rie(V)
        return self.inst_point_mlp(V)

    def encode_query_instance(self, query: Query) -> Tensor:
        return self.inst_text_mlp(query.hints)

    # ------------------------------------------------------------------ relation

    def encode_submap_relation(self, submap: Submap) -> Tensor:
        offsets = build_offset_tensor(_relative_centroids(submap))
        return self.rel_point(submap.features, offsets)

    def encode_query_relation(self, query: Query) -> Tensor:
        return self.rel_text(query.hints, build_text_offset_tensor(query.hints))

    # ------------------------------------------------------------------ global

    def encode_submap_global(self, submap: Submap) -> Tensor:
        order = canonical_order(submap.centroids)
        X = self.glob_point_proj(submap.features[order])
        kappa = self.glob_smt(X) if self.config.use_smt else X
        return self.glob_seq(kappa)

    def encode_query_global(self, query: Query) -> Tensor:
        return self.glob_pool(query.hints[canonical_row_order(query.hints)])

    # ------------------------------------------------------------------ losses

    def coarse_loss(self, submaps: Sequence[Submap], queries: Sequence[Query], iou=None) -> CoarseLoss:
        """
        Sum of the enabled branch losses for a batch whose i-th query belongs to
        the i-th submap.
        """
        if len(submaps) != len(queries):
            raise ValueError("coarse batch needs one submap per query")
        terms = {}
        if 'instance' in self.branches:
            terms['instance'] = self.inst_loss.from_sets(
                [self.encode_submap_instance(s) for s in submaps],
                [self.encode_query_instance(q) for q in queries],
            )
        if 'relation' in self.branches:
            terms['relation'] = self.rel_loss.from_sets(
                [self.encode_submap_relation(s) for s in submaps],
                [self.encode_query_relation(q) for q in queries],
            )
        if 'global' in self.branches:
            P = ad.stack([self.encode_submap_global(s) for s in submaps], axis=0)
            Q = ad.stack([self.encode_query_global(q) for q in queries], axis=0)
            if iou is None:
                iou = np.eye(len(submaps))
            terms['global'] = self.glob_loss.from_descriptors(P, Q, iou=iou)

        total = None
        for term in terms.values():
            total = term if total is None else total + term
        return CoarseLoss(total=total, parts={name: float(t.data) for name, t in terms.items()})

    # ------------------------------------------------------------------ fine stage

    def fine_offset(self, query: Query, submap: Submap) -> Tensor:
        """Regressor output in half-cell units; (2,)."""
        if not submap.instances:
            raise ValueError(f"submap {submap.id} has no instances")
        keys = _fine_keys(submap)
        q = self.fine_query(query.hints)
        attended = attention(q, self.fine_key(keys), self.fine_value(keys))
        pooled = ad.mean(ad.concat([attended, q], axis=-1), axis=0, keepdims=True)
        return ad.reshape(self.fine_regressor(pooled), (2,))

    def fine_predict(self, query: Query, submap: Submap) -> Tensor:
        return submap.anchor + (0.5 * submap.side) * self.fine_offset(query, submap)

    def fine_localize(self, query: Query, submap: Submap) -> np.ndarray:
        return np.array(self.fine_predict(query, submap).data)

    def fine_loss(self, pairs: Sequence[Tuple[Query, Submap]]) -> Tensor:
        """Mean squared position error, measured in half-cell units."""
        errors = []
        for query, submap in pairs:
            target = (query.gt_position - submap.anchor) / (0.5 * submap.side)
            errors.append(ad.tsum(ad.square(self.fine_offset(query, submap) - target)))
        return ad.mean(ad.stack(errors, axis=0))

    # ------------------------------------------------------------------ retrieval scores

    def encode_gallery(self, gallery: Sequence[Submap]) -> GalleryEncoding:
        encoding = GalleryEncoding(ids=[s.id for s in gallery])
        if 'instance' in self.branches:
            encoding.instance = [self.encode_submap_instance(s).data for s in gallery]
        if 'relation' in self.branches:
            encoding.relation = [self.encode_submap_relation(s).data for s in gallery]
        if 'global' in self.branches:
            encoding.global_ = np.stack([self.encode_submap_global(s).data for s in gallery])
        return encoding

    def branch_scores(self, query: Query, encoding: GalleryEncoding) -> Dict[str, np.ndarray]:
        """Raw per-submap similarity for each enabled branch, aligned with encoding.ids."""
        scores = {}
        if 'instance' in self.branches:
            scores['instance'] = _set_scores(encoding.instance, self.encode_query_instance(query).data)
        if 'relation' in self.branches:
            scores['relation'] = _set_scores(encoding.relation, self.encode_query_relation(query).data)
        if 'global' in self.branches:
            q = self.encode_query_global(query).data
            P = encoding.global_
            scores['global'] = (P @ q) / (np.linalg.norm(P, axis=1) * np.linalg.norm(q))
        return scores


def _set_scores(gallery_sets: List[np.ndarray], query_set: np.ndarray) -> np.ndarray:
    """Mean of the two set-to-set directions against every gallery set."""
    lam_xt, lam_tx = batched_set_lambdas(gallery_sets, [query_set])
    return 0.5 * (lam_xt.data[:, 0] + lam_tx.data[:, 0])
