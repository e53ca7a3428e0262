"""
Relation-level encoding: spatial graphs and the Information-Symplectic Relation Encoder.

Pipeline for one scene (point cloud or text):
    offsets -> fused edge features E -> natural parameters (theta, eta)
    -> symplectic step on (q, p) -> residual enhancement E* -> node descriptors

The same encoder class serves both modalities; only the offset width differs
(3 for centroid differences, 2*D_t for concatenated hint pairs).
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ATANH_LIMIT, Tensor
from .layers import MLP
from .params import ModelParams, glorot, inverse_softplus

logger = logging.getLogger('symploc')

SYMPLECTIC_VARIANTS = ('literal', 'symplectic')
ETA_BASE = 1.0
ETA_SLOPE = 0.1


@dataclass
class NaturalParams:
    """theta in (-1, 1) per edge channel, eta >= 1 per edge."""
    theta: Tensor  # (N, N, D)
    eta: Tensor    # (N, N, 1)


@dataclass
class PhaseState:
    """Position/momentum halves of the uncertainty-scaled natural parameter."""
    q: Tensor
    p: Tensor
    dt: Tensor


def build_offset_tensor(centroids) -> Tensor:
    """O[m, n] = c_m - c_n for an (N, 3) centroid array; antisymmetric with a zero diagonal."""
    c = ad.as_tensor(centroids)
    if c.ndim != 2 or c.shape[0] < 1:
        raise ValueError(f"centroids must be (N, 3) with N >= 1, got {c.shape}")
    n, width = c.shape
    return ad.sub(ad.reshape(c, (n, 1, width)), ad.reshape(c, (1, n, width)))


def build_text_offset_tensor(hints) -> Tensor:
    """O^t[m, n] = [t_m ; t_n], the concatenated embeddings of each description pair."""
    t = ad.as_tensor(hints)
    n, width = t.shape
    left = ad.broadcast_to(ad.reshape(t, (n, 1, width)), (n, n, width))
    right = ad.broadcast_to(ad.reshape(t, (1, n, width)), (n, n, width))
    return ad.concat([left, right], axis=-1)


def fuse_edge_features(features, offsets, mlp_geo: MLP, mlp_fuse: MLP) -> Tensor:
    """
    E[m, n] = MLP_fuse([x_m ; x_n ; MLP_geo(O[m, n])]).

    Args:
        features: (N, D_f) node features
        offsets: (N, N, G) offset tensor
        mlp_geo: maps G -> geometric embedding
        mlp_fuse: maps 2 * D_f + geometric width -> D

    Returns:
        (N, N, D) edge tensor
    """
    x = ad.as_tensor(features)
    offsets = ad.as_tensor(offsets)
    n, d_f = x.shape
    if offsets.shape[:2] != (n, n):
        raise ad.ShapeMismatchError(f"offsets {offsets.shape} do not match {n} nodes")
    geo = mlp_geo(offsets)
    left = ad.broadcast_to(ad.reshape(x, (n, 1, d_f)), (n, n, d_f))
    right = ad.broadcast_to(ad.reshape(x, (1, n, d_f)), (n, n, d_f))
    return mlp_fuse(ad.concat([left, right, geo], axis=-1))


def info_geometry_project(edges, w_eta) -> NaturalParams:
    """theta = tanh(E W_eta), eta = 1 + 0.1 ||E||."""
    edges = ad.as_tensor(edges)
    # tanh saturates to exactly +-1 in float64
    theta = ad.clamp(ad.tanh(ad.matmul(edges, w_eta)), lo=-ATANH_LIMIT, hi=ATANH_LIMIT)
    eta = ETA_BASE + ETA_SLOPE * ad.l2_norm(edges, axis=-1, keepdims=True)
    return NaturalParams(theta=theta, eta=eta)


def fisher_rao_distance(i: Tuple[int, int], j: Tuple[int, int], params: NaturalParams) -> float:
    """
    Approximate Fisher-Rao distance between edges i and j.

    ||theta_i - theta_j|| / sqrt(eta_bar), eta_bar the mean of the two precisions.
    Diagnostic only; the forward pass uses the per-edge 1/sqrt(eta) scaling.
    """
    theta = params.theta.data
    eta = params.eta.data
    diff = theta[i] - theta[j]
    eta_bar = 0.5 * (float(eta[i].squeeze()) + float(eta[j].squeeze()))
    return float(np.linalg.norm(diff) / np.sqrt(eta_bar))


def split_phase(natural: NaturalParams) -> Tuple[Tensor, Tensor]:
    """Scale theta by 1/sqrt(eta) and split channels into (q, p)."""
    width = natural.theta.shape[-1]
    if width % 2:
        raise ValueError(f"edge width must be even for the phase split, got {width}")
    scaled = ad.div(natural.theta, ad.sqrt(natural.eta))
    half = width // 2
    return scaled[..., :half], scaled[..., half:]


def symplectic_update(q, p, w_v, dt, variant: str = 'literal') -> Tuple[Tensor, Tensor]:
    """
    One Euler step under the force tanh(W_V q).

    literal: p' = p - dt tanh(W_V q), q' = q + dt p
    symplectic:    p' = p - dt tanh(W_V q), q' = q + dt p'  (volume-preserving)
    """
    if variant not in SYMPLECTIC_VARIANTS:
        raise ValueError(f"Unknown symplectic variant '{variant}'. Expected one of {SYMPLECTIC_VARIANTS}")
    q, p, dt = ad.as_tensor(q), ad.as_tensor(p), ad.as_tensor(dt)
    # W_V q for column vectors is q @ W_V^T for rows
    force = ad.tanh(ad.matmul(q, ad.swap_last(ad.as_tensor(w_v))))
    p_next = p - dt * force
    q_next = q + dt * (p_next if variant == 'symplectic' else p)
    return q_next, p_next


def symplectic_step(natural: NaturalParams, w_v, dt, variant: str = 'literal') -> PhaseState:
    q, p = split_phase(natural)
    q_next, p_next = symplectic_update(q, p, w_v, dt, variant=variant)
    return PhaseState(q=q_next, p=p_next, dt=ad.as_tensor(dt))


def residual_enhance(edges, phase: PhaseState, alpha_res: float) -> Tensor:
    """E* = LayerNorm(E + alpha_res * [q' ; p'])."""
    edges = ad.as_tensor(edges)
    state = ad.concat([phase.q, phase.p], axis=-1)
    if state.shape != edges.shape:
        raise ad.ShapeMismatchError(f"phase state {state.shape} does not match edges {edges.shape}")
    return ad.layer_norm(edges + alpha_res * state)


def edge_to_node_aggregate(edges) -> Tensor:
    """x_m[d] = sum_n softmax_n(E*[m, :, d]) * E*[m, n, d]."""
    edges = ad.as_tensor(edges)
    weights = ad.softmax(edges, axis=1)
    return ad.tsum(weights * edges, axis=1)


class RelationEncoder:
    """
    Fusion MLPs plus ISRE weights for one modality, registered under `<name>.*`.

    use_isre=False skips the information-geometry, symplectic and residual stages
    and aggregates LayerNorm(E) directly.
    """

    def __init__(self, store: ModelParams, name: str, d_features: int, d_offset: int, dim: int,
                 rng: np.random.Generator, alpha_res: float = 0.1, dt_init: float = 0.1,
                 variant: str = 'literal', use_isre: bool = True):
        if dim % 2:
            raise ValueError(f"relation width must be even, got {dim}")
        if variant not in SYMPLECTIC_VARIANTS:
            raise ValueError(f"Unknown symplectic variant '{variant}'")
        geo_width = max(1, dim // 4)
        self.alpha_res = alpha_res
        self.variant = variant
        self.use_isre = use_isre
        self.mlp_geo = MLP(store, f"{name}.geo", d_offset, geo_width, geo_width, rng)
        self.mlp_fuse = MLP(store, f"{name}.fuse", 2 * d_features + geo_width, dim, dim, rng)
        self.w_eta = store.add(f"{name}.w_eta", glorot(rng, dim, dim))
        self.w_v = store.add(f"{name}.w_v", glorot(rng, dim // 2, dim // 2))
        self.dt_raw = store.add(f"{name}.dt_raw", inverse_softplus(dt_init))

    def time_step(self) -> Tensor:
        return ad.softplus(self.dt_raw)

    def edges(self, features, offsets) -> Tensor:
        return fuse_edge_features(features, offsets, self.mlp_geo, self.mlp_fuse)

    def enhance(self, edges) -> Tensor:
        if not self.use_isre:
            return ad.layer_norm(edges)
        natural = info_geometry_project(edges, self.w_eta)
        phase = symplectic_step(natural, self.w_v, self.time_step(), variant=self.variant)
        return residual_enhance(edges, phase, self.alpha_res)

    def __call__(self, features, offsets) -> Tensor:
        return isre_forward(features, offsets, self)


def isre_forward(features, offsets, encoder: RelationEncoder) -> Tensor:
    """offsets -> fuse -> project -> symplectic step -> residual -> (N, D) node descriptors."""
    return edge_to_node_aggregate(encoder.enhance(encoder.edges(features, offsets)))
