"""
Spectral Manifold Transform (SMT) and the two global descriptors.

Point side:
    X -> similarity graph -> scaled Laplacian -> Chebyshev filter bank (3 branches)
    -> triple cross-attention -> BiGRU + encoder block -> strided descriptor P^g
Language side:
    hints -> linear projection -> attention pooling -> Q^g

The point sequence model is order-sensitive, so callers put instances in
canonical_order() before encode_point_global.
"""

import logging
import math
from dataclasses import dataclass
from typing import List

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import GRU, EncoderBlock, Linear
from .params import ModelParams, glorot, inverse_softplus

logger = logging.getLogger('symploc')

GRAPH_EPS = 1e-8
N_BRANCHES = 3
DEFAULT_ORDER = 4
MIN_ROW_MASS = 1e-300


@dataclass
class SimilarityGraph:
    A: Tensor
    A_hat: Tensor
    tau: Tensor


def canonical_order(centroids) -> np.ndarray:
    """Indices sorting instances by centroid x, then y, then z."""
    c = np.asarray(centroids, dtype=np.float64)
    return np.lexsort(tuple(c[:, axis] for axis in reversed(range(c.shape[1]))))


def canonical_row_order(rows) -> np.ndarray:
    """Lexicographic row order for vectors without a spatial key (text hints)."""
    r = np.asarray(rows, dtype=np.float64)
    return np.lexsort(tuple(r[:, axis] for axis in reversed(range(r.shape[1]))))


def build_similarity_graph(X, tau) -> SimilarityGraph:
    """A = exp(-||x_m - x_n||^2 / tau) + I, A_hat = A / (row sum + 1e-8)."""
    X, tau = ad.as_tensor(X), ad.as_tensor(tau)
    n, dim = X.shape
    diff = ad.reshape(X, (n, 1, dim)) - ad.reshape(X, (1, n, dim))
    sq_dist = ad.tsum(ad.square(diff), axis=-1)
    A = ad.exp(ad.neg(sq_dist) / tau) + np.eye(n)
    A_hat = A / (ad.tsum(A, axis=1, keepdims=True) + GRAPH_EPS)
    return SimilarityGraph(A=A, A_hat=A_hat, tau=tau)


def scaled_laplacian(graph: SimilarityGraph) -> Tensor:
    """
    L = I - D^{-1/2} A_hat D^{-1/2}, rescaled by max |L| + 1e-8 into [-1, 1].
    """
    A_hat = graph.A_hat
    n = A_hat.shape[0]
    degree = ad.tsum(A_hat, axis=1, keepdims=True)
    # self-loops keep every degree positive
    assert np.all(degree.data > 0.0), "similarity graph has an empty row"
    inv_sqrt = 1.0 / ad.sqrt(degree)
    L = np.eye(n) - inv_sqrt * A_hat * ad.reshape(inv_sqrt, (1, n))
    return L / (ad.tmax(ad.tabs(L)) + GRAPH_EPS)


def chebyshev_terms(L_tilde, X, order: int) -> Tensor:
    """Stack of T_k(L~) X for k < order, shape (order, N, D)."""
    if order < 1:
        raise ValueError(f"Chebyshev order must be at least 1, got {order}")
    L_tilde, X = ad.as_tensor(L_tilde), ad.as_tensor(X)
    terms = [X]
    if order > 1:
        terms.append(ad.matmul(L_tilde, X))
    while len(terms) < order:
        terms.append(2.0 * ad.matmul(L_tilde, terms[-1]) - terms[-2])
    return ad.stack(terms, axis=0)


def chebyshev_filter_bank(L_tilde, X, beta) -> List[Tensor]:
    """
    Y^(b) = sum_k softmax(beta[b])_k T_k(L~) X for each of the three branches.

    Args:
        L_tilde: (N, N) scaled Laplacian
        X: (N, D) node features
        beta: (3, K) unconstrained coefficients

    Returns:
        [Y1, Y2, Y3], each (N, D)
    """
    beta = ad.as_tensor(beta)
    n_branches, order = beta.shape
    terms = chebyshev_terms(L_tilde, X, order)
    weights = ad.softmax(beta, axis=1)
    outputs = []
    for b in range(n_branches):
        w = ad.reshape(weights[b], (order, 1, 1))
        outputs.append(ad.tsum(w * terms, axis=0))
    return outputs


def triple_cross_attention(Y1, Y2, Y3) -> Tensor:
    """
    kappa = Omega Y3 with Omega the row-renormalized product of the
    Y3->Y1 and Y3->Y2 attention maps.
    """
    Y1, Y2, Y3 = ad.as_tensor(Y1), ad.as_tensor(Y2), ad.as_tensor(Y3)
    n, dim = Y3.shape
    scale = 1.0 / math.sqrt(dim)
    omega_1 = ad.softmax(ad.matmul(Y3, ad.swap_last(Y1)) * scale, axis=-1)
    omega_2 = ad.softmax(ad.matmul(Y3, ad.swap_last(Y2)) * scale, axis=-1)
    product = omega_1 * omega_2
    mass = ad.tsum(product, axis=-1, keepdims=True)
    empty = mass.data <= MIN_ROW_MASS
    combined = product / ad.clamp(mass, lo=MIN_ROW_MASS)
    if np.any(empty):
        logger.warning(f"triple cross-attention: {int(empty.sum())} rows fell back to uniform weights")
        combined = ad.where(np.broadcast_to(empty, combined.shape), np.full((n, n), 1.0 / n), combined)
    return ad.matmul(combined, Y3)


class SpectralManifoldTransform:
    """Learnable temperature and Chebyshev coefficients, registered under `<name>.*`."""

    def __init__(self, store: ModelParams, name: str, order: int = DEFAULT_ORDER, tau_init: float = 1.0):
        if order < 1:
            raise ValueError(f"Chebyshev order must be at least 1, got {order}")
        self.order = order
        self.tau_raw = store.add(f"{name}.tau_raw", inverse_softplus(tau_init))
        self.beta = store.add(f"{name}.beta", np.zeros((N_BRANCHES, order)))

    def temperature(self) -> Tensor:
        return ad.softplus(self.tau_raw)

    def __call__(self, X) -> Tensor:
        graph = build_similarity_graph(X, self.temperature())
        L_tilde = scaled_laplacian(graph)
        Y1, Y2, Y3 = chebyshev_filter_bank(L_tilde, X, self.beta)
        return triple_cross_attention(Y1, Y2, Y3)


class PointSequenceEncoder:
    """Bidirectional GRU, one encoder block and strided state sampling."""

    def __init__(self, store: ModelParams, name: str, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.forward_gru = GRU(store, f"{name}.gru_fwd", dim, dim, rng)
        self.backward_gru = GRU(store, f"{name}.gru_bwd", dim, dim, rng)
        self.block = EncoderBlock(store, f"{name}.block", 2 * dim, rng)

    def __call__(self, kappa) -> Tensor:
        return encode_point_global(kappa, self)


def encode_point_global(kappa, encoder: PointSequenceEncoder) -> Tensor:
    """
    (N, D) canonically ordered instance features -> D-dim global descriptor.

    The final forward state sits at the last row, the final backward state at
    the first; their 2D concatenation is sampled at stride 2.
    """
    kappa = ad.as_tensor(kappa)
    dim = encoder.dim
    states = ad.concat([
        encoder.forward_gru.run(kappa),
        encoder.backward_gru.run(kappa, reverse=True),
    ], axis=-1)
    encoded = encoder.block(states)
    final = ad.concat([encoded[-1, :dim], encoded[0, dim:]], axis=-1)
    return final[::2]


class LanguagePooler:
    """Linear projection of hints followed by attention pooling."""

    def __init__(self, store: ModelParams, name: str, d_in: int, dim: int, rng: np.random.Generator):
        self.project = Linear(store, f"{name}.project", d_in, dim, rng)
        self.w_p = store.add(f"{name}.w_p", glorot(rng, dim, dim))
        self.w = store.add(f"{name}.w", glorot(rng, dim, 1))

    def __call__(self, hints) -> Tensor:
        return pool_language_global(hints, self)


def pooling_weights(projected, pooler: LanguagePooler) -> Tensor:
    scores = ad.matmul(ad.tanh(ad.matmul(projected, pooler.w_p)), pooler.w)
    return ad.softmax(scores, axis=0)


def pool_language_global(T, pooler: LanguagePooler) -> Tensor:
    """Q^g = sum_j a_j t'_j with a = softmax(w . tanh(W_p t'_j))."""
    T = ad.as_tensor(T)
    if T.ndim != 2 or T.shape[0] < 1:
        raise ValueError(f"pool_language_global expects (N_q, D_t) with N_q >= 1, got {T.shape}")
    projected = pooler.project(T)
    weights = pooling_weights(projected, pooler)
    return ad.tsum(weights * projected, axis=0)
