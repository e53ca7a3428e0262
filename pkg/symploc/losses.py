"""
Contrastive alignment shared by the relation, instance and global branches.

All three branch losses are negative_repulsion_loss applied to a B x B
similarity matrix; they differ only in how S is built (set-to-set lambdas
or global descriptors) and in the source of the overlap weight J.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DomainViolationError
from .params import ModelParams, inverse_softplus

logger = logging.getLogger('symploc')

DEFAULT_GAMMA = 0.07
S_CLAMP = 1e-7
A_FLOOR = 1e-3
MIN_VECTOR_NORM = 1e-12
PAD_BIAS = -1e6
J_MODES = ('learnable-scalar', 'iou')


def _unit_rows(X) -> Tensor:
    X = ad.as_tensor(X)
    norms = ad.l2_norm(X, axis=-1, keepdims=True)
    if np.any(norms.data < MIN_VECTOR_NORM):
        raise DomainViolationError("set-to-set similarity is undefined for a zero vector")
    return X / norms


def set_to_set_lambda(X_set, T_set) -> Tensor:
    """
    (1/N) sum_m max_j cos(x_m, t_j); swap the arguments for the reverse direction.

    Raises:
        DomainViolationError: If either set contains a zero vector
    """
    cos = ad.matmul(_unit_rows(X_set), ad.swap_last(_unit_rows(T_set)))
    return ad.mean(ad.tmax(cos, axis=1))


def _pad_sets(sets: Sequence) -> Tuple[Tensor, np.ndarray]:
    """Unit-normalize and zero-pad variable-size sets to (B, N_max, D) plus a validity mask."""
    units = [_unit_rows(s) for s in sets]
    n_max = max(u.shape[0] for u in units)
    dim = units[0].shape[1]
    padded = []
    mask = np.zeros((len(units), n_max), dtype=bool)
    for b, u in enumerate(units):
        mask[b, :u.shape[0]] = True
        if u.shape[0] < n_max:
            u = ad.concat([u, np.zeros((n_max - u.shape[0], dim))], axis=0)
        padded.append(u)
    return ad.stack(padded, axis=0), mask


def batched_set_lambdas(X_sets: Sequence, T_sets: Sequence) -> Tuple[Tensor, Tensor]:
    """
    Pairwise set-to-set lambdas for every (X_i, T_j) combination.

    Returns:
        (lam_xt, lam_tx), both indexed by the pair (X_i, T_j) with shape
        (len(X_sets), len(T_sets)): lam_xt[i, j] = lambda(X_i -> T_j) and
        lam_tx[i, j] = lambda(T_j -> X_i)
    """
    X, x_mask = _pad_sets(X_sets)
    T, t_mask = _pad_sets(T_sets)
    b_x, n_x, dim = X.shape
    b_t, n_t, _ = T.shape

    # cos[i, j, n, m] = cos(X_i[n], T_j[m])
    cos = ad.matmul(ad.reshape(X, (b_x, 1, n_x, dim)), ad.reshape(ad.swap_last(T), (1, b_t, dim, n_t)))
    pair_valid = x_mask[:, None, :, None] & t_mask[None, :, None, :]
    masked = ad.where(pair_valid, cos, PAD_BIAS)

    x_weights = (x_mask / x_mask.sum(axis=1, keepdims=True))[:, None, :]   # (B_x, 1, N_x)
    t_weights = (t_mask / t_mask.sum(axis=1, keepdims=True))[None, :, :]   # (1, B_t, N_t)

    best_t = ad.where(np.broadcast_to(x_mask[:, None, :], (b_x, b_t, n_x)), ad.tmax(masked, axis=3), 0.0)
    best_x = ad.where(np.broadcast_to(t_mask[None, :, :], (b_x, b_t, n_t)), ad.tmax(masked, axis=2), 0.0)
    lam_xt = ad.tsum(best_t * x_weights, axis=-1)
    lam_tx = ad.tsum(best_x * t_weights, axis=-1)
    return lam_xt, lam_tx


def _clamp_similarity(S) -> Tensor:
    return ad.clamp(S, lo=S_CLAMP, hi=1.0 - S_CLAMP)


def bidirectional_similarity(lam_xt, lam_tx, gamma: float = DEFAULT_GAMMA) -> Tensor:
    """
    S_ij = (softmax_b(lam_xt[i] / gamma)_j + softmax_b(lam_tx[i] / gamma)_j) / 2, clamped into (0, 1).

    Both lambda matrices are indexed by the same (submap i, query j) pair, so
    S_ij only depends on X_i and the query sets.
    """
    if gamma <= 0:
        raise ValueError(f"temperature must be positive, got {gamma}")
    forward = ad.softmax(ad.as_tensor(lam_xt) / gamma, axis=1)
    reverse = ad.softmax(ad.as_tensor(lam_tx) / gamma, axis=1)
    return _clamp_similarity(0.5 * (forward + reverse))


def global_similarity(P, Q, gamma: float = DEFAULT_GAMMA) -> Tensor:
    """Same averaged two-way softmax over the global descriptor inner products."""
    if gamma <= 0:
        raise ValueError(f"temperature must be positive, got {gamma}")
    P = _unit_rows(P)
    Q = _unit_rows(Q)
    forward = ad.softmax(ad.matmul(P, ad.swap_last(Q)) / gamma, axis=1)
    # reverse[i, j] scores Q_j against P_i; for the inner product it equals forward
    reverse = ad.softmax(ad.swap_last(ad.matmul(Q, ad.swap_last(P))) / gamma, axis=1)
    return _clamp_similarity(0.5 * (forward + reverse))


@dataclass
class LossConfig:
    """
    gamma: temperature
    a_raw: softplus pre-activation of the curvature scale a (a >= 1e-3)
    j_mode: 'learnable-scalar' uses sigmoid(j_raw); 'iou' takes J from submap overlaps
    """
    gamma: float
    a_raw: Tensor
    j_mode: str = 'learnable-scalar'
    j_raw: Optional[Tensor] = None

    def __post_init__(self):
        if self.j_mode not in J_MODES:
            raise ValueError(f"Unknown j_mode '{self.j_mode}'. Expected one of {J_MODES}")
        if self.gamma <= 0:
            raise ValueError(f"temperature must be positive, got {self.gamma}")

    def scale(self) -> Tensor:
        return ad.softplus(self.a_raw) + A_FLOOR

    def overlap(self, iou=None):
        if self.j_mode == 'iou':
            if iou is None:
                raise ValueError("j_mode 'iou' needs an overlap matrix")
            return ad.as_tensor(np.asarray(iou, dtype=np.float64))
        if self.j_raw is None:
            return ad.as_tensor(0.0)
        return ad.sigmoid(self.j_raw)


def negative_repulsion_loss(S, config: LossConfig, iou=None, positives=None) -> Tensor:
    """
    -(1/B) sum_ij I_ij (1 - J_ij)^(1/a) log(1 - S_ij), I_ij = 1 off the positive mask.

    positives defaults to the identity (batch diagonal). Pairs with J = 1
    contribute exactly zero.
    """
    S = _clamp_similarity(S)
    B = S.shape[0]
    negatives = 1.0 - (np.eye(B) if positives is None else np.asarray(positives, dtype=np.float64))

    J = config.overlap(iou)
    remainder = ad.broadcast_to(1.0 - J, S.shape)
    saturated = remainder.data <= 0.0
    weight = ad.exp(ad.log(ad.clamp(remainder, lo=np.finfo(np.float64).tiny)) / config.scale())
    weight = ad.where(saturated, 0.0, weight)

    return ad.neg(ad.tsum(negatives * weight * ad.log(1.0 - S))) / float(B)


class AlignmentLoss:
    """A LossConfig whose a (and J, in scalar mode) are registered parameters."""

    def __init__(self, store: ModelParams, name: str, gamma: float = DEFAULT_GAMMA,
                 j_mode: str = 'learnable-scalar', a_init: float = 1.0, j_init: float = -4.0):
        a_raw = store.add(f"{name}.a_raw", inverse_softplus(a_init - A_FLOOR))
        j_raw = store.add(f"{name}.j_raw", j_init) if j_mode == 'learnable-scalar' else None
        self.config = LossConfig(gamma=gamma, a_raw=a_raw, j_mode=j_mode, j_raw=j_raw)

    def from_sets(self, X_sets: List, T_sets: List) -> Tensor:
        lam_xt, lam_tx = batched_set_lambdas(X_sets, T_sets)
        return negative_repulsion_loss(bidirectional_similarity(lam_xt, lam_tx, self.config.gamma), self.config)

    def from_descriptors(self, P, Q, iou=None) -> Tensor:
        return negative_repulsion_loss(global_similarity(P, Q, self.config.gamma), self.config, iou=iou)
