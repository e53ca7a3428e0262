"""
Poincare-ball geometry and the Riemannian Instance Enhancer (RIE).

Provides:
- project_to_manifold: bounded scaling of Euclidean features into the ball
- mobius_add / mobius_sub, exp_map, log_map with two geometry modes
- riemannian_self_attention: attention weights from manifold coordinates,
  aggregation in the tangent space of each query point
- rie_forward: gated residual around the attention output

Geometry modes:
- 'default': the standard Poincare-ball exp/log/subtraction triple, which are
  mutual inverses (log_x(exp_x(v)) = v)
- 'literal': hyperboloid-style exp map, (2/sqrt(c))-scaled log map and the
  subtraction with a +2c<x,y> cross term, each clamped back into the ball

Every point an op returns satisfies sqrt(c) * ||x|| <= 1 - BALL_MARGIN.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ATANH_LIMIT, Tensor
from .exceptions import DomainViolationError
from .params import ModelParams, glorot, inverse_softplus

logger = logging.getLogger('symploc')

GEOMETRY_MODES = ('default', 'literal')
BALL_MARGIN = 1e-5
CURVATURE_EPS = 1e-6
ZERO_NORM = 1e-12
MIN_DENOMINATOR = 1e-12


def _check_mode(mode: str) -> None:
    if mode not in GEOMETRY_MODES:
        raise ValueError(f"Unknown geometry mode '{mode}'. Expected one of {GEOMETRY_MODES}")


def _dot(x, y):
    return ad.tsum(ad.mul(x, y), axis=-1, keepdims=True)


def _nonzero_mask(norm: Tensor) -> np.ndarray:
    return (norm.data >= ZERO_NORM).astype(np.float64)


def _safe_unit(v):
    """v / ||v|| with the zero vector mapped to zero; returns (unit, norm)."""
    norm = ad.l2_norm(v, axis=-1, keepdims=True)
    unit = ad.div(v, ad.clamp(norm, lo=ZERO_NORM)) * _nonzero_mask(norm)
    return unit, norm


@dataclass
class BallParams:
    """
    Learnable scalars of the Riemannian enhancer.

    curvature() = softplus(c_raw) + eps, gate() = sigmoid(beta_gate).
    """
    c_raw: Tensor
    zeta: Tensor
    beta_gate: Tensor
    eps: float = CURVATURE_EPS

    def curvature(self) -> Tensor:
        return ad.softplus(self.c_raw) + self.eps

    def gate(self) -> Tensor:
        return ad.sigmoid(self.beta_gate)

    @classmethod
    def constant(cls, curvature: float = 1.0, zeta: float = 1.0, beta: float = 0.5) -> 'BallParams':
        """Fixed-value parameters, convenient for diagnostics and tests."""
        gate = math.log(beta / (1.0 - beta)) if 0.0 < beta < 1.0 else 0.0
        return cls(
            c_raw=Tensor(inverse_softplus(curvature - CURVATURE_EPS)),
            zeta=Tensor(zeta),
            beta_gate=Tensor(gate),
        )


def clamp_to_ball(x, c):
    """Radially shrink points outside radius (1 - BALL_MARGIN)/sqrt(c)."""
    c = ad.as_tensor(c)
    max_norm = (1.0 - BALL_MARGIN) / ad.sqrt(c)
    norm = ad.l2_norm(x, axis=-1, keepdims=True)
    scale = ad.clamp(ad.div(max_norm, ad.clamp(norm, lo=ZERO_NORM)), hi=1.0)
    return ad.mul(x, scale)


def project_to_manifold(v, zeta):
    """
    Map Euclidean vectors to the ball: (v / ||v||) * tanh(zeta).

    Vectors with norm below 1e-12 map to the origin.
    """
    unit, _ = _safe_unit(ad.as_tensor(v))
    return ad.mul(unit, ad.tanh(ad.as_tensor(zeta)))


def mobius_add(x, y, c):
    """Gyrovector addition x (+) y on the ball of curvature -c."""
    x, y, c = ad.as_tensor(x), ad.as_tensor(y), ad.as_tensor(c)
    xy = _dot(x, y)
    x2 = _dot(x, x)
    y2 = _dot(y, y)
    num = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
    den = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    if np.any(np.abs(den.data) < MIN_DENOMINATOR):
        raise DomainViolationError("Mobius addition denominator vanished")
    return ad.div(num, den)


def mobius_sub(x, y, c, mode: str = 'default'):
    """
    Gyrovector subtraction x (-) y.

    default: x (+) (-y), so x (-) x = 0.
    literal: the +2c<x,y> cross term form, which does not vanish at y = x.

    Raises:
        DomainViolationError: If the denominator magnitude is below 1e-12
    """
    _check_mode(mode)
    x, y, c = ad.as_tensor(x), ad.as_tensor(y), ad.as_tensor(c)
    if mode == 'default':
        return clamp_to_ball(mobius_add(x, ad.neg(y), c), c)

    xy = _dot(x, y)
    x2 = _dot(x, x)
    y2 = _dot(y, y)
    num = (1.0 + 2.0 * c * xy + c * y2) * x - (1.0 - c * x2) * y
    den = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    if np.any(np.abs(den.data) < MIN_DENOMINATOR):
        raise DomainViolationError("Mobius subtraction denominator vanished")
    return clamp_to_ball(ad.div(num, den), c)


def conformal_factor(x, c):
    """lambda_x = 2 / (1 - c ||x||^2)."""
    return ad.div(2.0, 1.0 - ad.as_tensor(c) * _dot(x, x))


def exp_map(x, v, c, mode: str = 'default'):
    """Move from x along the geodesic with initial velocity v; v = 0 returns x."""
    _check_mode(mode)
    x, v, c = ad.as_tensor(x), ad.as_tensor(v), ad.as_tensor(c)
    sqrt_c = ad.sqrt(c)
    unit, norm = _safe_unit(v)

    if mode == 'default':
        step = ad.tanh(sqrt_c * conformal_factor(x, c) * norm * 0.5) * unit / sqrt_c
        return clamp_to_ball(mobius_add(x, step, c), c)

    # sinh(s)/s -> 1 as s -> 0, and the v term vanishes there anyway
    s = sqrt_c * norm
    ratio = ad.div(ad.sinh(s), ad.clamp(s, lo=ZERO_NORM)) * _nonzero_mask(norm)
    return clamp_to_ball(ad.cosh(s) * x + ratio * v, c)


def log_map(x, y, c, mode: str = 'default'):
    """
    Tangent vector at x pointing to y; log_x(x) = 0.

    default: (2 / (sqrt(c) lambda_x)) atanh(sqrt(c) ||u||) u / ||u||, u = (-x) (+) y
    literal: (2 / sqrt(c)) atanh(sqrt(c) ||u||) u / ||u||, u = y (-) x

    The atanh argument is clamped to 1 - 1e-7.
    """
    _check_mode(mode)
    x, y, c = ad.as_tensor(x), ad.as_tensor(y), ad.as_tensor(c)
    sqrt_c = ad.sqrt(c)

    if mode == 'default':
        u = mobius_add(ad.neg(x), y, c)
        scale = ad.div(2.0, sqrt_c * conformal_factor(x, c))
    else:
        u = mobius_sub(y, x, c, mode='literal')
        scale = ad.div(2.0, sqrt_c)

    unit, norm = _safe_unit(u)
    distance = ad.atanh(ad.clamp(sqrt_c * norm, hi=ATANH_LIMIT))
    return scale * distance * unit


@dataclass
class AttentionResult:
    """Outputs of one Riemannian self-attention pass."""
    weights: Tensor          # (N, N), rows sum to 1
    manifold_points: Tensor  # (N, D), aggregated points before psi
    features: Tensor         # (N, D), psi(manifold_points)


def riemannian_self_attention(V, params: BallParams, w_q, w_k, w_v,
                              mode: str = 'default') -> AttentionResult:
    """
    Self-attention whose values are averaged in the tangent space of each query.

    Args:
        V: (N, D) instance features, N >= 1
        params: curvature / scale / gate parameters
        w_q, w_k, w_v: (D, D) projection weights
        mode: geometry mode for the exp/log maps

    Returns:
        AttentionResult with the attention weights, the aggregated manifold
        points and their layer-normalized Euclidean features
    """
    V = ad.as_tensor(V)
    if V.ndim != 2 or V.shape[0] < 1:
        raise ValueError(f"riemannian_self_attention expects (N, D) with N >= 1, got {V.shape}")
    c = params.curvature()
    dim = V.shape[1]

    q_m = clamp_to_ball(project_to_manifold(ad.matmul(V, w_q), params.zeta), c)
    k_m = clamp_to_ball(project_to_manifold(ad.matmul(V, w_k), params.zeta), c)
    v_m = clamp_to_ball(project_to_manifold(ad.matmul(V, w_v), params.zeta), c)

    weights = ad.softmax(ad.matmul(q_m, ad.swap_last(k_m)) * (1.0 / math.sqrt(dim)), axis=-1)

    n = V.shape[0]
    base = ad.reshape(q_m, (n, 1, dim))
    targets = ad.reshape(v_m, (1, n, dim))
    tangents = log_map(base, targets, c, mode=mode)               # (N, N, D)
    aggregated = ad.tsum(ad.reshape(weights, (n, n, 1)) * tangents, axis=1)
    points = exp_map(q_m, aggregated, c, mode=mode)

    return AttentionResult(weights=weights, manifold_points=points, features=ad.layer_norm(points))


def rie_forward(V, params: BallParams, w_q, w_k, w_v, beta: Optional[float] = None,
                mode: str = 'default'):
    """
    V* = beta * psi(RSA(V)) + (1 - beta) * V.

    beta defaults to the learnable gate; passing a float fixes it (beta = 0 is
    the identity map).
    """
    V = ad.as_tensor(V)
    enhanced = riemannian_self_attention(V, params, w_q, w_k, w_v, mode=mode).features
    gate = params.gate() if beta is None else ad.as_tensor(float(beta))
    return gate * enhanced + (1.0 - gate) * V


class RiemannianInstanceEnhancer:
    """RIE with its weights registered under `<name>.*`."""

    def __init__(self, store: ModelParams, name: str, dim: int, rng: np.random.Generator,
                 mode: str = 'default', curvature: float = 1.0, zeta: float = 1.0):
        _check_mode(mode)
        self.mode = mode
        self.params = BallParams(
            c_raw=store.add(f"{name}.c_raw", inverse_softplus(curvature - CURVATURE_EPS)),
            zeta=store.add(f"{name}.zeta", zeta),
            beta_gate=store.add(f"{name}.beta_gate", 0.0),
        )
        self.w_q = store.add(f"{name}.w_q", glorot(rng, dim, dim))
        self.w_k = store.add(f"{name}.w_k", glorot(rng, dim, dim))
        self.w_v = store.add(f"{name}.w_v", glorot(rng, dim, dim))

    def __call__(self, V, beta: Optional[float] = None):
        return rie_forward(V, self.params, self.w_q, self.w_k, self.w_v, beta=beta, mode=self.mode)
