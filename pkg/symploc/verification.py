"""
Invariant and gradient suites behind the `verify` and `grad-check` subcommands.

Each suite returns a SuiteResult; a suite passes when its worst observed
error stays within tolerance. Suites are deterministic for a given seed.
"""

import logging
import time
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Instance, Query, Submap, iou_matrix, make_hint
from .hyperbolic import (
    BALL_MARGIN,
    RiemannianInstanceEnhancer,
    clamp_to_ball,
    exp_map,
    log_map,
    mobius_sub,
    project_to_manifold,
    riemannian_self_attention,
)
from .losses import (
    LossConfig,
    batched_set_lambdas,
    bidirectional_similarity,
    global_similarity,
    negative_repulsion_loss,
)
from .model import ModelConfig, SympLocModel
from .params import ModelParams, inverse_softplus
from .relation import RelationEncoder, build_offset_tensor, edge_to_node_aggregate, symplectic_update
from .spectral import (
    LanguagePooler,
    SpectralManifoldTransform,
    build_similarity_graph,
    chebyshev_filter_bank,
    scaled_laplacian,
)

logger = logging.getLogger('symploc')

CURVATURES = (0.1, 1.0, 2.0)


class SuiteResult:
    """Outcome of one verification suite."""

    def __init__(self, name: str, max_error: float, tolerance: float, checks: Dict[str, float] = None,
                 message: str = ""):
        self.name = name
        self.max_error = float(max_error)
        self.tolerance = float(tolerance)
        self.checks = checks or {}
        self.message = message

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error <= self.tolerance

    @property
    def status(self) -> str:
        return 'PASS' if self.passed else 'FAIL'

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'status': self.status,
            'max_error': self.max_error,
            'tolerance': self.tolerance,
            'checks': self.checks,
            'message': self.message,
        }


def _worst(checks: Dict[str, float], tolerances: Dict[str, float]) -> float:
    """Largest error-to-tolerance ratio across checks, rescaled to a unit tolerance."""
    return max(checks[name] / tolerances[name] for name in checks)


def _ratio_suite(name: str, checks: Dict[str, float], tolerances: Dict[str, float]) -> SuiteResult:
    failing = [k for k in checks if not checks[k] <= tolerances[k]]
    message = "all checks within tolerance" if not failing else "failing: " + ", ".join(failing)
    return SuiteResult(name, _worst(checks, tolerances), 1.0, checks, message)


def _ball_point(rng: np.random.Generator, dim: int, c: float, max_scaled_radius: float) -> np.ndarray:
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    return direction * rng.uniform(0.0, max_scaled_radius) / np.sqrt(c)


# =============================================================================
# Hyperbolic geometry
# =============================================================================

def hyperbolic_suite(seed: int = 0, n_points: int = 100, n_ops: int = 10000, dim: int = 8) -> SuiteResult:
    """Gyro identities, exp/log round trip and ball containment."""
    rng = np.random.default_rng(seed)
    gyro = roundtrip = overflow = 0.0
    zero = np.zeros(dim)
    for c in CURVATURES:
        for _ in range(n_points):
            x = _ball_point(rng, dim, c, 0.95)
            y = _ball_point(rng, dim, c, 0.95)
            gyro = max(
                gyro,
                float(np.linalg.norm(mobius_sub(x, x, c).data)),
                float(np.linalg.norm(mobius_sub(x, zero, c).data - x)),
                float(np.linalg.norm(mobius_sub(zero, y, c).data + y)),
            )
            base = _ball_point(rng, dim, c, 0.5)
            v = rng.normal(size=dim)
            v *= rng.uniform(0.0, 0.5) / np.linalg.norm(v)
            back = log_map(base, exp_map(base, v, c), c).data
            roundtrip = max(roundtrip, float(np.linalg.norm(back - v)) / max(1.0, float(np.linalg.norm(v))))

    limit = 1.0 - BALL_MARGIN
    for _ in range(n_ops):
        c = float(rng.choice(CURVATURES))
        mode = 'default' if rng.random() < 0.5 else 'literal'
        x = _ball_point(rng, dim, c, limit)
        y = _ball_point(rng, dim, c, limit)
        op = int(rng.integers(0, 3))
        if op == 0:
            out = clamp_to_ball(project_to_manifold(rng.normal(size=dim) * 3.0, rng.uniform(0.0, 3.0)), c)
        elif op == 1:
            out = exp_map(x, rng.normal(size=dim) * rng.uniform(0.0, 3.0), c, mode=mode)
        else:
            out = mobius_sub(x, y, c, mode=mode)
        overflow = max(overflow, float(np.sqrt(c) * np.linalg.norm(out.data)) - limit)

    checks = {'gyro_identities': gyro, 'exp_log_roundtrip': roundtrip, 'ball_overflow': max(overflow, 0.0)}
    return _ratio_suite('hyperbolic', checks, {'gyro_identities': 1e-10, 'exp_log_roundtrip': 1e-6,
                                               'ball_overflow': 1e-12})


# =============================================================================
# Symplectic step
# =============================================================================

def numeric_jacobian(fn: Callable[[np.ndarray], np.ndarray], z: np.ndarray, step: float = 1e-6) -> np.ndarray:
    cols = []
    for i in range(z.size):
        dz = np.zeros_like(z)
        dz[i] = step
        cols.append((fn(z + dz) - fn(z - dz)) / (2.0 * step))
    return np.stack(cols, axis=1)


def _phase_flow(w_v: np.ndarray, dt: float, variant: str) -> Callable[[np.ndarray], np.ndarray]:
    half = w_v.shape[0]

    def flow(z: np.ndarray) -> np.ndarray:
        q, p = symplectic_update(z[:half].reshape(1, half), z[half:].reshape(1, half), w_v, dt, variant=variant)
        return np.concatenate([q.data.ravel(), p.data.ravel()])

    return flow


def symplectic_suite(seed: int = 0, n_draws: int = 20) -> SuiteResult:
    """det J = 1 for the momentum-first update; det J = det(I + dt^2 F) for the literal one."""
    rng = np.random.default_rng(seed)
    volume = literal = 0.0
    for _ in range(n_draws):
        half = int(rng.integers(1, 5))
        w_v = rng.normal(size=(half, half))
        dt = float(rng.uniform(0.01, 0.2))
        z = rng.normal(size=2 * half) * 0.5

        det_sym = np.linalg.det(numeric_jacobian(_phase_flow(w_v, dt, 'symplectic'), z))
        volume = max(volume, abs(det_sym - 1.0))

        q = z[:half]
        force_grad = (1.0 - np.tanh(w_v @ q) ** 2)[:, None] * w_v
        expected = np.linalg.det(np.eye(half) + dt * dt * force_grad)
        det_lit = np.linalg.det(numeric_jacobian(_phase_flow(w_v, dt, 'literal'), z))
        literal = max(literal, abs(det_lit - expected))

    checks = {'symplectic_volume': volume, 'literal_determinant': literal}
    return _ratio_suite('symplectic', checks, {'symplectic_volume': 1e-6, 'literal_determinant': 1e-6})


# =============================================================================
# Spectral filtering
# =============================================================================

def _softmax_rows(beta: np.ndarray) -> np.ndarray:
    e = np.exp(beta - beta.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def chebyshev_oracle(L: np.ndarray, X: np.ndarray, beta: np.ndarray) -> List[np.ndarray]:
    """Filter bank evaluated in the eigenbasis of a symmetric L."""
    eigvals, U = np.linalg.eigh(L)
    weights = _softmax_rows(beta)
    order = beta.shape[1]
    T = [np.ones_like(eigvals), eigvals]
    while len(T) < order:
        T.append(2.0 * eigvals * T[-1] - T[-2])
    outputs = []
    for b in range(beta.shape[0]):
        response = sum(weights[b, k] * T[k] for k in range(order))
        outputs.append(U @ (response[:, None] * (U.T @ X)))
    return outputs


def spectral_suite(seed: int = 0, dim: int = 6) -> SuiteResult:
    rng = np.random.default_rng(seed)
    eig_err = diag_err = graph_err = 0.0
    for n in (1, 2, 5, 9, 16):
        for order in range(1, 6):
            M = rng.normal(size=(n, n))
            L = 0.5 * (M + M.T)
            L /= max(np.max(np.abs(np.linalg.eigvalsh(L))), 1e-12)
            X = rng.normal(size=(n, dim))
            beta = rng.normal(size=(3, order))
            Y = chebyshev_filter_bank(L, X, beta)
            for y, y_ref in zip(Y, chebyshev_oracle(L, X, beta)):
                eig_err = max(eig_err, float(np.max(np.abs(y.data - y_ref))))

            lam = rng.uniform(-1.0, 1.0, size=n)
            weights = _softmax_rows(beta)
            Y = chebyshev_filter_bank(np.diag(lam), X, beta)
            for b, y in enumerate(Y):
                response = sum(weights[b, k] * np.cos(k * np.arccos(lam)) for k in range(order))
                diag_err = max(diag_err, float(np.max(np.abs(y.data - response[:, None] * X))))

        graph = build_similarity_graph(rng.normal(size=(n, dim)), float(dim))
        L_tilde = scaled_laplacian(graph).data
        graph_err = max(
            graph_err,
            float(np.max(np.abs(np.diag(graph.A.data) - 2.0))),
            float(np.max(np.abs(graph.A_hat.data.sum(axis=1) - 1.0))),
            max(float(np.max(np.abs(L_tilde))) - 1.0, 0.0),
        )

    checks = {'eigen_oracle': eig_err, 'diagonal_closed_form': diag_err, 'graph_construction': graph_err}
    return _ratio_suite('spectral', checks, {'eigen_oracle': 1e-8, 'diagonal_closed_form': 1e-10,
                                             'graph_construction': 1e-6})


# =============================================================================
# Permutations
# =============================================================================

def toy_scene(rng: np.random.Generator, submap_id: int, n_instances: int, d_features: int,
              side: float = 30.0) -> Submap:
    origin = np.array([side * submap_id, 0.0])
    submap = Submap(submap_id, origin, side)
    for _ in range(n_instances):
        xy = origin + rng.uniform(0.0, side, size=2)
        centroid = np.array([xy[0], xy[1], rng.uniform(0.0, 3.0)])
        submap.instances.append(Instance(int(rng.integers(0, 10)), centroid, rng.normal(size=d_features)))
    return submap


def toy_query(rng: np.random.Generator, query_id: int, submap: Submap, n_hints: int, noise: float = 0.1) -> Query:
    position = submap.origin + rng.uniform(0.0, submap.side, size=2)
    chosen = rng.choice(len(submap.instances), size=n_hints, replace=False)
    hints = np.stack([make_hint(submap.instances[i], position, noise, rng) for i in chosen])
    return Query(query_id, hints, submap.id, position)


def permutation_suite(seed: int = 0, dim: int = 8, n: int = 6) -> SuiteResult:
    rng = np.random.default_rng(seed)
    store = ModelParams()
    relation = RelationEncoder(store, 'relation', dim, 3, dim, rng)
    smt = SpectralManifoldTransform(store, 'smt', order=4, tau_init=float(dim))
    rie = RiemannianInstanceEnhancer(store, 'rie', dim, rng)
    pooler = LanguagePooler(store, 'pool', dim + 8, dim, rng)
    model = SympLocModel(ModelConfig(dim=dim, d_features=dim, d_hints=dim + 8, fine_dim=dim, seed=seed))

    equivariance = invariance = pooling = 0.0
    for trial in range(5):
        perm = rng.permutation(n)
        E = rng.normal(size=(n, n, dim))
        equivariance = max(equivariance, float(np.max(np.abs(
            edge_to_node_aggregate(E[perm][:, perm]).data - edge_to_node_aggregate(E).data[perm]))))

        X = rng.normal(size=(n, dim))
        centroids = rng.normal(size=(n, 3))
        out = relation(X, build_offset_tensor(centroids)).data
        out_p = relation(X[perm], build_offset_tensor(centroids[perm])).data
        equivariance = max(equivariance, float(np.max(np.abs(out_p - out[perm]))))
        equivariance = max(equivariance, float(np.max(np.abs(smt(X[perm]).data - smt(X).data[perm]))))
        rsa = riemannian_self_attention(X, rie.params, rie.w_q, rie.w_k, rie.w_v).features.data
        rsa_p = riemannian_self_attention(X[perm], rie.params, rie.w_q, rie.w_k, rie.w_v).features.data
        equivariance = max(equivariance, float(np.max(np.abs(rsa_p - rsa[perm]))))

        hints = rng.normal(size=(n, dim + 8))
        pooling = max(pooling, float(np.max(np.abs(pooler(hints[perm]).data - pooler(hints).data))))

        submap = toy_scene(rng, trial, n, dim)
        shuffled = Submap(submap.id, submap.origin, submap.side, [submap.instances[i] for i in perm])
        query = toy_query(rng, trial, submap, min(4, n))
        reordered = Query(query.id, query.hints[rng.permutation(len(query.hints))], query.gt_submap_id,
                          query.gt_position)
        same_point = np.array_equal(model.encode_submap_global(submap).data,
                                    model.encode_submap_global(shuffled).data)
        same_text = np.array_equal(model.encode_query_global(query).data,
                                   model.encode_query_global(reordered).data)
        invariance = max(invariance, 0.0 if same_point and same_text else 1.0)

    checks = {'equivariance': equivariance, 'pooling_invariance': pooling, 'descriptor_bitwise': invariance}
    return _ratio_suite('permutation', checks, {'equivariance': 1e-12, 'pooling_invariance': 1e-12,
                                                'descriptor_bitwise': 0.5})


# =============================================================================
# Losses
# =============================================================================

def _fixed_loss_config(gamma: float = 0.07, j_mode: str = 'learnable-scalar', j: float = None) -> LossConfig:
    j_raw = None
    if j is not None:
        j_raw = Tensor(np.log(j / (1.0 - j)))
    return LossConfig(gamma=gamma, a_raw=Tensor(inverse_softplus(1.0 - 1e-3)), j_mode=j_mode, j_raw=j_raw)


def loss_suite(seed: int = 0, dim: int = 8) -> SuiteResult:
    """No NaN/Inf for B in 1..8; exact zero for all-positive batches and for J = 1."""
    rng = np.random.default_rng(seed)
    non_finite = zero_violation = monotone = 0.0
    config = _fixed_loss_config()
    iou_config = _fixed_loss_config(j_mode='iou')
    for B in range(1, 9):
        X_sets = [rng.normal(size=(int(rng.integers(1, 6)), dim)) for _ in range(B)]
        T_sets = [rng.normal(size=(int(rng.integers(1, 6)), dim)) for _ in range(B)]
        S = bidirectional_similarity(*batched_set_lambdas(X_sets, T_sets))
        S_glob = global_similarity(rng.normal(size=(B, dim)), rng.normal(size=(B, dim)))
        for loss in (negative_repulsion_loss(S, config),
                     negative_repulsion_loss(S_glob, iou_config, iou=rng.uniform(0, 1, size=(B, B)))):
            non_finite = max(non_finite, 0.0 if np.isfinite(loss.data) else 1.0)

        all_positive = negative_repulsion_loss(S, config, positives=np.ones((B, B)))
        saturated = negative_repulsion_loss(S_glob, iou_config, iou=np.ones((B, B)))
        zero_violation = max(zero_violation, abs(float(all_positive.data)), abs(float(saturated.data)))

        if B > 1:
            base = rng.uniform(0.05, 0.9, size=(B, B))
            closer = base.copy()
            closer[0, 1] = base[0, 1] + 0.01
            further = base.copy()
            further[0, 1] = base[0, 1] - 0.01
            l_base = float(negative_repulsion_loss(base, config).data)
            if not (float(negative_repulsion_loss(closer, config).data) > l_base
                    > float(negative_repulsion_loss(further, config).data)):
                monotone = 1.0

    checks = {'non_finite': non_finite, 'zero_cases': zero_violation, 'monotonicity': monotone}
    return _ratio_suite('losses', checks, {'non_finite': 0.5, 'zero_cases': 1e-15,
                                           'monotonicity': 0.5})


def run_verification(seed: int = 0, n_draws: int = 20) -> List[SuiteResult]:
    suites = [
        ('hyperbolic', lambda: hyperbolic_suite(seed)),
        ('symplectic', lambda: symplectic_suite(seed, n_draws)),
        ('spectral', lambda: spectral_suite(seed)),
        ('permutation', lambda: permutation_suite(seed)),
        ('losses', lambda: loss_suite(seed)),
    ]
    return _timed(suites)


# =============================================================================
# Gradient checks
# =============================================================================

def _primitive_cases(rng: np.random.Generator) -> List[Tuple[str, Callable, List[np.ndarray]]]:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    m = rng.normal(size=(4, 2))
    positive = rng.uniform(0.5, 2.0, size=(3, 4))
    inside = rng.uniform(-0.8, 0.8, size=(3, 4))
    away_from_zero = np.sign(a) * (np.abs(a) + 0.2)
    weights = rng.normal(size=(3, 4))
    # no entry within a finite-difference step of the clamp bounds
    spread = np.linspace(-1.5, 1.5, 12).reshape(3, 4)
    mask = a > 0.0
    rows = np.array([0, 2, 0])

    def weighted(t):
        return ad.tsum(t * weights)

    return [
        ('add', lambda x, y: weighted(x + y), [a, b]),
        ('sub', lambda x, y: weighted(x - y), [a, b]),
        ('mul', lambda x, y: weighted(x * y), [a, b]),
        ('div', lambda x, y: weighted(x / y), [a, positive]),
        ('matmul', lambda x, y: ad.tsum(ad.matmul(x, y) * weights[:, :2]), [a, m]),
        ('transpose', lambda x: ad.tsum(ad.swap_last(x) * weights.T), [a]),
        ('concat', lambda x, y: ad.tsum(ad.concat([x, y], axis=0) * np.vstack([weights, weights])), [a, b]),
        ('tanh', lambda x: weighted(ad.tanh(x)), [a]),
        ('sigmoid', lambda x: weighted(ad.sigmoid(x)), [a]),
        ('softplus', lambda x: weighted(ad.softplus(x)), [a]),
        ('exp', lambda x: weighted(ad.exp(x)), [a]),
        ('log', lambda x: weighted(ad.log(x)), [positive]),
        ('cosh', lambda x: weighted(ad.cosh(x)), [a]),
        ('sinh', lambda x: weighted(ad.sinh(x)), [a]),
        ('atanh', lambda x: weighted(ad.atanh(x)), [inside]),
        ('sqrt', lambda x: weighted(ad.sqrt(x)), [positive]),
        ('abs', lambda x: weighted(ad.tabs(x)), [away_from_zero]),
        ('l2_norm', lambda x: ad.tsum(ad.l2_norm(x) * weights[:, :1]), [a]),
        ('softmax', lambda x: weighted(ad.softmax(x, axis=-1)), [a]),
        ('layer_norm', lambda x: weighted(ad.layer_norm(x)), [a]),
        ('mean', lambda x: ad.mean(ad.square(x)), [a]),
        ('max', lambda x: ad.tsum(ad.tmax(x, axis=1)), [a]),
        ('clamp', lambda x: weighted(ad.clamp(x, lo=-0.5, hi=0.5)), [spread]),
        ('where', lambda x, y: weighted(ad.where(mask, x, y)), [a, b]),
        ('getitem', lambda x: weighted(ad.getitem(x, rows)), [a]),
        ('stack', lambda x, y: ad.tsum(ad.stack([x, y], axis=0) * np.stack([weights, -2.0 * weights])), [a, b]),
        ('reshape', lambda x: ad.tsum(ad.reshape(x, (4, 3)) * weights.reshape(4, 3)), [a]),
    ]


def primitive_gradient_errors(seed: int = 0, n_seeds: int = 1) -> Dict[str, float]:
    """Worst relative error per primitive over n_seeds random draws."""
    errors = {}
    for offset in range(n_seeds):
        rng = np.random.default_rng(seed + offset)
        for name, fn, inputs in _primitive_cases(rng):
            params = [Tensor(x.copy()) for x in inputs]
            errors[name] = max(errors.get(name, 0.0), ad.finite_difference_check(fn, params))
    return errors


def toy_batch(seed: int = 0, d_features: int = 8, n_instances: int = 4, batch: int = 2,
              n_hints: int = 3) -> Tuple[List[Submap], List[Query]]:
    """B submaps of N_s instances and one query per submap, for gradient checks."""
    rng = np.random.default_rng(seed)
    submaps = [toy_scene(rng, i, n_instances, d_features) for i in range(batch)]
    queries = [toy_query(rng, i, s, n_hints) for i, s in enumerate(submaps)]
    return submaps, queries


def _model_gradient_error(branch: str, seed: int, dim: int) -> float:
    submaps, queries = toy_batch(seed, d_features=dim)
    # the fine head exists in every model; pair it with the smallest coarse branch
    branches = ('instance',) if branch == 'fine' else (branch,)
    config = ModelConfig(dim=dim, d_features=dim, d_hints=dim + 8, fine_dim=dim,
                         branches=branches, tau_init=float(dim), seed=seed)
    model = SympLocModel(config)
    if branch == 'fine':
        names = model.fine_parameter_names()
        fn = lambda *_: model.fine_loss(list(zip(queries, submaps)))
    else:
        names = model.coarse_parameter_names()
        iou = iou_matrix(submaps)
        fn = lambda *_: model.coarse_loss(submaps, queries, iou=iou).total
    return ad.finite_difference_check(fn, [model.params[n] for n in names])


def _module_gradient_errors(seed: int, dim: int, n: int) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    X = Tensor(rng.normal(size=(n, dim)))
    readout = rng.normal(size=(n, dim))
    errors = {}

    store = ModelParams()
    rie = RiemannianInstanceEnhancer(store, 'rie', dim, rng)
    errors['rie'] = ad.finite_difference_check(lambda *_: ad.tsum(rie(X) * readout), store.tensors() + [X])

    store = ModelParams()
    relation = RelationEncoder(store, 'relation', dim, 3, dim, rng)
    offsets = build_offset_tensor(rng.normal(size=(n, 3)))
    errors['isre'] = ad.finite_difference_check(
        lambda *_: ad.tsum(relation(X, offsets) * readout), store.tensors() + [X])

    store = ModelParams()
    smt = SpectralManifoldTransform(store, 'smt', order=3, tau_init=float(dim))
    errors['smt'] = ad.finite_difference_check(lambda *_: ad.tsum(smt(X) * readout), store.tensors() + [X])
    return errors


def run_gradient_checks(seed: int = 0, tolerance: float = 1e-4, n_seeds: int = 1, dim: int = 8, n: int = 4) -> List[SuiteResult]:
    """Primitive, module and full branch-loss gradients against central differences."""
    suites = [
        ('primitives', lambda: _errors_suite('primitives', primitive_gradient_errors(seed, n_seeds), tolerance)),
        ('modules', lambda: _errors_suite('modules', _module_gradient_errors(seed, dim, n), tolerance)),
    ]
    for branch in ('relation', 'instance', 'global', 'fine'):
        suites.append((f"{branch}_loss", lambda b=branch: SuiteResult(
            f"{b}_loss", _model_gradient_error(b, seed, dim), tolerance)))
    return _timed(suites)


def _errors_suite(name: str, errors: Dict[str, float], tolerance: float) -> SuiteResult:
    failing = [k for k, v in errors.items() if not v <= tolerance]
    message = "all within tolerance" if not failing else "failing: " + ", ".join(failing)
    return SuiteResult(name, max(errors.values()), tolerance, errors, message)


def _timed(suites: Sequence[Tuple[str, Callable[[], SuiteResult]]]) -> List[SuiteResult]:
    results = []
    for name, run in suites:
        start = time.time()
        result = run()
        elapsed_ms = int((time.time() - start) * 1000)
        logger.info(f"Suite {name}: {result.status} (max_error={result.max_error:.3e}, {elapsed_ms}ms)")
        results.append(result)
    return results
