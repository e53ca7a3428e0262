"""
Two-phase training loop.

Coarse phase: relation + instance + global losses over batches whose i-th
query belongs to the i-th submap (all gt submaps distinct), updating every
non-`fine.` parameter. Fine phase: squared position error on (query, gt
submap) pairs, updating only `fine.` parameters.

Both phases use Adam with bias correction and record one loss-curve row per step.
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from . import autodiff as ad
from .dataset import Dataset, Query, iou_matrix
from .exceptions import DomainViolationError, NonFiniteError, TrainingDivergedError
from .model import SympLocModel
from .params import ModelParams

logger = logging.getLogger('symploc')


@dataclass
class TrainConfig:
    coarse_steps: int = 200
    fine_steps: int = 100
    batch_size: int = 8
    coarse_lr: float = 5e-4
    fine_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    log_every: int = 50


@dataclass
class TrainingResult:
    loss_curve: List[Dict] = field(default_factory=list)
    elapsed_ms: int = 0

    def losses(self, phase: str) -> List[float]:
        return [row['loss'] for row in self.loss_curve if row['phase'] == phase]


class AdamOptimizer:
    """Adam over a named subset of a ModelParams registry."""

    def __init__(self, params: ModelParams, names: Sequence[str], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.names = list(names)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(params[name].data) for name in self.names}
        self.v = {name: np.zeros_like(params[name].data) for name in self.names}

    def step(self) -> None:
        self.t += 1
        for name in self.names:
            adam_step(self, name)


def adam_step(opt: AdamOptimizer, name: str) -> None:
    """One bias-corrected Adam update of a single tensor; tensors without a gradient are left alone."""
    tensor = opt.params[name]
    if tensor.grad is None:
        return
    g = tensor.grad
    opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
    opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
    m_hat = opt.m[name] / (1.0 - opt.beta1 ** opt.t)
    v_hat = opt.v[name] / (1.0 - opt.beta2 ** opt.t)
    tensor.data = tensor.data - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


def smoothed_loss(curve: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average; the first window-1 entries average what is available."""
    values = np.asarray(curve, dtype=np.float64)
    if values.size == 0:
        return values
    cumsum = np.cumsum(np.concatenate([[0.0], values]))
    idx = np.arange(1, values.size + 1)
    start = np.maximum(idx - window, 0)
    return (cumsum[idx] - cumsum[start]) / (idx - start)


def sample_batch(rng: np.random.Generator, queries: Sequence[Query], batch_size: int) -> List[Query]:
    """Random queries with pairwise distinct ground-truth submaps."""
    batch, seen = [], set()
    for idx in rng.permutation(len(queries)):
        query = queries[int(idx)]
        if query.gt_submap_id in seen:
            continue
        batch.append(query)
        seen.add(query.gt_submap_id)
        if len(batch) == batch_size:
            break
    return batch


def _batch_dump(batch: Sequence[Query], step: int, phase: str) -> Dict:
    return {
        'phase': phase,
        'step': step,
        'query_ids': [q.id for q in batch],
        'gt_submap_ids': [q.gt_submap_id for q in batch],
        'hint_counts': [len(q.hints) for q in batch],
    }


def _diverged(message: str, batch, step: int, phase: str) -> TrainingDivergedError:
    dump = _batch_dump(batch, step, phase)
    logger.error(f"{message} at {phase} step {step}: {dump}")
    return TrainingDivergedError(f"{message} at {phase} step {step}", batch_dump=dump)


def _run_phase(model: SympLocModel, dataset: Dataset, config: TrainConfig, phase: str,
               rng: np.random.Generator, result: TrainingResult) -> None:
    if phase == 'coarse':
        steps, names, lr = config.coarse_steps, model.coarse_parameter_names(), config.coarse_lr
    else:
        steps, names, lr = config.fine_steps, model.fine_parameter_names(), config.fine_lr
    optimizer = AdamOptimizer(model.params, names, lr, config.beta1, config.beta2, config.adam_eps)
    by_id = dataset.by_id

    for step in range(steps):
        batch = sample_batch(rng, dataset.train, config.batch_size)
        submaps = [by_id[q.gt_submap_id] for q in batch]
        model.params.zero_grad()
        parts = {}
        try:
            with ad.Tape():
                if phase == 'coarse':
                    coarse = model.coarse_loss(submaps, batch, iou=iou_matrix(submaps))
                    loss, parts = coarse.total, coarse.parts
                else:
                    loss = model.fine_loss(list(zip(batch, submaps)))
                ad.backward(loss)
        except (NonFiniteError, DomainViolationError) as e:
            raise _diverged(f"Non-finite {phase} loss ({e})", batch, step, phase) from e

        value = float(loss.data)
        if not np.isfinite(value):
            raise _diverged(f"Non-finite {phase} loss", batch, step, phase)
        optimizer.step()
        if not model.params.is_finite():
            raise _diverged("Non-finite parameters after update", batch, step, phase)

        result.loss_curve.append({'phase': phase, 'step': step, 'loss': value, **parts})
        if config.log_every and (step + 1) % config.log_every == 0:
            recent = smoothed_loss(result.losses(phase), config.log_every)[-1]
            logger.info(f"{phase} step {step + 1}/{steps}: loss={value:.4f} smoothed={recent:.4f}")


def train(dataset: Dataset, model: SympLocModel, config: TrainConfig) -> TrainingResult:
    """
    Run the coarse then the fine phase in place on model.params.

    Raises:
        TrainingDivergedError: If a loss or an updated parameter is non-finite;
            carries a dump of the offending batch
    """
    if not dataset.train:
        raise ValueError("training needs at least one training query")
    rng = np.random.default_rng(config.seed)
    result = TrainingResult()
    start = time.time()
    logger.info(f"Training with {asdict(config)}")
    for phase in ('coarse', 'fine'):
        _run_phase(model, dataset, config, phase, rng, result)
    result.elapsed_ms = int((time.time() - start) * 1000)
    logger.info(f"Training finished: {len(result.loss_curve)} steps in {result.elapsed_ms}ms")
    return result
