"""
Coarse retrieval, fine localization and recall metrics.

Rankers map a Query to the full list of gallery ids, best first; localizers
map (Query, submap id) to a 2D position. evaluate_recall accepts any pair of
them, so trained models, baselines and oracles share one metric path.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .dataset import Dataset, Query, Submap
from .model import GalleryEncoding, SympLocModel

logger = logging.getLogger('symploc')

Ranker = Callable[[Query], List[int]]
Localizer = Callable[[Query, int], np.ndarray]


@dataclass
class RetrievalResult:
    query_id: int
    ranked_ids: List[int]
    scores: List[float]
    predicted_position: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            'query_id': self.query_id,
            'ranked_ids': self.ranked_ids,
            'scores': self.scores,
            'predicted_position': None if self.predicted_position is None else self.predicted_position.tolist(),
        }


def zscore(scores) -> np.ndarray:
    """Standardize across the gallery; a constant score vector maps to zeros."""
    s = np.asarray(scores, dtype=np.float64)
    std = s.std()
    if std == 0.0:
        return np.zeros_like(s)
    return (s - s.mean()) / std


def composite_scores(branch_scores: Dict[str, np.ndarray], branches: Optional[Sequence[str]] = None) -> np.ndarray:
    """Sum of z-normalized branch scores."""
    names = [b for b in (branches or branch_scores) if b in branch_scores]
    if not names:
        raise ValueError("no branch scores to combine")
    return np.sum([zscore(branch_scores[b]) for b in names], axis=0)


def rank_by_score(ids: Sequence[int], scores) -> np.ndarray:
    """Positions into ids, descending score, ties to the lower id."""
    return np.lexsort((np.asarray(ids), -np.asarray(scores, dtype=np.float64)))


def coarse_retrieve(query: Query, gallery: Sequence[Submap], model: SympLocModel, k: int,
                    encoding: Optional[GalleryEncoding] = None,
                    branches: Optional[Sequence[str]] = None) -> RetrievalResult:
    """
    Top-k submaps by composite score, descending; ties go to the lower id.

    Raises:
        ValueError: If the gallery is empty or k is outside [1, len(gallery)]
    """
    if not gallery:
        raise ValueError("cannot retrieve from an empty gallery")
    if not 1 <= k <= len(gallery):
        raise ValueError(f"k must lie in [1, {len(gallery)}], got {k}")
    encoding = encoding or model.encode_gallery(gallery)
    scores = composite_scores(model.branch_scores(query, encoding), branches)
    order = rank_by_score(encoding.ids, scores)[:k]
    return RetrievalResult(
        query_id=query.id,
        ranked_ids=[int(encoding.ids[i]) for i in order],
        scores=[float(scores[i]) for i in order],
    )


def retrieve_and_localize(query: Query, gallery: Sequence[Submap], model: SympLocModel, k: int,
                          encoding: Optional[GalleryEncoding] = None) -> RetrievalResult:
    """coarse_retrieve, then the fine regressor on the top-ranked submap."""
    result = coarse_retrieve(query, gallery, model, k, encoding=encoding)
    best = next(s for s in gallery if s.id == result.ranked_ids[0])
    result.predicted_position = model.fine_localize(query, best)
    return result


# =============================================================================
# Rankers and localizers
# =============================================================================

def model_ranker(model: SympLocModel, gallery: Sequence[Submap],
                 branches: Optional[Sequence[str]] = None,
                 encoding: Optional[GalleryEncoding] = None) -> Ranker:
    encoding = encoding or model.encode_gallery(gallery)

    def rank(query: Query) -> List[int]:
        return coarse_retrieve(query, gallery, model, len(gallery), encoding=encoding, branches=branches).ranked_ids

    return rank


def model_localizer(model: SympLocModel, gallery: Sequence[Submap]) -> Localizer:
    by_id = {s.id: s for s in gallery}

    def localize(query: Query, submap_id: int) -> np.ndarray:
        return model.fine_localize(query, by_id[submap_id])

    return localize


def anchor_localizer(gallery: Sequence[Submap]) -> Localizer:
    """Predicts the cell center; the untrained-regressor reference."""
    by_id = {s.id: s for s in gallery}
    return lambda query, submap_id: by_id[submap_id].anchor.copy()


def random_ranker(gallery: Sequence[Submap], seed: int = 0) -> Ranker:
    """Uniformly random order, seeded per query id so threading does not change it."""
    ids = np.array([s.id for s in gallery])

    def rank(query: Query) -> List[int]:
        rng = np.random.default_rng([seed, query.id])
        return [int(i) for i in rng.permutation(ids)]

    return rank


def oracle_ranker(gallery: Sequence[Submap]) -> Ranker:
    ids = [s.id for s in gallery]
    return lambda query: [query.gt_submap_id] + [i for i in ids if i != query.gt_submap_id]


def oracle_localizer() -> Localizer:
    return lambda query, submap_id: np.array(query.gt_position, dtype=np.float64)


def nearest_class_match_scores(query: Query, gallery: Sequence[Submap], signature_dim: int) -> np.ndarray:
    """Mean over hints of the best cosine between the hint signature and any instance feature."""
    sig = query.hints[:, :signature_dim]
    sig = sig / np.linalg.norm(sig, axis=1, keepdims=True)
    scores = []
    for submap in gallery:
        feats = submap.features
        feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        scores.append(float(np.mean(np.max(sig @ feats.T, axis=1))))
    return np.array(scores)


def nearest_class_ranker(gallery: Sequence[Submap], signature_dim: int) -> Ranker:
    ids = [s.id for s in gallery]

    def rank(query: Query) -> List[int]:
        scores = nearest_class_match_scores(query, gallery, signature_dim)
        return [int(ids[i]) for i in rank_by_score(ids, scores)]

    return rank


# =============================================================================
# Metrics
# =============================================================================

def _evaluate_one(query: Query, ranker: Ranker, localizer: Optional[Localizer], k_max: int) -> dict:
    ranked = ranker(query)[:k_max]
    record = {'query_id': query.id, 'ranked': ranked, 'distances': []}
    if localizer is not None:
        for submap_id in ranked:
            pred = np.asarray(localizer(query, submap_id), dtype=np.float64)
            record['distances'].append(float(np.linalg.norm(pred - query.gt_position)))
    return record


def evaluate_recall(queries: Sequence[Query], ranker: Ranker, k_list: Sequence[int],
                    epsilon_list: Sequence[float] = (), localizer: Optional[Localizer] = None,
                    workers: int = 1) -> dict:
    """
    Retrieval recall@k and localization recall@k within epsilon meters.

    Returns:
        {'n_queries', 'retrieval': {k: r}, 'localization': {k: {eps: r}}} with
        string keys; 'localization' is empty without a localizer
    """
    k_list = sorted(set(int(k) for k in k_list))
    if not k_list or k_list[0] < 1:
        raise ValueError(f"k_list must hold positive integers, got {k_list}")
    k_max = k_list[-1]

    if workers > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda q: _evaluate_one(q, ranker, localizer, k_max), queries))
    else:
        records = [_evaluate_one(q, ranker, localizer, k_max) for q in queries]
    records.sort(key=lambda r: r['query_id'])
    gt = {q.id: q.gt_submap_id for q in queries}

    n = len(records)
    retrieval, localization = {}, {}
    for k in k_list:
        hits = sum(gt[r['query_id']] in r['ranked'][:k] for r in records)
        retrieval[str(k)] = hits / n if n else 0.0
        if localizer is not None:
            localization[str(k)] = {}
            for eps in epsilon_list:
                ok = sum(bool(r['distances'][:k]) and min(r['distances'][:k]) <= eps for r in records)
                localization[str(k)][_eps_key(eps)] = ok / n if n else 0.0
    return {'n_queries': n, 'retrieval': retrieval, 'localization': localization}


def _eps_key(eps: float) -> str:
    return f"{float(eps):g}"


def check_k_list(k_list: Sequence[int], n_gallery: int) -> List[int]:
    """
    The requested k values, unchanged, once each fits the gallery.

    Raises:
        ValueError: If any requested k lies outside [1, n_gallery]
    """
    outside = [k for k in k_list if not 1 <= k <= n_gallery]
    if outside:
        raise ValueError(f"k_list entries {outside} do not fit a gallery of {n_gallery} submaps")
    return list(k_list)


def evaluate_model(model: SympLocModel, dataset: Dataset, k_list: Sequence[int],
                   epsilon_list: Sequence[float], split: str = 'val', workers: int = 1) -> dict:
    """Combined metrics plus one entry per enabled branch (retrieval from that branch alone)."""
    queries = dataset.val if split == 'val' else dataset.train
    gallery = dataset.gallery
    k_list = check_k_list(k_list, len(gallery))
    start = time.time()
    encoding = model.encode_gallery(gallery)
    localizer = model_localizer(model, gallery)

    metrics = {
        'split': split,
        'combined': evaluate_recall(queries, model_ranker(model, gallery, encoding=encoding),
                                    k_list, epsilon_list, localizer, workers),
        'per_branch': {},
    }
    for branch in model.branches:
        ranker = model_ranker(model, gallery, branches=[branch], encoding=encoding)
        metrics['per_branch'][branch] = evaluate_recall(queries, ranker, k_list, epsilon_list, localizer, workers)
    elapsed_ms = int((time.time() - start) * 1000)
    logger.info(
        f"Evaluated {len(queries)} {split} queries in {elapsed_ms}ms: "
        f"R@{k_list[0]}={metrics['combined']['retrieval'][str(k_list[0])]:.3f}"
    )
    return metrics


def evaluate_baselines(dataset: Dataset, k_list: Sequence[int], epsilon_list: Sequence[float],
                       split: str = 'val', seed: int = 0, workers: int = 1) -> dict:
    """Seeded random ranking and nearest-class matching, both localizing at the submap anchor."""
    queries = dataset.val if split == 'val' else dataset.train
    gallery = dataset.gallery
    k_list = check_k_list(k_list, len(gallery))
    localizer = anchor_localizer(gallery)
    return {
        'random': evaluate_recall(queries, random_ranker(gallery, seed), k_list, epsilon_list, localizer, workers),
        'nearest_class': evaluate_recall(queries, nearest_class_ranker(gallery, dataset.config.d_features),
                                         k_list, epsilon_list, localizer, workers),
    }


def format_metrics_table(metrics: dict) -> str:
    """Aligned text table: one row per (variant, k) with retrieval and localization columns."""
    rows = [('combined', metrics['combined'])]
    rows += [(name, m) for name, m in metrics.get('per_branch', {}).items()]
    rows += [(f"baseline:{name}", m) for name, m in metrics.get('baselines', {}).items()]
    eps_keys = []
    for _, m in rows:
        for per_k in m['localization'].values():
            eps_keys = list(per_k)
            break
        if eps_keys:
            break

    header = ['variant', 'k', 'retrieval'] + [f"loc@{e}m" for e in eps_keys]
    body = []
    for name, m in rows:
        for k, value in m['retrieval'].items():
            loc = m['localization'].get(k, {})
            body.append([name, k, f"{value:.4f}"] + [f"{loc.get(e, 0.0):.4f}" for e in eps_keys])

    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
    lines = ['  '.join(str(cell).ljust(w) for cell, w in zip(header, widths)).rstrip()]
    lines.append('  '.join('-' * w for w in widths))
    lines += ['  '.join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip() for row in body]
    return '\n'.join(lines) + '\n'
