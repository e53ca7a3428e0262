"""
Synthetic gallery and query generation, standing in for frozen point and text backbones.

A gallery is a grid of overlapping square cells. Each cell (submap) holds a few
object instances with a class, a 3D centroid and a feature vector
    feature = [class code ; attribute code] + jitter
Each query samples a position inside one cell and describes a subset of that
cell's instances:
    hint = [instance feature ; 8-way direction one-hot (query -> instance)] + N(0, sigma^2)

Dataset file (JSON lines):
    line 1: {"kind": "header", "version", "seed", "dims", "config"}
    then:   {"kind": "submap", "id", "origin", "side", "instances": [{"class", "centroid", "feature"}]}
            {"kind": "query", "split", "id", "hints", "gt_submap", "gt_pos"}
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from django.core.exceptions import ValidationError

from .exceptions import DatasetFormatError

logger = logging.getLogger('symploc')

FORMAT_VERSION = 1
N_DIRECTIONS = 8
HEIGHT_RANGE = (0.0, 3.0)


@dataclass
class DatasetConfig:
    n_classes: int = 24
    n_attributes: int = 8
    d_features: int = 16
    grid_cols: int = 8
    grid_rows: int = 8
    cell_side: float = 30.0
    cell_stride: float = 20.0
    min_instances: int = 3
    max_instances: int = 8
    n_train: int = 512
    n_val: int = 128
    min_hints: int = 3
    max_hints: int = 6
    noise: float = 0.05
    feature_jitter: float = 0.05
    shared_multiset_fraction: float = 0.25
    disjoint_classes: bool = False
    seed: int = 42

    def __post_init__(self):
        self.validate()

    @property
    def n_submaps(self) -> int:
        return self.grid_cols * self.grid_rows

    @property
    def d_hints(self) -> int:
        return self.d_features + N_DIRECTIONS

    def validate(self) -> None:
        """
        Raises:
            ValidationError: If counts, sizes or noise levels are out of range
        """
        errors = []
        if self.d_features < 2 or self.d_features % 2:
            errors.append("d_features must be an even number >= 2")
        if self.n_classes < 1 or self.n_attributes < 1:
            errors.append("n_classes and n_attributes must be positive")
        if self.grid_cols < 1 or self.grid_rows < 1:
            errors.append("grid must have at least one cell")
        if self.cell_side <= 0 or self.cell_stride <= 0:
            errors.append("cell_side and cell_stride must be positive")
        if not 1 <= self.min_instances <= self.max_instances:
            errors.append("need 1 <= min_instances <= max_instances")
        if not 1 <= self.min_hints <= self.max_hints:
            errors.append("need 1 <= min_hints <= max_hints")
        if self.n_train < 0 or self.n_val < 0:
            errors.append("query counts must be non-negative")
        if self.noise < 0 or self.feature_jitter < 0:
            errors.append("noise levels must be non-negative")
        if not 0.0 <= self.shared_multiset_fraction <= 1.0:
            errors.append("shared_multiset_fraction must lie in [0, 1]")
        if self.disjoint_classes and self.n_classes < self.n_submaps:
            errors.append("disjoint_classes needs at least one class per submap")
        if errors:
            raise ValidationError(
                "Invalid dataset config: " + "; ".join(errors),
                code='invalid_dataset_config'
            )


@dataclass
class Instance:
    class_id: int
    centroid: np.ndarray   # (3,)
    feature: np.ndarray    # (D_f,)


@dataclass
class Submap:
    id: int
    origin: np.ndarray     # (2,)
    side: float
    instances: List[Instance] = field(default_factory=list)

    @property
    def anchor(self) -> np.ndarray:
        return self.origin + 0.5 * self.side

    @property
    def features(self) -> np.ndarray:
        return np.stack([inst.feature for inst in self.instances])

    @property
    def centroids(self) -> np.ndarray:
        return np.stack([inst.centroid for inst in self.instances])

    @property
    def class_ids(self) -> List[int]:
        return [inst.class_id for inst in self.instances]

    def contains(self, position) -> bool:
        p = np.asarray(position, dtype=np.float64)
        return bool(np.all(p >= self.origin) and np.all(p <= self.origin + self.side))


@dataclass
class Query:
    id: int
    hints: np.ndarray      # (N_q, D_t)
    gt_submap_id: int
    gt_position: np.ndarray  # (2,)


@dataclass
class Dataset:
    config: DatasetConfig
    gallery: List[Submap]
    train: List[Query]
    val: List[Query]

    def submap(self, submap_id: int) -> Submap:
        return self.by_id[submap_id]

    @property
    def by_id(self) -> Dict[int, Submap]:
        return {s.id: s for s in self.gallery}


def iou_overlap(a: Submap, b: Submap) -> float:
    """Intersection over union of two axis-aligned square cell footprints."""
    lo = np.maximum(a.origin, b.origin)
    hi = np.minimum(a.origin + a.side, b.origin + b.side)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = a.side * a.side + b.side * b.side - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(submaps) -> np.ndarray:
    n = len(submaps)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = iou_overlap(submaps[i], submaps[j])
    return out


def direction_bin(source, target) -> int:
    """8-way quantized compass direction from source to target (0 = +x, counter-clockwise)."""
    dx, dy = float(target[0] - source[0]), float(target[1] - source[1])
    angle = math.atan2(dy, dx)
    return int(round(angle / (2.0 * math.pi / N_DIRECTIONS))) % N_DIRECTIONS


def _codebooks(rng: np.random.Generator, config: DatasetConfig) -> Tuple[np.ndarray, np.ndarray]:
    half = config.d_features // 2
    classes = rng.normal(size=(config.n_classes, half))
    attributes = rng.normal(size=(config.n_attributes, half))
    classes /= np.linalg.norm(classes, axis=1, keepdims=True)
    attributes /= np.linalg.norm(attributes, axis=1, keepdims=True)
    return classes, attributes


def _sample_class_lists(rng: np.random.Generator, config: DatasetConfig) -> List[List[int]]:
    if config.disjoint_classes:
        groups = np.array_split(np.arange(config.n_classes), config.n_submaps)
    lists = []
    for i in range(config.n_submaps):
        count = int(rng.integers(config.min_instances, config.max_instances + 1))
        if config.disjoint_classes:
            lists.append([int(c) for c in rng.choice(groups[i], size=count)])
        elif i > 0 and rng.random() < config.shared_multiset_fraction:
            # same class multiset as an earlier cell; only the layout tells them apart
            lists.append(list(lists[int(rng.integers(0, i))]))
        else:
            lists.append([int(c) for c in rng.integers(0, config.n_classes, size=count)])
    return lists


def _build_gallery(rng: np.random.Generator, config: DatasetConfig) -> List[Submap]:
    class_codes, attribute_codes = _codebooks(rng, config)
    class_lists = _sample_class_lists(rng, config)
    gallery = []
    for idx, class_ids in enumerate(class_lists):
        row, col = divmod(idx, config.grid_cols)
        origin = np.array([col * config.cell_stride, row * config.cell_stride], dtype=np.float64)
        submap = Submap(id=idx, origin=origin, side=float(config.cell_side))
        for class_id in class_ids:
            xy = origin + rng.uniform(0.0, config.cell_side, size=2)
            z = rng.uniform(*HEIGHT_RANGE)
            attribute = int(rng.integers(0, config.n_attributes))
            feature = np.concatenate([class_codes[class_id], attribute_codes[attribute]])
            feature = feature + rng.normal(0.0, config.feature_jitter, size=config.d_features)
            submap.instances.append(Instance(class_id, np.array([xy[0], xy[1], z]), feature))
        gallery.append(submap)
    return gallery


def make_hint(instance: Instance, position, noise: float, rng: np.random.Generator) -> np.ndarray:
    direction = np.zeros(N_DIRECTIONS)
    direction[direction_bin(position, instance.centroid[:2])] = 1.0
    hint = np.concatenate([instance.feature, direction])
    if noise > 0:
        hint = hint + rng.normal(0.0, noise, size=hint.shape)
    return hint


def _build_queries(rng: np.random.Generator, config: DatasetConfig, gallery: List[Submap],
                   count: int, first_id: int) -> List[Query]:
    queries = []
    for offset in range(count):
        submap = gallery[int(rng.integers(0, len(gallery)))]
        position = submap.origin + rng.uniform(0.0, submap.side, size=2)
        n_inst = len(submap.instances)
        n_hints = int(rng.integers(min(config.min_hints, n_inst), min(config.max_hints, n_inst) + 1))
        chosen = rng.choice(n_inst, size=n_hints, replace=False)
        hints = np.stack([make_hint(submap.instances[i], position, config.noise, rng) for i in chosen])
        queries.append(Query(first_id + offset, hints, submap.id, position))
    return queries


def generate_synthetic_dataset(config: DatasetConfig) -> Dataset:
    """Deterministic gallery plus train/val queries from config.seed."""
    rng = np.random.default_rng(config.seed)
    gallery = _build_gallery(rng, config)
    train = _build_queries(rng, config, gallery, config.n_train, first_id=0)
    val = _build_queries(rng, config, gallery, config.n_val, first_id=config.n_train)
    logger.info(
        f"Generated dataset: {len(gallery)} submaps, {len(train)} train / {len(val)} val queries "
        f"(seed={config.seed}, noise={config.noise})"
    )
    return Dataset(config=config, gallery=gallery, train=train, val=val)


# =============================================================================
# JSON lines I/O
# =============================================================================

def _floats(values) -> list:
    return [float(v) for v in np.ravel(values)]


def _submap_record(submap: Submap) -> dict:
    return {
        'kind': 'submap',
        'id': submap.id,
        'origin': _floats(submap.origin),
        'side': float(submap.side),
        'instances': [
            {'class': inst.class_id, 'centroid': _floats(inst.centroid), 'feature': _floats(inst.feature)}
            for inst in submap.instances
        ],
    }


def _query_record(query: Query, split: str) -> dict:
    return {
        'kind': 'query',
        'split': split,
        'id': query.id,
        'hints': [_floats(h) for h in query.hints],
        'gt_submap': query.gt_submap_id,
        'gt_pos': _floats(query.gt_position),
    }


def write_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config = dataset.config
    header = {
        'kind': 'header',
        'version': FORMAT_VERSION,
        'seed': config.seed,
        'dims': {'d_features': config.d_features, 'd_hints': config.d_hints},
        'config': asdict(config),
    }
    with path.open('w', encoding='utf-8', newline='\n') as fh:
        fh.write(json.dumps(header) + '\n')
        for submap in dataset.gallery:
            fh.write(json.dumps(_submap_record(submap)) + '\n')
        for split, queries in (('train', dataset.train), ('val', dataset.val)):
            for query in queries:
                fh.write(json.dumps(_query_record(query, split)) + '\n')
    logger.info(f"Wrote dataset to {path}")
    return path


def read_dataset(path) -> Dataset:
    """
    Raises:
        DatasetFormatError: If the header is missing, the version is unknown,
            a record is malformed or a query points at an unknown submap
    """
    path = Path(path)
    with path.open('r', encoding='utf-8') as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise DatasetFormatError(f"{path} is empty")

    try:
        records = [json.loads(line) for line in lines]
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: invalid JSON ({e})") from e

    header = records[0]
    if header.get('kind') != 'header':
        raise DatasetFormatError(f"{path}: first line must be the header record")
    if header.get('version') != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {header.get('version')}")

    try:
        config = DatasetConfig(**header['config'])
        gallery, splits = [], {'train': [], 'val': []}
        for record in records[1:]:
            kind = record.get('kind')
            if kind == 'submap':
                submap = Submap(record['id'], np.array(record['origin'], dtype=np.float64), float(record['side']))
                for inst in record['instances']:
                    submap.instances.append(Instance(
                        int(inst['class']),
                        np.array(inst['centroid'], dtype=np.float64),
                        np.array(inst['feature'], dtype=np.float64),
                    ))
                gallery.append(submap)
            elif kind == 'query':
                splits[record['split']].append(Query(
                    int(record['id']),
                    np.array(record['hints'], dtype=np.float64),
                    int(record['gt_submap']),
                    np.array(record['gt_pos'], dtype=np.float64),
                ))
            else:
                raise DatasetFormatError(f"{path}: unknown record kind '{kind}'")
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, DatasetFormatError):
            raise
        raise DatasetFormatError(f"{path}: malformed record ({e})") from e

    known = {s.id for s in gallery}
    for query in splits['train'] + splits['val']:
        if query.gt_submap_id not in known:
            raise DatasetFormatError(f"{path}: query {query.id} points at unknown submap {query.gt_submap_id}")

    return Dataset(config=config, gallery=gallery, train=splits['train'], val=splits['val'])
