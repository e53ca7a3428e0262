"""
Run artifacts: loss-curve CSV, metrics JSON and the aligned metrics table.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, List

from .evaluation import format_metrics_table

logger = logging.getLogger('symploc')

LOSS_COLUMNS = ['phase', 'step', 'loss', 'instance', 'relation', 'global']


def write_loss_csv(loss_curve: List[Dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, restval='', lineterminator='\n')
        writer.writeheader()
        for row in loss_curve:
            writer.writerow({key: (repr(value) if isinstance(value, float) else value)
                             for key, value in row.items() if key in LOSS_COLUMNS})
    return path


def read_loss_csv(path) -> List[Dict]:
    with Path(path).open('r', encoding='utf-8', newline='') as fh:
        rows = []
        for row in csv.DictReader(fh):
            parsed = {'phase': row['phase'], 'step': int(row['step']), 'loss': float(row['loss'])}
            for key in ('instance', 'relation', 'global'):
                if row.get(key):
                    parsed[key] = float(row[key])
            rows.append(parsed)
        return rows


def write_metrics_json(metrics: Dict, path, config: Dict = None, overrides: Dict = None) -> Path:
    """Metrics plus the effective config and every flag override, for provenance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(metrics)
    payload['config'] = config or {}
    payload['overrides'] = overrides or {}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return path


def write_metrics_table(metrics: Dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_metrics_table(metrics), encoding='utf-8')
    return path


def write_divergence_dump(batch_dump: Dict, path) -> Path:
    """The offending batch of a diverged training run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(batch_dump, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    logger.error(f"Wrote divergence dump to {path}")
    return path
