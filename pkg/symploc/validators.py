"""
Run-config validation for the symploc command.

A run config is a line-oriented key=value file (parsed with python-dotenv).
Values are validated and coerced against SCHEMA:
- unknown keys are rejected
- numbers must parse and fall inside their range
- choices must be one of the allowed values
- lists are comma-separated

Precedence: settings.SYMPLOC_DEFAULTS < config file < --set overrides.
"""

from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from django.conf import settings
from django.core.exceptions import ValidationError
from dotenv import dotenv_values

from .dataset import DatasetConfig
from .hyperbolic import GEOMETRY_MODES
from .model import BRANCHES, ModelConfig
from .relation import SYMPLECTIC_VARIANTS
from .training import TrainConfig

TRUE_VALUES = {'true', '1', 'yes', 'on'}
FALSE_VALUES = {'false', '0', 'no', 'off'}


def parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in TRUE_VALUES:
        return True
    if text in FALSE_VALUES:
        return False
    raise ValueError(f"'{value}' is not a boolean")


def parse_list(item: Callable) -> Callable:
    def parse(value) -> list:
        if isinstance(value, (list, tuple)):
            return [item(v) for v in value]
        parts = [p.strip() for p in str(value).split(',')]
        return [item(p) for p in parts if p]
    return parse


def _check_range(lo=None, hi=None, lo_open=False):
    def check(value):
        values = value if isinstance(value, list) else [value]
        for v in values:
            if lo is not None and (v < lo or (lo_open and v == lo)):
                return f"must be {'>' if lo_open else '>='} {lo}"
            if hi is not None and v > hi:
                return f"must be <= {hi}"
        return None
    return check


def _check_choice(choices):
    def check(value):
        values = value if isinstance(value, list) else [value]
        bad = [v for v in values if v not in choices]
        return f"must be one of {', '.join(choices)}" if bad else None
    return check


def _check_nonempty(value):
    return "must not be empty" if not value else None


# key -> (parser, checks)
SCHEMA: Dict[str, Tuple[Callable, Tuple[Callable, ...]]] = {
    'seed': (int, (_check_range(0),)),
    'n_classes': (int, (_check_range(1),)),
    'n_attributes': (int, (_check_range(1),)),
    'd_features': (int, (_check_range(2),)),
    'grid_cols': (int, (_check_range(1),)),
    'grid_rows': (int, (_check_range(1),)),
    'cell_side': (float, (_check_range(0.0, lo_open=True),)),
    'cell_stride': (float, (_check_range(0.0, lo_open=True),)),
    'min_instances': (int, (_check_range(1),)),
    'max_instances': (int, (_check_range(1),)),
    'n_train': (int, (_check_range(0),)),
    'n_val': (int, (_check_range(0),)),
    'min_hints': (int, (_check_range(1),)),
    'max_hints': (int, (_check_range(1),)),
    'noise': (float, (_check_range(0.0),)),
    'feature_jitter': (float, (_check_range(0.0),)),
    'shared_multiset_fraction': (float, (_check_range(0.0, 1.0),)),
    'disjoint_classes': (parse_bool, ()),
    'dim': (int, (_check_range(4),)),
    'fine_dim': (int, (_check_range(1),)),
    'geometry_mode': (str, (_check_choice(GEOMETRY_MODES),)),
    'symplectic_variant': (str, (_check_choice(SYMPLECTIC_VARIANTS),)),
    'chebyshev_order': (int, (_check_range(1),)),
    'gamma': (float, (_check_range(0.0, lo_open=True),)),
    'alpha_res': (float, (_check_range(0.0),)),
    'dt_init': (float, (_check_range(0.0, lo_open=True),)),
    'tau_init': (float, (_check_range(0.0),)),
    'use_rie': (parse_bool, ()),
    'use_isre': (parse_bool, ()),
    'use_smt': (parse_bool, ()),
    'branches': (parse_list(str), (_check_nonempty, _check_choice(BRANCHES))),
    'coarse_steps': (int, (_check_range(0),)),
    'fine_steps': (int, (_check_range(0),)),
    'batch_size': (int, (_check_range(1),)),
    'coarse_lr': (float, (_check_range(0.0),)),
    'fine_lr': (float, (_check_range(0.0),)),
    'log_every': (int, (_check_range(0),)),
    'k_list': (parse_list(int), (_check_nonempty, _check_range(1))),
    'epsilon_list': (parse_list(float), (_check_range(0.0),)),
    'eval_split': (str, (_check_choice(('train', 'val')),)),
    'eval_workers': (int, (_check_range(1),)),
    'grad_tolerance': (float, (_check_range(0.0, lo_open=True),)),
    'verify_seeds': (int, (_check_range(1),)),
    'dataset_path': (str, (_check_nonempty,)),
    'checkpoint_path': (str, (_check_nonempty,)),
    'loss_csv_path': (str, (_check_nonempty,)),
    'metrics_path': (str, (_check_nonempty,)),
    'table_path': (str, (_check_nonempty,)),
}

PATH_KEYS = ('dataset_path', 'checkpoint_path', 'loss_csv_path', 'metrics_path', 'table_path')


def validate_value(key: str, raw) -> Any:
    """
    Parse and check one setting.

    Raises:
        ValidationError: code 'unknown_key', 'invalid_value', 'invalid_choice'
            or 'out_of_range'
    """
    if key not in SCHEMA:
        raise ValidationError(f"Unknown config key '{key}'", code='unknown_key')
    parser, checks = SCHEMA[key]
    if raw is None:
        raise ValidationError(f"'{key}' has no value", code='invalid_value')
    try:
        value = parser(raw.strip() if isinstance(raw, str) else raw)
    except (TypeError, ValueError):
        raise ValidationError(f"'{key}': cannot parse '{raw}'", code='invalid_value')

    for check in checks:
        problem = check(value)
        if problem:
            code = 'invalid_choice' if 'one of' in problem else 'out_of_range'
            raise ValidationError(f"'{key}' {problem} (got {raw})", code=code)
    return value


def parse_overrides(pairs: Optional[List[str]]) -> Dict[str, str]:
    """['k=v', ...] from repeated --set flags."""
    overrides = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise ValidationError(f"Override '{pair}' must look like key=value", code='invalid_override')
        key, value = pair.split('=', 1)
        overrides[key.strip()] = value.strip()
    return overrides


class RunConfig:
    """Validated settings with attribute access."""

    def __init__(self, values: Dict[str, Any], overrides: Dict[str, str] = None, source: str = ''):
        self._values = values
        self.overrides = dict(overrides or {})
        self.source = source

    def __getattr__(self, key):
        try:
            return self.__dict__['_values'][key]
        except KeyError:
            raise AttributeError(key)

    def to_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def path(self, key: str) -> Path:
        p = Path(self._values[key])
        return p if p.is_absolute() else Path(settings.SYMPLOC_OUTPUT_DIR) / p

    def dataset_config(self) -> DatasetConfig:
        v = self._values
        return DatasetConfig(
            n_classes=v['n_classes'], n_attributes=v['n_attributes'], d_features=v['d_features'],
            grid_cols=v['grid_cols'], grid_rows=v['grid_rows'],
            cell_side=v['cell_side'], cell_stride=v['cell_stride'],
            min_instances=v['min_instances'], max_instances=v['max_instances'],
            n_train=v['n_train'], n_val=v['n_val'], min_hints=v['min_hints'], max_hints=v['max_hints'],
            noise=v['noise'], feature_jitter=v['feature_jitter'],
            shared_multiset_fraction=v['shared_multiset_fraction'],
            disjoint_classes=v['disjoint_classes'], seed=v['seed'],
        )

    def model_config(self, d_features: int = None, d_hints: int = None) -> ModelConfig:
        v = self._values
        d_features = v['d_features'] if d_features is None else d_features
        return ModelConfig(
            dim=v['dim'], d_features=d_features,
            d_hints=d_features + 8 if d_hints is None else d_hints,
            fine_dim=v['fine_dim'], geometry_mode=v['geometry_mode'],
            symplectic_variant=v['symplectic_variant'], chebyshev_order=v['chebyshev_order'],
            gamma=v['gamma'], alpha_res=v['alpha_res'], dt_init=v['dt_init'],
            tau_init=v['tau_init'] or None,
            use_rie=v['use_rie'], use_isre=v['use_isre'], use_smt=v['use_smt'],
            branches=tuple(v['branches']), seed=v['seed'],
        )

    def train_config(self) -> TrainConfig:
        v = self._values
        return TrainConfig(
            coarse_steps=v['coarse_steps'], fine_steps=v['fine_steps'], batch_size=v['batch_size'],
            coarse_lr=v['coarse_lr'], fine_lr=v['fine_lr'], seed=v['seed'], log_every=v['log_every'],
        )


def build_run_config(file_values: Dict[str, Any] = None, overrides: Dict[str, str] = None,
                     source: str = '') -> RunConfig:
    """
    Merge defaults, file values and overrides, validating every key.

    Raises:
        ValidationError: On the first bad key, or with all problems listed
            when several keys fail
    """
    values = {key: validate_value(key, raw) for key, raw in settings.SYMPLOC_DEFAULTS.items()}
    errors = []
    for layer in (file_values or {}, overrides or {}):
        for key, raw in layer.items():
            try:
                values[key] = validate_value(key, raw)
            except ValidationError as e:
                errors.append(e)

    if values['min_instances'] > values['max_instances']:
        errors.append(ValidationError("min_instances exceeds max_instances", code='out_of_range'))
    if values['min_hints'] > values['max_hints']:
        errors.append(ValidationError("min_hints exceeds max_hints", code='out_of_range'))
    if values['dim'] % 4:
        errors.append(ValidationError("'dim' must be a multiple of 4", code='out_of_range'))
    if values['d_features'] % 2:
        errors.append(ValidationError("'d_features' must be even", code='out_of_range'))

    if len(errors) == 1:
        raise errors[0]
    if errors:
        raise ValidationError(
            "Invalid run config: " + "; ".join(e.message for e in errors),
            code='invalid_config'
        )
    return RunConfig(values, overrides, source)


def load_run_config(path=None, overrides: Dict[str, str] = None) -> RunConfig:
    """
    Read a key=value file (optional) and build the RunConfig.

    Raises:
        ValidationError: code 'missing_config' if the file does not exist
    """
    file_values = {}
    source = ''
    if path:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"Config file {path} does not exist", code='missing_config')
        file_values = dict(dotenv_values(path))
        source = str(path)
    return build_run_config(file_values, overrides, source)
