"""
Django settings for the SympLoc toy localization project.
"""

import os
from pathlib import Path
from dotenv import load_dotenv
import dj_database_url

# Load environment variables from .env file
load_dotenv()

BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.getenv('DJANGO_SECRET_KEY', 'django-insecure-dev-key-change-in-production')

DEBUG = os.getenv('DEBUG', 'True').lower() == 'true'

ALLOWED_HOSTS = ['localhost', '127.0.0.1']

# Application definition
INSTALLED_APPS = [
    'django.contrib.contenttypes',
    # Local apps
    'symploc',
]

# Database
# DATABASE_URL selects the run-record store; SQLite locally
DATABASE_URL = os.getenv('DATABASE_URL')
if DATABASE_URL:
    DATABASES = {
        'default': dj_database_url.parse(DATABASE_URL)
    }
else:
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.sqlite3',
            'NAME': BASE_DIR / 'db.sqlite3',
        }
    }

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = True
USE_TZ = True

# Default primary key field type
DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Run configuration
SYMPLOC_OUTPUT_DIR = Path(os.getenv('SYMPLOC_OUTPUT_DIR', BASE_DIR / 'runs'))
SYMPLOC_RECORD_RUNS = os.getenv('SYMPLOC_RECORD_RUNS', 'False').lower() == 'true'

# Defaults for every run-config key; a config file and --set overrides win over these
SYMPLOC_DEFAULTS = {
    # dataset
    'seed': int(os.getenv('SYMPLOC_SEED', '42')),
    'n_classes': 24,
    'n_attributes': 8,
    'd_features': 16,
    'grid_cols': 8,
    'grid_rows': 8,
    'cell_side': 30.0,
    'cell_stride': 20.0,
    'min_instances': 3,
    'max_instances': 8,
    'n_train': 512,
    'n_val': 128,
    'min_hints': 3,
    'max_hints': 6,
    'noise': 0.05,
    'feature_jitter': 0.05,
    'shared_multiset_fraction': 0.25,
    'disjoint_classes': False,
    # model
    'dim': 32,
    'fine_dim': 32,
    'geometry_mode': 'default',
    'symplectic_variant': 'literal',
    'chebyshev_order': 4,
    'gamma': 0.07,
    'alpha_res': 0.1,
    'dt_init': 0.1,
    'tau_init': 0.0,  # 0 means "use dim"
    'use_rie': True,
    'use_isre': True,
    'use_smt': True,
    'branches': ['instance', 'relation', 'global'],
    # training
    'coarse_steps': 2000,
    'fine_steps': 500,
    'batch_size': 8,
    'coarse_lr': 5e-4,
    'fine_lr': 3e-4,
    'log_every': 50,
    # evaluation
    'k_list': [1, 3, 5],
    'epsilon_list': [5.0, 10.0, 15.0],
    'eval_split': 'val',
    'eval_workers': int(os.getenv('SYMPLOC_EVAL_WORKERS', '1')),
    # grad-check / verify
    'grad_tolerance': 1e-4,
    'verify_seeds': 20,
    # artifacts (relative paths resolve against SYMPLOC_OUTPUT_DIR)
    'dataset_path': 'dataset.jsonl',
    'checkpoint_path': 'model.ckpt',
    'loss_csv_path': 'loss.csv',
    'metrics_path': 'metrics.json',
    'table_path': 'metrics.txt',
}

# Logging Configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'symploc': {
            'handlers': ['console'],
            'level': os.getenv('SYMPLOC_LOG_LEVEL', 'INFO'),
        },
    },
}
