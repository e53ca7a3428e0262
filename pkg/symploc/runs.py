"""
Bookkeeping for symploc command invocations.

record_run() wraps a subcommand: when SYMPLOC_RECORD_RUNS is on, an
ExperimentRun row is created as 'running' and finalized as 'completed' or
'failed'. When off, the caller still gets an (unsaved) ExperimentRun to fill
in. A database problem while recording is logged and never fails the run.
"""

import logging
import time
from contextlib import contextmanager
from typing import Optional

from django.conf import settings
from django.db import DatabaseError

from .models import ExperimentRun

logger = logging.getLogger('symploc')


def _persist(run: ExperimentRun) -> bool:
    try:
        run.save()
        return True
    except DatabaseError as e:
        logger.warning(f"Could not save {run.subcommand} run record: {e}")
        return False


@contextmanager
def record_run(subcommand: str, config=None, enabled: Optional[bool] = None):
    """
    Yield an ExperimentRun; the caller sets .metrics and appends to .artifacts.

    The exit code of a failure is taken from the exception's `returncode`
    (CommandError carries one), defaulting to 1.
    """
    if enabled is None:
        enabled = settings.SYMPLOC_RECORD_RUNS

    run = ExperimentRun(
        subcommand=subcommand,
        config=config.to_dict() if config is not None else {},
        overrides=dict(config.overrides) if config is not None else {},
        config_source=config.source if config is not None else '',
        artifacts=[],
    )
    if enabled:
        enabled = _persist(run)

    start = time.time()
    try:
        yield run
    except Exception as e:
        run.status = 'failed'
        run.exit_code = getattr(e, 'returncode', 1)
        run.error_message = str(e)
        run.elapsed_ms = int((time.time() - start) * 1000)
        if enabled:
            _persist(run)
        raise

    run.status = 'completed'
    run.exit_code = 0
    run.elapsed_ms = int((time.time() - start) * 1000)
    if enabled:
        _persist(run)
