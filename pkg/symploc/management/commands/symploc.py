"""
SympLoc pipeline command.

Usage:
    python manage.py symploc gen-data   [--config run.env] [--set key=value ...]
    python manage.py symploc train      [--config run.env] [--set key=value ...]
    python manage.py symploc eval       [--config run.env] [--set key=value ...]
    python manage.py symploc grad-check [--config run.env] [--set key=value ...]
    python manage.py symploc verify     [--config run.env] [--set key=value ...]

Exit codes: 0 success, 1 verification or gradient-check failure,
2 invalid config or input files, 3 non-finite training.
"""

import logging

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from symploc.checkpoint import restore_checkpoint, save_checkpoint
from symploc.dataset import generate_synthetic_dataset, read_dataset, write_dataset
from symploc.evaluation import evaluate_baselines, evaluate_model, format_metrics_table
from symploc.exceptions import CheckpointFormatError, DatasetFormatError, TrainingDivergedError
from symploc.model import SympLocModel
from symploc.reports import write_divergence_dump, write_loss_csv, write_metrics_json, write_metrics_table
from symploc.runs import record_run
from symploc.training import train
from symploc.validators import load_run_config, parse_overrides
from symploc.verification import run_gradient_checks, run_verification

logger = logging.getLogger('symploc')

SUBCOMMANDS = {
    'gen-data': "Generate the synthetic gallery and queries",
    'train': "Train the coarse branches, then the fine regressor",
    'eval': "Evaluate retrieval and localization recall",
    'grad-check': "Compare autodiff gradients with finite differences",
    'verify': "Run the geometric and numerical invariant suites",
}

EXIT_FAILED_CHECK = 1
EXIT_INVALID_INPUT = 2
EXIT_DIVERGED = 3


class Command(BaseCommand):
    help = "Synthetic text-to-point-cloud localization: data, training, evaluation and checks"

    def add_arguments(self, parser):
        subparsers = parser.add_subparsers(dest='subcommand', required=True)
        for name, description in SUBCOMMANDS.items():
            sub = subparsers.add_parser(name, help=description)
            sub.add_argument('--config', default=None, help="key=value run config file")
            sub.add_argument(
                '--set', action='append', dest='overrides', default=[], metavar='KEY=VALUE',
                help="Override one config key; may be repeated",
            )

    def handle(self, *args, **options):
        subcommand = options['subcommand']
        try:
            config = load_run_config(options.get('config'), parse_overrides(options.get('overrides')))
        except ValidationError as e:
            raise CommandError(f"Invalid config: {'; '.join(e.messages)}", returncode=EXIT_INVALID_INPUT)

        handler = getattr(self, f"handle_{subcommand.replace('-', '_')}")
        logger.info(f"Running {subcommand} (overrides: {config.overrides or 'none'})")
        with record_run(subcommand, config) as run:
            try:
                handler(config, run)
            except ValidationError as e:
                raise CommandError(f"Invalid config: {'; '.join(e.messages)}", returncode=EXIT_INVALID_INPUT)
            except (DatasetFormatError, CheckpointFormatError, FileNotFoundError) as e:
                logger.error(f"{subcommand} failed on its inputs: {e}")
                raise CommandError(str(e), returncode=EXIT_INVALID_INPUT)
            except TrainingDivergedError as e:
                raise CommandError(f"Training diverged: {e}", returncode=EXIT_DIVERGED)

    # ------------------------------------------------------------------ gen-data

    def handle_gen_data(self, config, run):
        dataset = generate_synthetic_dataset(config.dataset_config())
        path = write_dataset(dataset, config.path('dataset_path'))
        run.artifacts.append(str(path))
        run.metrics = {'n_submaps': len(dataset.gallery), 'n_train': len(dataset.train), 'n_val': len(dataset.val)}
        self.stdout.write(self.style.SUCCESS(
            f"Wrote {len(dataset.gallery)} submaps, {len(dataset.train)} train and "
            f"{len(dataset.val)} val queries to {path}"
        ))

    # ------------------------------------------------------------------ train

    def _build_model(self, config, dataset) -> SympLocModel:
        return SympLocModel(config.model_config(d_features=dataset.config.d_features,
                                                d_hints=dataset.config.d_hints))

    def handle_train(self, config, run):
        dataset = read_dataset(config.path('dataset_path'))
        model = self._build_model(config, dataset)
        try:
            result = train(dataset, model, config.train_config())
        except TrainingDivergedError as e:
            dump = write_divergence_dump(e.batch_dump, config.path('checkpoint_path').with_name('diverged_batch.json'))
            run.artifacts.append(str(dump))
            raise

        checkpoint = save_checkpoint(model.params, config.path('checkpoint_path'))
        loss_csv = write_loss_csv(result.loss_curve, config.path('loss_csv_path'))
        run.artifacts.extend([str(checkpoint), str(loss_csv)])

        final = {phase: result.losses(phase)[-1] for phase in ('coarse', 'fine') if result.losses(phase)}
        run.metrics = {'final_loss': final, 'steps': len(result.loss_curve), 'elapsed_ms': result.elapsed_ms}
        self.stdout.write(self.style.SUCCESS(
            f"Trained {len(result.loss_curve)} steps in {result.elapsed_ms}ms; "
            f"checkpoint {checkpoint}, loss curve {loss_csv}"
        ))

    # ------------------------------------------------------------------ eval

    def handle_eval(self, config, run):
        dataset = read_dataset(config.path('dataset_path'))
        model = self._build_model(config, dataset)
        restore_checkpoint(model.params, config.path('checkpoint_path'))

        try:
            metrics = evaluate_model(model, dataset, config.k_list, config.epsilon_list,
                                     split=config.eval_split, workers=config.eval_workers)
        except ValueError as e:
            raise CommandError(str(e), returncode=EXIT_INVALID_INPUT)
        metrics['baselines'] = evaluate_baselines(dataset, config.k_list, config.epsilon_list,
                                                  split=config.eval_split, seed=config.seed,
                                                  workers=config.eval_workers)

        metrics_path = write_metrics_json(metrics, config.path('metrics_path'), config.to_dict(), config.overrides)
        table_path = write_metrics_table(metrics, config.path('table_path'))
        run.artifacts.extend([str(metrics_path), str(table_path)])
        run.metrics = metrics
        self.stdout.write(format_metrics_table(metrics))
        self.stdout.write(self.style.SUCCESS(f"Wrote {metrics_path} and {table_path}"))

    # ------------------------------------------------------------------ checks

    def _report(self, kind: str, results, run):
        run.metrics = {'suites': [r.to_dict() for r in results]}
        for r in results:
            line = f"{r.status}  {r.name:<14} max_error={r.max_error:.3e}  tolerance={r.tolerance:.1e}"
            self.stdout.write(self.style.SUCCESS(line) if r.passed else self.style.ERROR(line))
            if not r.passed:
                self.stdout.write(f"      {r.message}")

        failed = [r.name for r in results if not r.passed]
        if failed:
            raise CommandError(f"{kind} failed: {', '.join(failed)}", returncode=EXIT_FAILED_CHECK)
        self.stdout.write(self.style.SUCCESS(f"All {len(results)} {kind} suites passed"))

    def handle_grad_check(self, config, run):
        results = run_gradient_checks(seed=config.seed, tolerance=config.grad_tolerance,
                                      n_seeds=config.verify_seeds)
        self._report('grad-check', results, run)

    def handle_verify(self, config, run):
        self._report('verify', run_verification(seed=config.seed, n_draws=config.verify_seeds), run)
