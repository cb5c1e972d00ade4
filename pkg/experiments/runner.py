"""
Running experiments and writing their artifacts.

``execute`` is free of database access so several runs can share a thread
pool; ``record_run`` stores the TrainingRun row and is called from the
thread that owns the database connection.
"""
import json
import logging
import math
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from django.conf import settings
from django.utils import timezone

from analysis.profiles import grad_norm_summary
from analysis.utils import generate_profile_csv
from blocks.checkpoint import save_params
from training.loop import RunStatus, train
from training.utils import generate_metrics_csv

from .models import TrainingRun

logger = logging.getLogger(__name__)

EXIT_CODES = {
    RunStatus.CONVERGED: 0,
    RunStatus.DIVERGED: 2,
    RunStatus.SPIKE_DETECTED: 3,
}

# Status of a run that raised before producing an outcome.
FAILED = 'failed'


@dataclass
class RunResult:
    experiment: object
    outcome: object
    output_dir: Path
    error: str = ''

    @property
    def failed(self):
        return self.outcome is None

    @property
    def status(self):
        return FAILED if self.failed else self.outcome.status.value

    @property
    def exit_code(self):
        return 1 if self.failed else EXIT_CODES[self.outcome.status]

    def outcome_value(self, name):
        """Field of the outcome, or None for a failed run."""
        return None if self.failed else getattr(self.outcome, name)


def git_describe():
    """``git describe`` of the working tree, or 'unknown' outside a repository."""
    try:
        completed = subprocess.run(
            ['git', 'describe', '--always', '--dirty', '--tags'],
            cwd=settings.BASE_DIR, capture_output=True, text=True, timeout=10, check=False,
        )
    except (OSError, subprocess.SubprocessError):
        return 'unknown'
    return completed.stdout.strip() or 'unknown'


def finite_or_none(value):
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def _write_manifest(output_dir, manifest):
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / 'manifest.json').write_text(json.dumps(manifest, indent=2) + '\n', encoding='utf-8')


def write_artifacts(experiment, outcome, output_dir, started_at, finished_at):
    """
    Write metrics.csv, profiles/step_<n>.csv, checkpoint.bin and
    manifest.json into ``output_dir``. Only the manifest carries timestamps.
    """
    output_dir = Path(output_dir)
    profile_dir = output_dir / 'profiles'
    profile_dir.mkdir(parents=True, exist_ok=True)
    for stale in profile_dir.glob('step_*.csv'):
        stale.unlink()

    (output_dir / 'metrics.csv').write_text(generate_metrics_csv(outcome.metrics), encoding='utf-8', newline='')
    for step, rows in outcome.profiles:
        (profile_dir / f'step_{step:06d}.csv').write_text(generate_profile_csv(rows), encoding='utf-8', newline='')
    save_params(outcome.params, output_dir / 'checkpoint.bin', metadata={
        'name': experiment.name,
        'status': outcome.status.value,
    })

    _write_manifest(output_dir, {
        'name': experiment.name,
        'config': experiment.to_dict(),
        'status': outcome.status.value,
        'final_loss': finite_or_none(outcome.final_loss),
        'initial_loss': finite_or_none(outcome.initial_loss),
        'eval_acc': outcome.eval_acc,
        'eval_loss': outcome.eval_loss,
        'diverged_step': outcome.diverged_step,
        'spike_steps': outcome.spike_steps,
        'message': outcome.message,
        'grad_norm_summary': grad_norm_summary(outcome.metrics, experiment.train.warmup_steps),
        'git_describe': git_describe(),
        'started_at': started_at.isoformat(),
        'finished_at': finished_at.isoformat(),
    })


def execute(experiment):
    """
    Train one experiment and write its artifacts.

    Returns:
        RunResult
    """
    logger.info("Starting run %s (%s, peak_lr=%g)", experiment.name,
                experiment.model.topology.value, experiment.train.peak_lr)
    started_at = timezone.now()
    outcome = train(experiment.model, experiment.train)
    write_artifacts(experiment, outcome, experiment.output_dir, started_at, timezone.now())
    logger.info("Finished run %s: %s", experiment.name, outcome.status.value)
    return RunResult(experiment=experiment, outcome=outcome, output_dir=Path(experiment.output_dir))


def failed_result(experiment, exc):
    """Write a manifest for a run that raised and return its RunResult."""
    output_dir = Path(experiment.output_dir)
    error = f"{type(exc).__name__}: {exc}"
    _write_manifest(output_dir, {
        'name': experiment.name,
        'config': experiment.to_dict(),
        'status': FAILED,
        'message': error,
        'git_describe': git_describe(),
        'finished_at': timezone.now().isoformat(),
    })
    return RunResult(experiment=experiment, outcome=None, output_dir=output_dir, error=error)


def _collect(future, experiment):
    try:
        return future.result()
    except Exception as exc:
        logger.error("Run %s failed: %s", experiment.name, exc, exc_info=exc)
        return failed_result(experiment, exc)


def record_run(result):
    """Store a finished or failed run as a TrainingRun row."""
    experiment = result.experiment
    return TrainingRun.objects.create(
        name=experiment.name,
        topology=experiment.model.topology.value,
        peak_lr=experiment.train.peak_lr,
        status=result.status,
        final_loss=finite_or_none(result.outcome_value('final_loss')),
        eval_acc=result.outcome_value('eval_acc'),
        eval_loss=finite_or_none(result.outcome_value('eval_loss')),
        diverged_step=result.outcome_value('diverged_step'),
        output_dir=str(result.output_dir),
        config=experiment.to_dict(),
    )


def execute_many(experiments, jobs=1):
    """
    Run several experiments, up to ``jobs`` at a time, and record them in
    input order once all have finished. A run that raises is recorded as
    failed; the others are unaffected.
    """
    experiments = list(experiments)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        futures = [pool.submit(execute, experiment) for experiment in experiments]
        results = [_collect(future, experiment) for future, experiment in zip(futures, experiments)]
    for result in results:
        record_run(result)
    return results
