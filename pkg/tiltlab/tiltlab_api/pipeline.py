"""End to end runs: offline labels, amortization, anchored training, and the studies built on them."""

__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import json
import logging
import math
import os

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from tiltlab.amortizer import Amortizer, PartitionAnchor, anchor_rmse, fit, write_checkpoint
from tiltlab.definitions.definitions import (
    Aggregator,
    AmortizerKind,
    AnchorSource,
    Objective,
    ReferenceKind,
    SweepAxis,
)
from tiltlab.errors import AmortizerError, StageError, TiltlabError
from tiltlab.is_estimator import (
    LABEL_COLUMNS,
    STUDY_AGGREGATE_COLUMNS,
    STUDY_COLUMNS,
    ISLabel,
    draw_label,
    replicate_estimates,
    stage1_samples,
    variance_bias_study,
)
from tiltlab.logger import profiling
from tiltlab.metrics import DIVERSITY_COLUMNS, diversity_report
from tiltlab.oracle import ORACLE_COLUMNS, exact_kl, exact_weight_stats, oracle_row
from tiltlab.policy import TabularPolicy, read_policy, tilt_policy, trajectory_probs, write_policy
from tiltlab.rl_trainers import TRAIN_COLUMNS, TrainingEnv, TrainRun, run_training
from tiltlab.streams import derive_seed, stream
from tiltlab.tiltlab_api.config import RunConfig, TiltlabConfigError
from tiltlab.tools import atomic_write_text, csv_text, sha256_bytes, sha256_file, version
from tiltlab.trajectory_env import correct_mask, enumeration, format_trajectory

LOGGER = logging.getLogger('Tiltlab')

MANIFEST = 'manifest.json'
# Per-trajectory probabilities are written in the summary up to this space size
FINAL_PROBS_LIMIT = 256


def _clean(value):
    """ JSON friendly copy, non finite floats become null. """
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def json_text(data) -> str:
    return json.dumps(_clean(data), indent=2, sort_keys=True, allow_nan=False) + '\n'


class Artifacts:

    """ Files of one output directory, with their hashes and the status of every stage. """

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.files = {}
        self.stages = {}

    def path(self, name: str) -> Path:
        return self.directory.joinpath(name)

    def write_text(self, name: str, content: str):
        atomic_write_text(self.path(name), content)
        self.files[name] = sha256_bytes(content.encode('utf8'))

    def write_csv(self, name: str, rows: Sequence[Dict], columns: List[str]):
        self.write_text(name, csv_text(rows, columns))

    def write_json(self, name: str, data):
        self.write_text(name, json_text(data))

    def register(self, name: str):
        """ A file written by another writer. """
        self.files[name] = sha256_file(self.path(name))

    def write_manifest(self, config: RunConfig, command: str, error: Optional[str] = None) -> dict:
        complete = error is None and all(status != 'failed' for status in self.stages.values())
        manifest = {
            'tool': 'tiltlab',
            'version': version(),
            'command': command,
            'seed': config.seed,
            'config_sha256': sha256_bytes(json_text(config.echo).encode('utf8')),
            'complete': complete,
            'stages': dict(self.stages),
            'files': dict(sorted(self.files.items())),
        }
        if error is not None:
            manifest['error'] = error
        atomic_write_text(self.path(MANIFEST), json_text(manifest))
        return manifest


def build_reference(config: RunConfig) -> TabularPolicy:
    kind = ReferenceKind.find(config.policies['reference'])
    if kind == ReferenceKind.Uniform:
        return TabularPolicy.uniform(config.space, name='reference')
    return TabularPolicy.seeded(
        config.space, config.prompts, derive_seed(config.seed, 'reference'), config.policies['reference_scale'],
        name='reference')


def build_proposal(config: RunConfig, reference: TabularPolicy, strength: Optional[float] = None) -> TabularPolicy:
    """ The reference tilted toward the correct set, the reference itself at strength 0. """
    strength = config.policies['proposal_strength'] if strength is None else strength
    if strength == 0:
        return reference
    tables = {q.id: tilt_policy(reference, q, config.spec_of(q), strength).logits(q) for q in config.prompts}
    return reference.with_tables(tables, name='proposal')


def build_target(config: RunConfig, reference: TabularPolicy, beta: Optional[float] = None) -> TabularPolicy:
    """ The exact tilted target of every prompt, as a policy. """
    beta = config.beta if beta is None else beta
    tables = {
        q.id: tilt_policy(reference, q, config.spec_of(q), beta * q.affine_a).logits(q) for q in config.prompts
    }
    return reference.with_tables(tables, name='target')


def training_env(config: RunConfig, reference: TabularPolicy) -> TrainingEnv:
    return TrainingEnv(space=config.space, prompts=config.prompts, specs=config.specs, reference=reference)


def offline_labels(
        config: RunConfig, reference: TabularPolicy, proposal: TabularPolicy) -> List[ISLabel]:
    aggregator = Aggregator.find(config.stage1['aggregator'])
    return [
        draw_label(
            reference, proposal, q, config.spec_of(q), config.beta, config.stage1['samples'], aggregator,
            config.seed, plug_in=config.stage1['plug_in'], eps_floor=config.stage3['eps_floor'])
        for q in config.prompts
    ]


def correct_datasets(config: RunConfig, proposal: TabularPolicy) -> Dict[str, list]:
    """ Reward-1 subset of the offline samples of every prompt. """
    trajectories = enumeration(config.space).trajectories
    datasets = {}
    for q in config.prompts:
        mask = correct_mask(config.spec_of(q), q, config.space)
        indices = stage1_samples(proposal, q, config.stage1['samples'], config.seed)
        datasets[q.id] = [trajectories[i] for i in indices if mask[i]]
    return datasets


def fit_amortizer(config: RunConfig, labels: Sequence[ISLabel]) -> Amortizer:
    features = {q.id: q.features for q in config.prompts}
    return fit(
        [(features[label.prompt_id], label.log_Z_hat) for label in labels],
        kind=AmortizerKind.find(config.stage2['kind']),
        ridge_lambda=config.stage2['ridge_lambda'],
        split_seed=config.stage2['split_seed'],
        val_fraction=config.stage2['val_fraction'],
        epochs=config.stage2['epochs'],
        learning_rate=config.stage2['learning_rate'],
        hidden_width=config.stage2['hidden_width'],
    )


@dataclass
class PipelineResult:
    directory: Path
    manifest: dict
    summary: dict
    run: TrainRun
    reference: TabularPolicy
    proposal: TabularPolicy
    exact_log_z: Dict[str, float]
    labels: List[ISLabel]
    amortizer: Optional[Amortizer]


def _final_probs(config: RunConfig, policy: TabularPolicy) -> Optional[dict]:
    trajectories = enumeration(config.space).trajectories
    if len(trajectories) > FINAL_PROBS_LIMIT:
        return None
    return {
        q.id: {format_trajectory(o, config.space): float(p) for o, p in zip(trajectories, trajectory_probs(policy, q))}
        for q in config.prompts
    }


@profiling
def run_pipeline(config: RunConfig, out_dir: Union[str, Path, None] = None) -> PipelineResult:
    """ Oracle dump, offline labels, amortizer, anchored training and metrics, in one directory.

    A failing stage is recorded in the manifest, which is then flagged incomplete.
    """
    artifacts = Artifacts(out_dir if out_dir is not None else config.output)
    stage = 'setup'
    try:
        reference = build_reference(config)
        proposal = build_proposal(config, reference)

        stage = 'oracle'
        oracle_rows = [oracle_row(reference, proposal, q, config.spec_of(q), config.beta) for q in config.prompts]
        exact_log_z = {row['prompt_id']: row['log_Z'] for row in oracle_rows}
        artifacts.write_csv('oracle.csv', oracle_rows, ORACLE_COLUMNS)
        artifacts.stages[stage] = 'done'

        stage = 'stage1'
        labels = offline_labels(config, reference, proposal)
        label_rows = []
        for label in labels:
            row = label.as_row()
            row['exact_log_Z'] = exact_log_z[label.prompt_id]
            label_rows.append(row)
        artifacts.write_csv('labels.csv', label_rows, LABEL_COLUMNS)
        artifacts.stages[stage] = 'done'

        stage = 'stage2'
        anchor_source = AnchorSource.find(config.stage3['anchor'])
        amortizer = None
        try:
            amortizer = fit_amortizer(config, labels)
        except AmortizerError as e:
            if anchor_source == AnchorSource.Amortizer:
                raise
            LOGGER.warning('No amortizer fitted : {}'.format(e))
            artifacts.stages[stage] = 'skipped'
        if amortizer is not None:
            write_checkpoint(amortizer, artifacts.path('amortizer.ckpt'))
            artifacts.register('amortizer.ckpt')
            artifacts.stages[stage] = 'done'

        stage = 'stage3'
        cfg = config.train_config()
        env = training_env(config, reference)
        anchor = amortizer if anchor_source == AnchorSource.Amortizer else PartitionAnchor.exact(exact_log_z)
        datasets = correct_datasets(config, proposal) if cfg.objective == Objective.SupervisedCorrect else None
        run = run_training(cfg, env, anchor=anchor, datasets=datasets)
        artifacts.write_csv('train.csv', run.rows(), TRAIN_COLUMNS)
        write_policy(run.final_policy, config.prompts, artifacts.path('policy.txt'), config.seed)
        artifacts.register('policy.txt')
        write_policy(run.best_policy, config.prompts, artifacts.path('policy_best.txt'), config.seed)
        artifacts.register('policy_best.txt')
        artifacts.stages[stage] = 'done'

        stage = 'metrics'
        target = build_target(config, reference)
        metric_rows = []
        for checkpoint, policy in (('final', run.final_policy), ('best', run.best_policy), ('target', target)):
            for q in config.prompts:
                row = {'checkpoint': checkpoint}
                row.update(diversity_report(policy, q, config.spec_of(q), cfg.k).as_row())
                metric_rows.append(row)
        artifacts.write_csv('metrics.csv', metric_rows, ['checkpoint'] + DIVERSITY_COLUMNS)

        summary = {
            'config': config.echo,
            'train': cfg.echo(),
            'initial': run.initial.as_row(),
            'final': run.final.as_row(),
            'best_step': run.best_step,
            'best': (run.records[run.best_step - 1] if run.best_step else run.initial).as_row(),
            'exact_log_Z': exact_log_z,
            'log_z_phi': run.partition,
            'final_probs': _final_probs(config, run.final_policy),
            'amortizer': None if amortizer is None else {
                'kind': amortizer.kind.value,
                'train_mse': amortizer.train_mse,
                'val_mse': amortizer.val_mse,
                'anchor_rmse': anchor_rmse(amortizer, config.prompts, exact_log_z),
                'label_manifest': amortizer.label_manifest,
            },
        }
        artifacts.write_json('summary.json', summary)
        artifacts.stages[stage] = 'done'
    except TiltlabError as e:
        artifacts.stages[stage] = 'failed'
        artifacts.write_manifest(config, 'pipeline', error=str(e))
        LOGGER.error('Stage {} failed : {}'.format(stage, e))
        if isinstance(e, (StageError, TiltlabConfigError)):
            raise
        raise StageError(stage, str(e)) from e
    except Exception as e:
        artifacts.stages[stage] = 'failed'
        artifacts.write_manifest(config, 'pipeline', error='{}: {}'.format(type(e).__name__, e))
        LOGGER.critical('Stage {} crashed : {}'.format(stage, e))
        raise

    manifest = artifacts.write_manifest(config, 'pipeline')
    return PipelineResult(
        directory=artifacts.directory,
        manifest=manifest,
        summary=summary,
        run=run,
        reference=reference,
        proposal=proposal,
        exact_log_z=exact_log_z,
        labels=labels,
        amortizer=amortizer,
    )


SWEEP_COLUMNS = [
    'axis', 'value', 'prompt_id', 'status', 'exact_log_Z', 'exact_cv2', 'label_var', 'final_kl_fwd', 'final_kl_rev',
    'distinct_correct_at_k', 'error',
]

SWEEP_SECTIONS = {
    SweepAxis.Beta: 'beta',
    SweepAxis.Samples: 'samples',
    SweepAxis.ProposalStrength: 'proposal_strength',
    SweepAxis.Objective: 'objective',
}


def cell_config(config: RunConfig, axis: SweepAxis, value) -> RunConfig:
    """ The configuration of one sweep cell. """
    if axis == SweepAxis.Beta:
        return config.with_overrides(beta=value)
    if axis == SweepAxis.Samples:
        return config.with_overrides(stage1={'samples': value})
    if axis == SweepAxis.ProposalStrength:
        return config.with_overrides(policies={'proposal_strength': value})
    return config.with_overrides(stage3={'objective': value})


def _sweep_cell(task) -> List[Dict]:
    """ Run one cell, failures become rows with a failed status. """
    config, axis, value, directory = task
    base = {'axis': axis.value, 'value': value}
    try:
        cell = cell_config(config, axis, value)
        result = run_pipeline(cell, directory)
        rows = []
        for q in cell.prompts:
            spec = cell.spec_of(q)
            stats = exact_weight_stats(result.reference, result.proposal, q, spec, cell.beta)
            estimates = replicate_estimates(
                result.reference, result.proposal, q, spec, cell.beta, cell.stage1['samples'],
                cell.sweep['replications'], stream(cell.seed, q.id, 'sweep-replicates'),
                Aggregator.find(cell.stage1['aggregator']))
            target = build_target(cell, result.reference).logits(q)
            target_probs = trajectory_probs(result.reference.with_table(q, target), q)
            probs = trajectory_probs(result.run.final_policy, q)
            row = dict(base)
            row.update({
                'prompt_id': q.id,
                'status': 'done',
                'exact_log_Z': stats.log_Z,
                'exact_cv2': stats.cv2,
                'label_var': float(np.var(estimates, ddof=1)),
                'final_kl_fwd': exact_kl(probs, target_probs),
                'final_kl_rev': exact_kl(target_probs, probs),
                'distinct_correct_at_k': diversity_report(
                    result.run.final_policy, q, spec, cell.stage3['k']).distinct_correct_expected,
                'error': '',
            })
            rows.append(row)
        return rows
    except TiltlabError as e:
        LOGGER.warning('Sweep cell {}={} failed : {}'.format(axis.value, value, e))
        row = dict(base)
        row.update({'prompt_id': '', 'status': 'failed', 'error': str(e)})
        return [row]


@profiling
def sweep(
        config: RunConfig, axis: SweepAxis, out_dir: Union[str, Path, None] = None,
        workers: Optional[int] = None) -> List[Dict]:
    """ One pipeline per axis value, cells in parallel, rows merged in axis order. """
    values = config.sweep[SWEEP_SECTIONS[axis]]
    if not values:
        raise TiltlabConfigError('sweep.{} lists no value'.format(SWEEP_SECTIONS[axis]))
    artifacts = Artifacts(out_dir if out_dir is not None else config.output)
    tasks = [
        (config, axis, value, str(artifacts.path('{}-{:02d}'.format(SWEEP_SECTIONS[axis], i))))
        for i, value in enumerate(values)
    ]
    workers = workers or os.cpu_count() or 1
    if workers == 1 or len(tasks) == 1:
        results = [_sweep_cell(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as executor:
            results = list(executor.map(_sweep_cell, tasks))

    rows = [row for cell_rows in results for row in cell_rows]
    name = 'sweep-{}.csv'.format(SWEEP_SECTIONS[axis])
    artifacts.write_csv(name, rows, SWEEP_COLUMNS)
    failed = sum(1 for row in rows if row['status'] == 'failed')
    artifacts.stages['sweep'] = 'failed' if failed else 'done'
    artifacts.write_manifest(config, 'sweep')
    LOGGER.info('Sweep over {} done, {} failed cell(s)'.format(axis.value, failed))
    return rows


@profiling
def nstudy(config: RunConfig, out_dir: Union[str, Path, None] = None):
    """ Variance and bias of subsampled labels, written per prompt and aggregated. """
    artifacts = Artifacts(out_dir if out_dir is not None else config.output)
    reference = build_reference(config)
    proposal = build_proposal(config, reference)
    result = variance_bias_study(
        reference, proposal, config.prompts, config.specs, config.beta, config.nstudy['pool_size'],
        config.nstudy['subsample_sizes'], config.nstudy['replications'], config.seed)
    artifacts.write_csv('nstudy.csv', result.rows, STUDY_COLUMNS)
    artifacts.write_csv('nstudy_aggregate.csv', result.aggregates, STUDY_AGGREGATE_COLUMNS)
    artifacts.stages['nstudy'] = 'done'
    artifacts.write_manifest(config, 'nstudy')
    return result


def oracle_dump(config: RunConfig, out_dir: Union[str, Path, None] = None) -> List[Dict]:
    artifacts = Artifacts(out_dir if out_dir is not None else config.output)
    reference = build_reference(config)
    proposal = build_proposal(config, reference)
    rows = [oracle_row(reference, proposal, q, config.spec_of(q), config.beta) for q in config.prompts]
    artifacts.write_csv('oracle.csv', rows, ORACLE_COLUMNS)
    artifacts.stages['oracle'] = 'done'
    artifacts.write_manifest(config, 'oracle-dump')
    return rows


def recompute_metrics(
        config: RunConfig, policy_path: Union[str, Path], out_dir: Union[str, Path, None] = None) -> List[Dict]:
    """ Diversity metrics of a policy file written by a previous run. """
    if not Path(policy_path).exists():
        raise TiltlabConfigError('The policy file "{}" does not exist'.format(policy_path))
    policy = read_policy(policy_path)
    space = policy.space
    if (space.alphabet_size, space.max_len, space.stop) != (
            config.space.alphabet_size, config.space.max_len, config.space.stop):
        raise TiltlabConfigError('The policy file does not match the configured space')
    artifacts = Artifacts(out_dir if out_dir is not None else config.output)
    k = config.stage3['k']
    rows = [diversity_report(policy, q, config.spec_of(q), k).as_row() for q in config.prompts]
    artifacts.write_csv('metrics.csv', rows, DIVERSITY_COLUMNS)
    artifacts.stages['metrics'] = 'done'
    artifacts.write_manifest(config, 'metrics')
    return rows
