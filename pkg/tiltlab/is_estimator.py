"""Offline importance-sampled partition labels.

Log-weights are log pi_ref - log p_T + beta r~. They are aggregated into a log-partition label
either in log space (logsumexp minus log N), as a geometric mean (mean of the log-weights), or
through the linear mean of the weights.

Every estimate function accepts a 1-D weight list or a 2-D (replications, N) matrix and reduces
the last axis.
"""

__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import logging

from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from scipy.special import logsumexp

from tiltlab.definitions.definitions import EPS_FLOOR, MIN_REPLICATIONS, Aggregator
from tiltlab.errors import EmptySampleError, StudyError, SupportError
from tiltlab.logger import profiling
from tiltlab.oracle import exact_weight_stats, tilt_log_weights
from tiltlab.policy import TabularPolicy, log_prob_table, sample_indices
from tiltlab.streams import stream, stream_key
from tiltlab.trajectory_env import (
    Prompt,
    RewardSpec,
    Trajectory,
    enumeration,
    format_trajectory,
    group_normalize,
    reward_table,
    trajectory_index,
)

LOGGER = logging.getLogger('Tiltlab')

# Largest x with exp(x) finite in double precision
LOG_MAX_FLOAT = float(np.log(np.finfo(np.float64).max))


@dataclass(frozen=True)
class ISLabel:
    prompt_id: str
    log_Z_hat: float
    aggregator: Aggregator
    N: int
    measured_cv2: float
    ess_fraction: float
    degenerate: bool
    rng_key: str

    def as_row(self) -> Dict:
        return {
            'prompt_id': self.prompt_id,
            'log_Z_hat': self.log_Z_hat,
            'aggregator': self.aggregator.value,
            'N': self.N,
            'measured_cv2': self.measured_cv2,
            'ess_fraction': self.ess_fraction,
            'degenerate': self.degenerate,
            'rng_key': self.rng_key,
        }


LABEL_COLUMNS = [
    'prompt_id', 'log_Z_hat', 'aggregator', 'N', 'measured_cv2', 'ess_fraction', 'degenerate', 'rng_key',
    'exact_log_Z',
]


def _support_check(log_proposal: np.ndarray, indices: np.ndarray, q: Prompt, p_T: TabularPolicy):
    bad = np.flatnonzero(~np.isfinite(log_proposal))
    if bad.size:
        o = enumeration(p_T.space).trajectories[indices[bad[0]]]
        label = format_trajectory(o, p_T.space)
        raise SupportError(
            'Sample {} of prompt "{}" has no proposal mass'.format(label, q.id), trajectory=label)


def log_weights_at(
        pi_ref: TabularPolicy, p_T: TabularPolicy, q: Prompt, spec: RewardSpec, beta: float,
        indices: np.ndarray) -> np.ndarray:
    """ Log-weights of samples given as enumeration indices, any array shape. """
    indices = np.asarray(indices, dtype=np.int64)
    log_proposal = log_prob_table(p_T, q)[indices]
    _support_check(log_proposal.ravel(), indices.ravel(), q, p_T)
    return tilt_log_weights(pi_ref, q, spec, beta)[indices] - log_proposal


def log_weights(
        pi_ref: TabularPolicy, p_T: TabularPolicy, q: Prompt, spec: RewardSpec, beta: float,
        samples: Sequence[Trajectory]) -> np.ndarray:
    """ Per-sample log pi_ref - log p_T + beta r~. """
    indices = np.array([trajectory_index(p_T.space, o) for o in samples], dtype=np.int64)
    return log_weights_at(pi_ref, p_T, q, spec, beta, indices)


def _checked(log_w, N) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=np.float64)
    if log_w.size == 0 or log_w.shape[-1] == 0:
        raise EmptySampleError('No log-weight to aggregate')
    if N is not None and N != log_w.shape[-1]:
        raise ValueError('N = {} does not match the {} log-weights'.format(N, log_w.shape[-1]))
    return log_w


def estimate_lse(log_w, N: int = None):
    """ logsumexp of the log-weights minus log N. All -inf input gives -inf. """
    log_w = _checked(log_w, N)
    with np.errstate(divide='ignore'):
        value = logsumexp(log_w, axis=-1) - np.log(log_w.shape[-1])
    return float(value) if np.ndim(value) == 0 else value


def estimate_gm(log_w, N: int = None):
    """ Mean of the log-weights. Any -inf entry gives -inf. """
    log_w = _checked(log_w, N)
    value = np.mean(log_w, axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def estimate_linear(log_w, N: int = None):
    """ Mean of the weights on the linear scale, computed as exp(LSE + log N) / N.

    Results beyond the double range are returned as inf with a warning.
    """
    log_w = _checked(log_w, N)
    n = log_w.shape[-1]
    with np.errstate(divide='ignore'):
        log_sum = logsumexp(log_w, axis=-1)
    if np.any(log_sum > LOG_MAX_FLOAT):
        LOGGER.warning('Linear scale partition estimate overflows the double range')
    with np.errstate(over='ignore'):
        value = np.exp(log_sum) / n
    return float(value) if np.ndim(value) == 0 else value


def estimate_linear_log(log_w, N: int = None):
    """ Log of the arithmetic mean of the weights, shifted by the largest log-weight.

    Finite whenever one weight is positive. All -inf input gives -inf.
    """
    log_w = _checked(log_w, N)
    shift = np.max(log_w, axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    with np.errstate(divide='ignore'):
        value = np.squeeze(shift, axis=-1) + np.log(np.mean(np.exp(log_w - shift), axis=-1))
    return float(value) if np.ndim(value) == 0 else value


AGGREGATORS = {
    Aggregator.LogSumExp: estimate_lse,
    Aggregator.GeometricMean: estimate_gm,
    Aggregator.LinearLog: estimate_linear_log,
}


def aggregate(log_w, aggregator: Aggregator):
    return AGGREGATORS[aggregator](log_w)


def is_degenerate(log_w) -> bool:
    """ No positive weight, or a -inf entry in the list. """
    log_w = np.asarray(log_w, dtype=np.float64)
    return bool(np.any(np.isneginf(log_w)))


def sample_weight_stats(log_w) -> Tuple[float, float]:
    """ Self-normalized squared coefficient of variation and ESS fraction of a weight list. """
    log_w = np.asarray(log_w, dtype=np.float64)
    if not np.any(np.isfinite(log_w)):
        return float('nan'), 0.0
    normalized = np.exp(log_w - logsumexp(log_w))
    ess = 1.0 / float(np.sum(normalized ** 2))
    n = log_w.size
    return n / ess - 1.0, ess / n


def stage1_labels(q: Prompt, N: int) -> tuple:
    return q.id, 'stage1', N


def stage1_samples(p_T: TabularPolicy, q: Prompt, N: int, seed: int) -> np.ndarray:
    """ Enumeration indices of the offline proposal samples of a prompt. """
    return sample_indices(p_T, q, stream(seed, *stage1_labels(q, N)), N)


def draw_label(
        pi_ref: TabularPolicy, p_T: TabularPolicy, q: Prompt, spec: RewardSpec, beta: float, N: int,
        aggregator: Aggregator, seed: int, plug_in: bool = False, eps_floor: float = EPS_FLOOR) -> ISLabel:
    """ One offline label for one prompt, from N proposal samples.

    With plug_in, the fixed affine reward is replaced by the group normalized reward of the batch.
    """
    labels = stage1_labels(q, N)
    indices = stage1_samples(p_T, q, N, seed)
    if plug_in:
        raw = reward_table(spec, q, p_T.space)[indices]
        advantages = group_normalize(raw, eps_floor)
        log_proposal = log_prob_table(p_T, q)[indices]
        _support_check(log_proposal, indices, q, p_T)
        log_w = log_prob_table(pi_ref, q)[indices] - log_proposal + beta * advantages
    else:
        log_w = log_weights_at(pi_ref, p_T, q, spec, beta, indices)

    cv2, ess_fraction = sample_weight_stats(log_w)
    value = aggregate(log_w, aggregator)
    degenerate = is_degenerate(log_w)
    if degenerate:
        LOGGER.warning('Degenerate importance weights for prompt "{}"'.format(q.id))
    return ISLabel(
        prompt_id=q.id,
        log_Z_hat=value,
        aggregator=aggregator,
        N=N,
        measured_cv2=cv2,
        ess_fraction=ess_fraction,
        degenerate=degenerate,
        rng_key=stream_key(seed, *labels),
    )


def replicate_log_weights(
        pi_ref: TabularPolicy, p_T: TabularPolicy, q: Prompt, spec: RewardSpec, beta: float, N: int,
        replications: int, rng: np.random.Generator) -> np.ndarray:
    """ A (replications, N) matrix of log-weights, fresh proposal samples per replication. """
    indices = sample_indices(p_T, q, rng, N * replications).reshape(replications, N)
    return log_weights_at(pi_ref, p_T, q, spec, beta, indices)


def replicate_estimates(
        pi_ref: TabularPolicy, p_T: TabularPolicy, q: Prompt, spec: RewardSpec, beta: float, N: int,
        replications: int, rng: np.random.Generator, aggregator: Aggregator = Aggregator.LogSumExp) -> np.ndarray:
    """ One log-partition estimate per replication. """
    return aggregate(replicate_log_weights(pi_ref, p_T, q, spec, beta, N, replications, rng), aggregator)


@dataclass(frozen=True)
class StudyResult:
    rows: List[Dict]
    aggregates: List[Dict]


STUDY_COLUMNS = [
    'prompt_id', 'M', 'replication_count', 'var_logZ', 'rel_bias_mean', 'rel_bias_median', 'exact_logZ',
    'exact_cv2', 'jensen_bias',
]

STUDY_AGGREGATE_COLUMNS = [
    'M', 'prompt_count', 'var_logZ_mean', 'var_logZ_std', 'rel_bias_mean', 'rel_bias_std', 'rel_bias_median',
    'jensen_bias_mean', 'predicted_jensen_bias',
]


@profiling
def variance_bias_study(
        pi_ref: TabularPolicy, p_T: TabularPolicy, prompts: Sequence[Prompt],
        spec: Union[RewardSpec, Mapping[str, RewardSpec]], beta: float, pool_size: int,
        subsample_sizes: Sequence[int], replications: int, seed: int) -> StudyResult:
    """ Variance and relative bias of subsampled labels against a large pool, per prompt and size.

    Each replication subsamples M of the pool log-weights without replacement. The relative bias
    is measured against the pool estimate, the Jensen bias against the exact log partition.
    """
    if replications < MIN_REPLICATIONS:
        raise StudyError('At least {} replications are needed, got {}'.format(MIN_REPLICATIONS, replications))
    subsample_sizes = sorted(int(m) for m in subsample_sizes)
    if not subsample_sizes or subsample_sizes[0] < 1:
        raise StudyError('Subsample sizes must be positive, got {}'.format(subsample_sizes))
    if pool_size <= subsample_sizes[-1]:
        raise StudyError(
            'The pool size {} must exceed the largest subsample size {}'.format(pool_size, subsample_sizes[-1]))
    if not prompts:
        raise StudyError('The study needs at least one prompt')

    rows = []
    for q in prompts:
        q_spec = spec if isinstance(spec, RewardSpec) else spec[q.reward_spec_ref]
        stats = exact_weight_stats(pi_ref, p_T, q, q_spec, beta)
        pool = log_weights_at(
            pi_ref, p_T, q, q_spec, beta, sample_indices(p_T, q, stream(seed, q.id, 'pool'), pool_size))
        log_pool = estimate_lse(pool)

        rng = stream(seed, q.id, 'subsample')
        order = np.argsort(rng.random((replications, pool_size)), axis=1)
        for m in subsample_sizes:
            estimates = estimate_lse(pool[order[:, :m]])
            relative = np.abs(np.expm1(estimates - log_pool))
            rows.append({
                'prompt_id': q.id,
                'M': m,
                'replication_count': replications,
                'var_logZ': float(np.var(estimates, ddof=1)),
                'rel_bias_mean': float(np.mean(relative)),
                'rel_bias_median': float(np.median(relative)),
                'exact_logZ': stats.log_Z,
                'exact_cv2': stats.cv2,
                'jensen_bias': float(np.mean(estimates) - stats.log_Z),
            })

    aggregates = []
    for m in subsample_sizes:
        selected = [row for row in rows if row['M'] == m]
        variances = np.array([row['var_logZ'] for row in selected])
        biases = np.array([row['rel_bias_mean'] for row in selected])
        aggregates.append({
            'M': m,
            'prompt_count': len(selected),
            'var_logZ_mean': float(np.mean(variances)),
            'var_logZ_std': float(np.std(variances)),
            'rel_bias_mean': float(np.mean(biases)),
            'rel_bias_std': float(np.std(biases)),
            'rel_bias_median': float(np.median([row['rel_bias_median'] for row in selected])),
            'jensen_bias_mean': float(np.mean([row['jensen_bias'] for row in selected])),
            'predicted_jensen_bias': float(-np.mean([row['exact_cv2'] for row in selected]) / (2 * m)),
        })
    LOGGER.info('Variance and bias study done on {} prompts'.format(len(prompts)))
    return StudyResult(rows=rows, aggregates=aggregates)
