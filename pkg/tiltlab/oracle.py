"""Exact enumeration ground truth.

Partition functions, tilted targets, KL divergences, trajectory-balance losses and importance
weight moments, all computed by summing over the whole trajectory space.
"""

__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import logging

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from scipy.special import entr, logsumexp, rel_entr

from tiltlab.errors import SupportError
from tiltlab.policy import TabularPolicy, log_prob_table
from tiltlab.trajectory_env import (
    Prompt,
    RewardSpec,
    enumeration,
    format_trajectory,
    mode_labels,
    transformed_reward_table,
)

LOGGER = logging.getLogger('Tiltlab')


@dataclass(frozen=True)
class ExactTarget:
    log_Z: float
    target_probs: np.ndarray
    beta: float

    @property
    def log_target(self) -> np.ndarray:
        with np.errstate(divide='ignore'):
            return np.log(self.target_probs)


@dataclass(frozen=True)
class WeightStats:

    """ Moments of w = (pi_ref / p_T) exp(beta r~) under p_T. """

    Z: float
    log_Z: float
    variance: float
    cv2: float
    ess_fraction: float


def tilt_log_weights(pi_ref: TabularPolicy, q: Prompt, spec: RewardSpec, beta: float) -> np.ndarray:
    """ log pi_ref(o) + beta * r~(q, o) for every trajectory. """
    return log_prob_table(pi_ref, q) + beta * transformed_reward_table(spec, q, pi_ref.space)


def exact_log_partition(pi_ref: TabularPolicy, q: Prompt, spec: RewardSpec, beta: float) -> float:
    return float(logsumexp(tilt_log_weights(pi_ref, q, spec, beta)))


def exact_tilted_target(pi_ref: TabularPolicy, q: Prompt, spec: RewardSpec, beta: float) -> ExactTarget:
    """ The reward tilted distribution and its log partition. """
    log_weights = tilt_log_weights(pi_ref, q, spec, beta)
    log_Z = float(logsumexp(log_weights))
    probs = np.exp(log_weights - log_Z)
    probs.setflags(write=False)
    return ExactTarget(log_Z=log_Z, target_probs=probs, beta=beta)


def exact_kl(p: np.ndarray, q_table: np.ndarray) -> float:
    """ KL(p || q_table) of two probability tables on the same enumeration. """
    p = np.asarray(p, dtype=np.float64)
    q_table = np.asarray(q_table, dtype=np.float64)
    if p.shape != q_table.shape:
        raise ValueError('Tables of shape {} and {} are not comparable'.format(p.shape, q_table.shape))
    violations = np.flatnonzero((p > 0) & (q_table <= 0))
    if violations.size:
        raise SupportError(
            'The second table has no mass on entry {} where the first has {}'.format(
                violations[0], p[violations[0]]),
            trajectory=str(violations[0]))
    return max(float(np.sum(rel_entr(p, q_table))), 0.0)


def entropy(p: np.ndarray) -> float:
    return float(np.sum(entr(np.asarray(p, dtype=np.float64))))


def exact_weight_stats(
        pi_ref: TabularPolicy, p_T: TabularPolicy, q: Prompt, spec: RewardSpec, beta: float) -> WeightStats:
    """ Exact moments of the importance weights under the proposal. """
    log_target = tilt_log_weights(pi_ref, q, spec, beta)
    log_proposal = log_prob_table(p_T, q)

    uncovered = np.flatnonzero(np.isfinite(log_target) & ~np.isfinite(log_proposal))
    if uncovered.size:
        o = enumeration(pi_ref.space).trajectories[uncovered[0]]
        label = format_trajectory(o, pi_ref.space)
        raise SupportError(
            'The proposal has no mass on trajectory {} of prompt "{}"'.format(label, q.id), trajectory=label)

    support = np.isfinite(log_proposal)
    log_w = log_target[support] - log_proposal[support]
    proposal = np.exp(log_proposal[support])
    log_Z = float(logsumexp(log_target))
    relative = np.exp(log_w - log_Z) - 1.0
    cv2 = float(np.sum(proposal * relative ** 2))
    Z = float(np.exp(log_Z))
    return WeightStats(Z=Z, log_Z=log_Z, variance=cv2 * Z ** 2, cv2=cv2, ess_fraction=1.0 / (1.0 + cv2))


def tb_residual_table(
        pi_theta: TabularPolicy, pi_ref: TabularPolicy, q: Prompt, spec: RewardSpec, beta: float,
        log_z_value: float) -> np.ndarray:
    """ log_z_value + log pi_theta(o) - log pi_ref(o) - beta r~(q, o) for every trajectory. """
    return log_z_value + log_prob_table(pi_theta, q) - tilt_log_weights(pi_ref, q, spec, beta)


def exact_tb_loss(
        pi_theta: TabularPolicy, pi_ref: TabularPolicy, q: Prompt, spec: RewardSpec, beta: float,
        logZ_value: float, sampling: Optional[np.ndarray] = None) -> float:
    """ Expected squared trajectory-balance residual, on-policy when no sampling table is given. """
    if sampling is None:
        sampling = np.exp(log_prob_table(pi_theta, q))
    residual = tb_residual_table(pi_theta, pi_ref, q, spec, beta, logZ_value)
    return float(np.sum(np.asarray(sampling) * residual ** 2))


def mode_count(spec: RewardSpec, q: Prompt, pi_ref: TabularPolicy) -> int:
    labels = mode_labels(spec, q, pi_ref.space)
    return int(np.unique(labels[labels >= 0]).size)


ORACLE_COLUMNS = ['prompt_id', 'beta', 'log_Z', 'cv2', 'ess_fraction', 'target_entropy', 'mode_count']


def oracle_row(
        pi_ref: TabularPolicy, p_T: TabularPolicy, q: Prompt, spec: RewardSpec, beta: float) -> Dict:
    """ One oracle dump row, columns in ORACLE_COLUMNS order. """
    target = exact_tilted_target(pi_ref, q, spec, beta)
    stats = exact_weight_stats(pi_ref, p_T, q, spec, beta)
    return {
        'prompt_id': q.id,
        'beta': float(beta),
        'log_Z': target.log_Z,
        'cv2': stats.cv2,
        'ess_fraction': stats.ess_fraction,
        'target_entropy': entropy(target.target_probs),
        'mode_count': mode_count(spec, q, pi_ref),
    }
