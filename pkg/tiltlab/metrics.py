"""Diversity and accuracy diagnostics, exact by enumeration."""

__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

from dataclasses import asdict, dataclass

import numpy as np

from scipy.special import entr

from tiltlab.errors import DiversityError
from tiltlab.policy import TabularPolicy, sample_indices, trajectory_probs
from tiltlab.trajectory_env import Prompt, RewardSpec, correct_mask, mode_labels


def _check_k(k: int):
    if k < 1:
        raise ValueError('k must be at least 1, got {}'.format(k))


def _hit_probability(mass: np.ndarray, k: int) -> np.ndarray:
    """ 1 - (1 - mass) ** k without cancellation for small masses. """
    mass = np.clip(mass, 0.0, 1.0)
    with np.errstate(divide='ignore'):
        return -np.expm1(k * np.log1p(-mass))


def mass_on_correct(policy: TabularPolicy, q: Prompt, spec: RewardSpec) -> float:
    return float(np.sum(trajectory_probs(policy, q)[correct_mask(spec, q, policy.space)]))


def pass_at_k_exact(policy: TabularPolicy, q: Prompt, spec: RewardSpec, k: int) -> float:
    """ Probability that at least one of k samples is correct. """
    _check_k(k)
    return float(_hit_probability(np.array(mass_on_correct(policy, q, spec)), k))


def distinct_correct_expected(policy: TabularPolicy, q: Prompt, spec: RewardSpec, k: int) -> float:
    """ Expected number of distinct correct trajectories among k samples. """
    _check_k(k)
    probs = trajectory_probs(policy, q)[correct_mask(spec, q, policy.space)]
    return float(np.sum(_hit_probability(probs, k)))


def distinct_modes_expected(policy: TabularPolicy, q: Prompt, spec: RewardSpec, k: int) -> float:
    """ Expected number of distinct reward modes hit by k samples. """
    _check_k(k)
    labels = mode_labels(spec, q, policy.space)
    probs = trajectory_probs(policy, q)
    correct = labels >= 0
    if not np.any(correct):
        return 0.0
    _, inverse = np.unique(labels[correct], return_inverse=True)
    masses = np.bincount(inverse, weights=probs[correct])
    return float(np.sum(_hit_probability(masses, k)))


def mode_entropy(policy: TabularPolicy, q: Prompt, spec: RewardSpec) -> float:
    """ Entropy of the policy restricted to the correct set and renormalized. """
    probs = trajectory_probs(policy, q)[correct_mask(spec, q, policy.space)]
    mass = float(np.sum(probs))
    if mass <= 0:
        raise DiversityError('The policy has no mass on the correct set of prompt "{}"'.format(q.id))
    return float(np.sum(entr(probs / mass)))


def pass_at_k_sampled(
        policy: TabularPolicy, q: Prompt, spec: RewardSpec, k: int, rng: np.random.Generator,
        draws: int) -> float:
    """ Monte Carlo pass@k, draws groups of k samples. """
    _check_k(k)
    mask = correct_mask(spec, q, policy.space)
    indices = sample_indices(policy, q, rng, k * draws).reshape(draws, k)
    return float(np.mean(np.any(mask[indices], axis=1)))


@dataclass(frozen=True)
class DiversityReport:
    prompt_id: str
    k: int
    distinct_correct_expected: float
    mass_on_correct: float
    mode_entropy: float
    distinct_modes_expected: float
    pass_at_k: float

    def as_row(self) -> dict:
        return asdict(self)


DIVERSITY_COLUMNS = [
    'prompt_id', 'k', 'distinct_correct_expected', 'mass_on_correct', 'mode_entropy', 'distinct_modes_expected',
    'pass_at_k',
]


def diversity_report(policy: TabularPolicy, q: Prompt, spec: RewardSpec, k: int) -> DiversityReport:
    """ All metrics of one prompt. The mode entropy is nan when the correct set has no mass. """
    mass = mass_on_correct(policy, q, spec)
    return DiversityReport(
        prompt_id=q.id,
        k=k,
        distinct_correct_expected=distinct_correct_expected(policy, q, spec, k),
        mass_on_correct=mass,
        mode_entropy=mode_entropy(policy, q, spec) if mass > 0 else float('nan'),
        distinct_modes_expected=distinct_modes_expected(policy, q, spec, k),
        pass_at_k=pass_at_k_exact(policy, q, spec, k),
    )
