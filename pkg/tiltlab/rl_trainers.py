"""Policy optimization against the reward tilted target.

Four objectives share one training loop:

* anchored-tb: squared trajectory-balance residual with a frozen log-partition anchor,
* coupled-tb: the same residual with a per-prompt log-partition scalar trained jointly,
* grpo: group normalized reward maximization,
* sft: cross-entropy toward the reward-1 samples of the offline stage.

The trajectory-balance gradient keeps both on-policy terms: the score term R^2 grad log pi
coming from the sampling distribution, and the direct term 2 R grad R.
"""

__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import logging

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from tiltlab.amortizer import Amortizer, PartitionAnchor, anchor_value
from tiltlab.definitions.definitions import (
    DEFAULT_BETA,
    DEFAULT_GROUP_SIZE,
    DEFAULT_PARTITION_LR,
    DEFAULT_POLICY_LR,
    EPS_FLOOR,
    GradientEstimator,
    Objective,
    OffsetMode,
    RolloutWeights,
)
from tiltlab.errors import ContractError, EmptyDatasetError, InvalidGroupError, TiltlabError
from tiltlab.logger import profiling
from tiltlab.metrics import distinct_correct_expected, mass_on_correct
from tiltlab.oracle import ExactTarget, exact_kl, exact_tilted_target, tb_residual_table
from tiltlab.policy import (
    TabularPolicy,
    log_prob_table,
    sample_indices,
    tilt_policy,
    trajectory_probs,
    weighted_score_gradient,
)
from tiltlab.streams import stream
from tiltlab.trajectory_env import (
    Prompt,
    RewardSpec,
    Trajectory,
    TrajectorySpace,
    enumeration,
    group_normalize,
    reward_table,
    reward_transform,
    trajectory_index,
)

LOGGER = logging.getLogger('Tiltlab')

Anchor = Union[Amortizer, PartitionAnchor]


@dataclass(frozen=True)
class TrainConfig:
    objective: Objective = Objective.AnchoredTB
    beta: float = DEFAULT_BETA
    group_size: int = DEFAULT_GROUP_SIZE
    policy_lr: float = DEFAULT_POLICY_LR
    partition_lr: float = DEFAULT_PARTITION_LR
    steps: int = 0
    rollout_weights: RolloutWeights = RolloutWeights.Unit
    seed: int = 0
    estimator: GradientEstimator = GradientEstimator.Sampled
    score_term: bool = True
    length_normalized: bool = False
    k: int = 8
    eps_floor: float = EPS_FLOOR

    def __post_init__(self):
        if self.group_size < 2 and self.objective == Objective.GroupReward:
            raise InvalidGroupError('GRPO needs a group of at least 2 rollouts, got {}'.format(self.group_size))
        if self.group_size < 1:
            raise InvalidGroupError('The group size must be at least 1, got {}'.format(self.group_size))
        if self.beta < 0:
            raise TiltlabError('beta must be non-negative, got {}'.format(self.beta))
        if self.steps < 0:
            raise TiltlabError('The step count must be non-negative, got {}'.format(self.steps))

    def echo(self) -> Dict:
        return {
            'objective': self.objective.value,
            'beta': self.beta,
            'group_size': self.group_size,
            'policy_lr': self.policy_lr,
            'partition_lr': self.partition_lr,
            'steps': self.steps,
            'rollout_weights': self.rollout_weights.value,
            'seed': self.seed,
            'estimator': self.estimator.value,
            'score_term': self.score_term,
            'length_normalized': self.length_normalized,
            'k': self.k,
            'eps_floor': self.eps_floor,
        }


@dataclass
class CoupledState:

    """ Per-prompt log-partition scalars trained with the policy, 0 until first updated. """

    log_z: Dict[str, float] = field(default_factory=dict)

    def value(self, q: Prompt) -> float:
        return self.log_z.get(q.id, 0.0)

    def mean(self, prompts: Sequence[Prompt]) -> float:
        return float(np.mean([self.value(q) for q in prompts]))


@dataclass(frozen=True)
class StepResult:
    loss: float
    gradient: np.ndarray
    partition_gradient: Optional[float] = None

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.gradient))


@dataclass(frozen=True)
class StepRecord:
    step: int
    objective: str
    loss: float
    kl_fwd: float
    kl_rev: float
    grad_norm: float
    distinct_correct_at_k: float
    mass_on_correct: float
    log_z_phi: Optional[float] = None

    def as_row(self) -> Dict:
        return {
            'step': self.step,
            'objective': self.objective,
            'loss': self.loss,
            'kl_fwd': self.kl_fwd,
            'kl_rev': self.kl_rev,
            'grad_norm': self.grad_norm,
            'distinct_correct_at_k': self.distinct_correct_at_k,
            'mass_on_correct': self.mass_on_correct,
            'log_z_phi': self.log_z_phi,
        }


TRAIN_COLUMNS = [
    'step', 'objective', 'loss', 'kl_fwd', 'kl_rev', 'grad_norm', 'distinct_correct_at_k', 'mass_on_correct',
    'log_z_phi',
]


@dataclass(frozen=True)
class TrainingEnv:

    """ Prompts, their rewards and the reference policy a run trains against. """

    space: TrajectorySpace
    prompts: Tuple[Prompt, ...]
    specs: Mapping[str, RewardSpec]
    reference: TabularPolicy

    def spec_of(self, q: Prompt) -> RewardSpec:
        try:
            return self.specs[q.reward_spec_ref]
        except KeyError:
            raise TiltlabError('Prompt "{}" refers to the unknown reward "{}"'.format(q.id, q.reward_spec_ref))


@dataclass
class TrainRun:
    config: TrainConfig
    initial: StepRecord
    records: List[StepRecord]
    final_policy: TabularPolicy
    best_step: int
    best_policy: TabularPolicy
    partition: Optional[Dict[str, float]] = None

    def rows(self) -> List[Dict]:
        return [self.initial.as_row()] + [record.as_row() for record in self.records]

    @property
    def final(self) -> StepRecord:
        return self.records[-1] if self.records else self.initial


def _symbol_counts(space: TrajectorySpace) -> np.ndarray:
    """ Number of emitted symbols of every trajectory, STOP included. """
    e = enumeration(space)
    return np.bincount(e.visit_trajectory, minlength=len(e)).astype(np.float64)


def tb_gradient(
        pi_theta: TabularPolicy, pi_ref: TabularPolicy, q: Prompt, spec: RewardSpec, beta: float,
        log_z_value: float, weights: np.ndarray, score_term: bool = True,
        length_normalized: bool = False) -> Tuple[float, np.ndarray, float]:
    """ Loss, policy gradient and log-partition gradient of sum_o weights[o] * R(o)^2.

    The weights are the sampling distribution: empirical rollout frequencies or exact
    probabilities. With length_normalized, the log-likelihood ratio is divided by the number of
    emitted symbols.
    """
    space = pi_theta.space
    if length_normalized:
        lengths = _symbol_counts(space)
        ratio = (log_prob_table(pi_theta, q) - log_prob_table(pi_ref, q)) / lengths
        tilt = beta * reward_transform(q, reward_table(spec, q, space))
        residual = log_z_value + ratio - tilt
        direct = 2.0 * residual / lengths
    else:
        residual = tb_residual_table(pi_theta, pi_ref, q, spec, beta, log_z_value)
        direct = 2.0 * residual
    coefficients = weights * (direct + (residual ** 2 if score_term else 0.0))
    loss = float(np.sum(weights * residual ** 2))
    gradient = weighted_score_gradient(pi_theta, q, coefficients)
    return loss, gradient, float(np.sum(weights * 2.0 * residual))


def rollout_weights(
        pi_theta: TabularPolicy, q: Prompt, cfg: TrainConfig, rng: Optional[np.random.Generator]) -> np.ndarray:
    """ Sampling distribution of a step: exact probabilities, or rollout frequencies with unit weights. """
    if cfg.estimator == GradientEstimator.Exact:
        return trajectory_probs(pi_theta, q)
    indices = sample_indices(pi_theta, q, rng, cfg.group_size)
    counts = np.bincount(indices, minlength=len(enumeration(pi_theta.space)))
    return counts / float(cfg.group_size)


def _descend(policy: TabularPolicy, q: Prompt, gradient: np.ndarray, lr: float) -> TabularPolicy:
    return policy.with_table(q, policy.logits(q) - lr * gradient)


def anchored_step(
        pi_theta: TabularPolicy, pi_ref: TabularPolicy, q: Prompt, spec: RewardSpec, g_frozen: Anchor,
        cfg: TrainConfig, rng: Optional[np.random.Generator]) -> Tuple[TabularPolicy, StepResult]:
    """ One descent step on the residual with the frozen anchor in place of log Z. """
    if isinstance(g_frozen, Amortizer) and not g_frozen.frozen:
        raise ContractError('Anchored training needs a frozen amortizer')
    anchor = anchor_value(g_frozen, q)
    weights = rollout_weights(pi_theta, q, cfg, rng)
    loss, gradient, _ = tb_gradient(
        pi_theta, pi_ref, q, spec, cfg.beta, anchor, weights, cfg.score_term, cfg.length_normalized)
    return _descend(pi_theta, q, gradient, cfg.policy_lr), StepResult(loss=loss, gradient=gradient)


def coupled_step(
        pi_theta: TabularPolicy, state: CoupledState, pi_ref: TabularPolicy, q: Prompt, spec: RewardSpec,
        cfg: TrainConfig, rng: Optional[np.random.Generator]) -> Tuple[TabularPolicy, StepResult]:
    """ One joint step of the policy and of the prompt log-partition scalar, the state is updated in place. """
    log_z = state.value(q)
    weights = rollout_weights(pi_theta, q, cfg, rng)
    loss, gradient, partition_gradient = tb_gradient(
        pi_theta, pi_ref, q, spec, cfg.beta, log_z, weights, cfg.score_term, cfg.length_normalized)
    state.log_z[q.id] = log_z - cfg.partition_lr * partition_gradient
    return (
        _descend(pi_theta, q, gradient, cfg.policy_lr),
        StepResult(loss=loss, gradient=gradient, partition_gradient=partition_gradient),
    )


def grpo_step(
        pi_theta: TabularPolicy, q: Prompt, spec: RewardSpec, cfg: TrainConfig,
        rng: np.random.Generator) -> Tuple[TabularPolicy, StepResult]:
    """ Ascent on the group mean of normalized advantage times log pi, no clipping.

    The reported loss is minus the mean transformed reward of the group.
    """
    if cfg.group_size < 2:
        raise InvalidGroupError('GRPO needs a group of at least 2 rollouts, got {}'.format(cfg.group_size))
    indices = sample_indices(pi_theta, q, rng, cfg.group_size)
    rewards = reward_transform(q, reward_table(spec, q, pi_theta.space)[indices])
    advantages = group_normalize(rewards, cfg.eps_floor)
    coefficients = np.zeros(len(enumeration(pi_theta.space)))
    np.add.at(coefficients, indices, advantages / cfg.group_size)
    ascent = weighted_score_gradient(pi_theta, q, coefficients)
    policy = pi_theta.with_table(q, pi_theta.logits(q) + cfg.policy_lr * ascent)
    return policy, StepResult(loss=-float(np.mean(rewards)), gradient=-ascent)


def sft_step(
        pi_theta: TabularPolicy, q: Prompt, dataset: Sequence[Trajectory],
        cfg: TrainConfig) -> Tuple[TabularPolicy, StepResult]:
    """ One full-batch step on the cross-entropy to the empirical distribution of the dataset. """
    if not dataset:
        raise EmptyDatasetError('No reward-1 trajectory for prompt "{}"'.format(q.id))
    space = pi_theta.space
    counts = np.zeros(len(enumeration(space)))
    for o in dataset:
        counts[trajectory_index(space, o)] += 1.0
    empirical = counts / counts.sum()
    loss = -float(np.sum(empirical[empirical > 0] * log_prob_table(pi_theta, q)[empirical > 0]))
    gradient = -weighted_score_gradient(pi_theta, q, empirical)
    return _descend(pi_theta, q, gradient, cfg.policy_lr), StepResult(loss=loss, gradient=gradient)


def _initial_loss(
        cfg: TrainConfig, env: TrainingEnv, policy: TabularPolicy, q: Prompt, anchor: Optional[Anchor],
        state: Optional[CoupledState], datasets: Optional[Mapping[str, Sequence[Trajectory]]]) -> float:
    """ Exact value of the step loss at the starting policy. """
    spec = env.spec_of(q)
    probs = trajectory_probs(policy, q)
    if cfg.objective == Objective.AnchoredTB:
        residual = tb_residual_table(policy, env.reference, q, spec, cfg.beta, anchor_value(anchor, q))
        return float(np.sum(probs * residual ** 2))
    if cfg.objective == Objective.CoupledTB:
        residual = tb_residual_table(policy, env.reference, q, spec, cfg.beta, state.value(q))
        return float(np.sum(probs * residual ** 2))
    if cfg.objective == Objective.GroupReward:
        return -float(np.sum(probs * reward_transform(q, reward_table(spec, q, env.space))))
    data = datasets.get(q.id, ()) if datasets else ()
    if not data:
        return float('nan')
    indices = [trajectory_index(env.space, o) for o in data]
    return -float(np.mean(log_prob_table(policy, q)[indices]))


def _record(
        step: int, cfg: TrainConfig, env: TrainingEnv, policy: TabularPolicy,
        targets: Mapping[str, ExactTarget], losses: Sequence[float], grad_norms: Sequence[float],
        state: Optional[CoupledState]) -> StepRecord:
    """ Oracle metrics, averaged over prompts. """
    kl_fwd = []
    kl_rev = []
    distinct = []
    correct = []
    for q in env.prompts:
        probs = trajectory_probs(policy, q)
        target = targets[q.id].target_probs
        kl_fwd.append(exact_kl(probs, target))
        kl_rev.append(exact_kl(target, probs))
        distinct.append(distinct_correct_expected(policy, q, env.spec_of(q), cfg.k))
        correct.append(mass_on_correct(policy, q, env.spec_of(q)))
    finite_losses = [loss for loss in losses if not np.isnan(loss)]
    return StepRecord(
        step=step,
        objective=cfg.objective.value,
        loss=float(np.mean(finite_losses)) if finite_losses else float('nan'),
        kl_fwd=float(np.mean(kl_fwd)),
        kl_rev=float(np.mean(kl_rev)),
        grad_norm=float(np.mean(grad_norms)) if len(grad_norms) else 0.0,
        distinct_correct_at_k=float(np.mean(distinct)),
        mass_on_correct=float(np.mean(correct)),
        log_z_phi=state.mean(env.prompts) if state is not None else None,
    )


@profiling
def run_training(
        cfg: TrainConfig,
        env: TrainingEnv,
        anchor: Optional[Anchor] = None,
        state: Optional[CoupledState] = None,
        steps: Optional[int] = None,
        datasets: Optional[Mapping[str, Sequence[Trajectory]]] = None,
        initial_policy: Optional[TabularPolicy] = None) -> TrainRun:
    """ Train from the reference policy and record oracle metrics after every step.

    Every step reads a snapshot of the policy, computes the per-prompt updates in prompt order,
    then applies them together.
    """
    steps = cfg.steps if steps is None else steps
    if cfg.objective == Objective.AnchoredTB and anchor is None:
        raise ContractError('Anchored training needs an anchor')
    if cfg.objective == Objective.CoupledTB and state is None:
        state = CoupledState()
    if cfg.objective != Objective.CoupledTB:
        state = None
    if cfg.objective == Objective.SupervisedCorrect:
        datasets = datasets or {}
        for q in env.prompts:
            if not datasets.get(q.id):
                LOGGER.warning('No reward-1 trajectory for prompt "{}", it is not trained'.format(q.id))

    policy = initial_policy if initial_policy is not None else env.reference
    targets = {q.id: exact_tilted_target(env.reference, q, env.spec_of(q), cfg.beta) for q in env.prompts}

    initial = _record(
        0, cfg, env, policy, targets,
        [_initial_loss(cfg, env, policy, q, anchor, state, datasets) for q in env.prompts], [], state)
    best_step, best_policy, best_kl = 0, policy, initial.kl_fwd
    records = []
    for step in range(1, steps + 1):
        snapshot = policy
        tables = {}
        losses = []
        grad_norms = []
        for q in env.prompts:
            spec = env.spec_of(q)
            rng = None
            if cfg.estimator == GradientEstimator.Sampled or cfg.objective == Objective.GroupReward:
                rng = stream(cfg.seed, q.id, 'rollout', step)

            if cfg.objective == Objective.AnchoredTB:
                updated, result = anchored_step(snapshot, env.reference, q, spec, anchor, cfg, rng)
            elif cfg.objective == Objective.CoupledTB:
                updated, result = coupled_step(snapshot, state, env.reference, q, spec, cfg, rng)
            elif cfg.objective == Objective.GroupReward:
                updated, result = grpo_step(snapshot, q, spec, cfg, rng)
            else:
                data = datasets.get(q.id)
                if not data:
                    continue
                updated, result = sft_step(snapshot, q, data, cfg)
            tables[q.id] = updated.logits(q)
            losses.append(result.loss)
            grad_norms.append(result.grad_norm)

        policy = snapshot.with_tables(tables)
        record = _record(step, cfg, env, policy, targets, losses, grad_norms, state)
        records.append(record)
        if record.kl_fwd < best_kl:
            best_step, best_policy, best_kl = step, policy, record.kl_fwd

    LOGGER.info('Training {} done, {} steps, final KL {}'.format(
        cfg.objective.value, steps, records[-1].kl_fwd if records else initial.kl_fwd))
    return TrainRun(
        config=cfg,
        initial=initial,
        records=records,
        final_policy=policy,
        best_step=best_step,
        best_policy=best_policy,
        partition=dict(state.log_z) if state is not None else None,
    )


@dataclass(frozen=True)
class EnvelopeReport:
    l_anchor: float
    l_tb: float
    sigma: float
    bound: float
    difference: float
    holds: bool

    @property
    def slack(self) -> float:
        return self.bound - self.difference


def envelope_check(
        pi_theta: TabularPolicy, pi_ref: TabularPolicy, prompts: Sequence[Prompt],
        spec: Union[RewardSpec, Mapping[str, RewardSpec]], beta: float, g: Anchor,
        trajectory_offsets: Optional[Mapping[str, np.ndarray]] = None, tolerance: float = 1e-12) -> EnvelopeReport:
    """ Compare the anchored loss with the exact partition loss and the error envelope.

    The anchor error is g(q) - log Z(q), plus an optional per-trajectory offset table.
    """
    l_anchor = []
    l_tb = []
    squared_error = []
    for q in prompts:
        q_spec = spec if isinstance(spec, RewardSpec) else spec[q.reward_spec_ref]
        probs = trajectory_probs(pi_theta, q)
        log_z = exact_tilted_target(pi_ref, q, q_spec, beta).log_Z
        residual = tb_residual_table(pi_theta, pi_ref, q, q_spec, beta, log_z)
        error = anchor_value(g, q) - log_z
        if trajectory_offsets is not None:
            error = error + np.asarray(trajectory_offsets[q.id], dtype=np.float64)
        error = np.broadcast_to(error, residual.shape)
        l_tb.append(float(np.sum(probs * residual ** 2)))
        l_anchor.append(float(np.sum(probs * (residual + error) ** 2)))
        squared_error.append(float(np.sum(probs * error ** 2)))

    l_tb_mean = float(np.mean(l_tb))
    l_anchor_mean = float(np.mean(l_anchor))
    sigma = float(np.sqrt(np.mean(squared_error)))
    bound = sigma ** 2 + 2.0 * sigma * np.sqrt(l_tb_mean)
    difference = abs(l_anchor_mean - l_tb_mean)
    return EnvelopeReport(
        l_anchor=l_anchor_mean,
        l_tb=l_tb_mean,
        sigma=sigma,
        bound=float(bound),
        difference=difference,
        holds=bool(difference <= bound + tolerance * max(1.0, bound)),
    )


@dataclass(frozen=True)
class StationarityReport:
    grad_norm: float
    loss: float
    on_policy: bool


def stationarity_check(
        q: Prompt, spec: RewardSpec, beta: float, eta: float, pi_ref: TabularPolicy,
        sampling: Optional[np.ndarray] = None) -> StationarityReport:
    """ Expected gradient norm at the exact tilted target with the anchor log Z + eta.

    On-policy, both gradient terms are kept. With a fixed sampling table only the direct term remains.
    """
    target_policy = tilt_policy(pi_ref, q, spec, beta * q.affine_a)
    log_z = exact_tilted_target(pi_ref, q, spec, beta).log_Z + eta
    on_policy = sampling is None
    weights = trajectory_probs(target_policy, q) if on_policy else np.asarray(sampling, dtype=np.float64)
    loss, gradient, _ = tb_gradient(target_policy, pi_ref, q, spec, beta, log_z, weights, score_term=on_policy)
    return StationarityReport(grad_norm=float(np.linalg.norm(gradient)), loss=loss, on_policy=on_policy)


def offset_table(mode: OffsetMode, eta: float, space: TrajectorySpace, rng: np.random.Generator) -> np.ndarray:
    """ Per-trajectory perturbation: constant eta, or eta times standard normal noise. """
    count = len(enumeration(space))
    if mode == OffsetMode.Prompt:
        return np.full(count, float(eta))
    return eta * rng.standard_normal(count)
