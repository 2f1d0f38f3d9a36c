__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import math
import tempfile
import unittest

from pathlib import Path

import numpy as np

from tiltlab.amortizer import Amortizer, PartitionAnchor, fit, write_checkpoint
from tiltlab.definitions.definitions import (
    AmortizerKind,
    GradientEstimator,
    Objective,
    OffsetMode,
    RewardKind,
)
from tiltlab.errors import ContractError, EmptyDatasetError, InvalidGroupError, TiltlabError
from tiltlab.metrics import distinct_correct_expected, mass_on_correct
from tiltlab.oracle import exact_tb_loss, exact_tilted_target
from tiltlab.policy import TabularPolicy, tilt_policy, trajectory_probs
from tiltlab.rl_trainers import (
    TRAIN_COLUMNS,
    CoupledState,
    TrainConfig,
    TrainingEnv,
    anchored_step,
    coupled_step,
    envelope_check,
    grpo_step,
    offset_table,
    run_training,
    sft_step,
    stationarity_check,
    tb_gradient,
)
from tiltlab.streams import stream
from tiltlab.trajectory_env import Prompt, RewardSpec, TrajectorySpace, enumeration

LN_1_5 = math.log(1.5)


def two_outcomes():
    space = TrajectorySpace(2, 1, stop=False)
    spec = RewardSpec(name='r', kind=RewardKind.ExplicitValues, values=(((0,), math.log(2.0)),))
    q = Prompt(id='q', features=(0.0,), reward_spec_ref='r')
    return space, spec, q, TabularPolicy.uniform(space)


def small_env(count=1):
    space = TrajectorySpace(2, 2)
    spec = RewardSpec(name='r', kind=RewardKind.ExplicitSet, trajectories=((0, 0), (1, 2)), stop_symbol=2)
    prompts = tuple(Prompt(id='q{}'.format(i), features=(float(i),), reward_spec_ref='r') for i in range(count))
    reference = TabularPolicy.seeded(space, prompts, seed=3, scale=0.5)
    return TrainingEnv(space=space, prompts=prompts, specs={'r': spec}, reference=reference)


def numeric_gradient(function, table, h=1e-6):
    gradient = np.zeros_like(table)
    for index in np.ndindex(*table.shape):
        shifted = table.copy()
        shifted[index] += h
        up = function(shifted)
        shifted[index] -= 2 * h
        down = function(shifted)
        gradient[index] = (up - down) / (2 * h)
    return gradient


class TestTrajectoryBalanceGradient(unittest.TestCase):

    def setUp(self):
        self.env = small_env()
        self.q = self.env.prompts[0]
        self.spec = self.env.spec_of(self.q)
        self.theta = TabularPolicy.seeded(self.env.space, [self.q], seed=9)
        self.table = np.array(self.theta.logits(self.q))

    def test_on_policy_gradient(self):
        """ Test both gradient terms against finite differences of the exact loss. """
        def loss(table):
            return exact_tb_loss(self.theta.with_table(self.q, table), self.env.reference, self.q, self.spec, 2.0, 0.3)

        weights = trajectory_probs(self.theta, self.q)
        value, gradient, _ = tb_gradient(self.theta, self.env.reference, self.q, self.spec, 2.0, 0.3, weights)
        self.assertAlmostEqual(value, loss(self.table), places=12)
        np.testing.assert_allclose(gradient, numeric_gradient(loss, self.table), atol=1e-6)

    def test_fixed_sampling_gradient(self):
        """ Test the direct term alone against finite differences with frozen sampling weights. """
        weights = np.full(len(enumeration(self.env.space)), 1.0 / 7)

        def loss(table):
            return exact_tb_loss(
                self.theta.with_table(self.q, table), self.env.reference, self.q, self.spec, 2.0, 0.3,
                sampling=weights)

        _, gradient, _ = tb_gradient(
            self.theta, self.env.reference, self.q, self.spec, 2.0, 0.3, weights, score_term=False)
        np.testing.assert_allclose(gradient, numeric_gradient(loss, self.table), atol=1e-6)

    def test_partition_gradient(self):
        weights = trajectory_probs(self.theta, self.q)
        _, _, partition = tb_gradient(self.theta, self.env.reference, self.q, self.spec, 2.0, 0.3, weights)
        h = 1e-6
        up = exact_tb_loss(self.theta, self.env.reference, self.q, self.spec, 2.0, 0.3 + h, sampling=weights)
        down = exact_tb_loss(self.theta, self.env.reference, self.q, self.spec, 2.0, 0.3 - h, sampling=weights)
        self.assertAlmostEqual(partition, (up - down) / (2 * h), places=6)

    def test_length_normalized_loss(self):
        weights = trajectory_probs(self.theta, self.q)
        plain, _, _ = tb_gradient(self.theta, self.env.reference, self.q, self.spec, 2.0, 0.3, weights)
        normalized, gradient, _ = tb_gradient(
            self.theta, self.env.reference, self.q, self.spec, 2.0, 0.3, weights, length_normalized=True)
        self.assertTrue(math.isfinite(normalized))
        self.assertNotAlmostEqual(plain, normalized)
        self.assertTrue(np.all(np.isfinite(gradient)))


class TestStationarity(unittest.TestCase):

    def test_on_policy_target_is_stationary(self):
        _, spec, q, reference = two_outcomes()
        for eta in (-2.0, 1.0, 0.0):
            with self.subTest(eta=eta):
                report = stationarity_check(q, spec, 1.0, eta, reference)
                self.assertLessEqual(report.grad_norm, 1e-9)
                self.assertAlmostEqual(report.loss, eta ** 2, places=9)
                self.assertTrue(report.on_policy)

    def test_off_policy_target_is_not_stationary(self):
        """ Test uniform sampling leaves a gradient of norm |eta| sqrt(2) / 3. """
        _, spec, q, reference = two_outcomes()
        report = stationarity_check(q, spec, 1.0, -2.0, reference, sampling=np.array([0.5, 0.5]))
        self.assertAlmostEqual(report.grad_norm, 2.0 * math.sqrt(2.0) / 3.0, places=9)
        self.assertFalse(report.on_policy)
        exact = stationarity_check(q, spec, 1.0, 0.0, reference, sampling=np.array([0.5, 0.5]))
        self.assertLessEqual(exact.grad_norm, 1e-9)


class TestEnvelope(unittest.TestCase):

    def setUp(self):
        self.env = small_env(3)
        self.exact = {
            q.id: exact_tilted_target(self.env.reference, q, self.env.spec_of(q), 2.0).log_Z for q in self.env.prompts}

    def test_random_policies(self):
        for draw in range(20):
            rng = stream(0, 'test-envelope', draw)
            theta = TabularPolicy.seeded(self.env.space, self.env.prompts, seed=draw, scale=1.5)
            offsets = {q.id: float(rng.normal()) for q in self.env.prompts}
            report = envelope_check(
                theta, self.env.reference, self.env.prompts, self.env.specs, 2.0,
                PartitionAnchor.exact(self.exact, offsets))
            self.assertTrue(report.holds, report)
            self.assertGreaterEqual(report.slack, -1e-12)

    def test_trajectory_offsets(self):
        theta = TabularPolicy.seeded(self.env.space, self.env.prompts, seed=1)
        rng = stream(0, 'test-offsets')
        tables = {q.id: offset_table(OffsetMode.Trajectory, 0.5, self.env.space, rng) for q in self.env.prompts}
        report = envelope_check(
            theta, self.env.reference, self.env.prompts, self.env.specs, 2.0, PartitionAnchor.exact(self.exact),
            trajectory_offsets=tables)
        self.assertTrue(report.holds)
        self.assertGreater(report.sigma, 0.0)

    def test_equality_at_target(self):
        """ Test the envelope is tight at the target with a constant offset. """
        target = self.env.reference.with_tables({
            q.id: tilt_policy(self.env.reference, q, self.env.spec_of(q), 2.0).logits(q) for q in self.env.prompts})
        report = envelope_check(
            target, self.env.reference, self.env.prompts, self.env.specs, 2.0,
            PartitionAnchor.exact(self.exact, -2.0))
        self.assertAlmostEqual(report.l_anchor, 4.0, places=9)
        self.assertAlmostEqual(report.sigma, 2.0, places=12)
        self.assertLessEqual(abs(report.slack), 1e-10)

    def test_offset_table(self):
        space = self.env.space
        np.testing.assert_array_equal(offset_table(OffsetMode.Prompt, -2.0, space, None), np.full(7, -2.0))
        first = offset_table(OffsetMode.Trajectory, 1.0, space, stream(0, 'x'))
        second = offset_table(OffsetMode.Trajectory, 1.0, space, stream(0, 'x'))
        np.testing.assert_array_equal(first, second)
        self.assertEqual(first.shape, (7,))


class TestSteps(unittest.TestCase):

    def setUp(self):
        self.env = small_env()
        self.q = self.env.prompts[0]
        self.spec = self.env.spec_of(self.q)

    def test_anchored_step_needs_frozen_amortizer(self):
        g = Amortizer(
            kind=AmortizerKind.LinearRidge, feature_dim=1, weights={'coef': [0.0], 'intercept': 0.0},
            ridge_lambda=0.0, split_seed=0, train_mse=0.0, val_mse=0.0, label_manifest='')
        cfg = TrainConfig(beta=1.0, estimator=GradientEstimator.Exact)
        with self.assertRaises(ContractError):
            anchored_step(self.env.reference, self.env.reference, self.q, self.spec, g, cfg, None)
        g.freeze()
        policy, result = anchored_step(self.env.reference, self.env.reference, self.q, self.spec, g, cfg, None)
        self.assertGreater(result.grad_norm, 0.0)
        self.assertFalse(np.array_equal(policy.logits(self.q), self.env.reference.logits(self.q)))

    def test_coupled_step_moves_partition(self):
        cfg = TrainConfig(objective=Objective.CoupledTB, beta=1.0, estimator=GradientEstimator.Exact, partition_lr=0.5)
        state = CoupledState()
        _, result = coupled_step(self.env.reference, state, self.env.reference, self.q, self.spec, cfg, None)
        self.assertAlmostEqual(state.value(self.q), -0.5 * result.partition_gradient, places=12)

    def test_sampled_step_is_reproducible(self):
        cfg = TrainConfig(beta=1.0, group_size=4)
        anchor = PartitionAnchor({'q0': 0.1})
        first, _ = anchored_step(
            self.env.reference, self.env.reference, self.q, self.spec, anchor, cfg, stream(0, 'q0', 'rollout', 1))
        second, _ = anchored_step(
            self.env.reference, self.env.reference, self.q, self.spec, anchor, cfg, stream(0, 'q0', 'rollout', 1))
        np.testing.assert_array_equal(first.logits(self.q), second.logits(self.q))

    def test_grpo_constant_rewards(self):
        """ Test a group with a single reward value leaves the policy unchanged. """
        spec = RewardSpec(name='r', kind=RewardKind.ExplicitSet, trajectories=())
        cfg = TrainConfig(objective=Objective.GroupReward, beta=1.0, group_size=4)
        policy, result = grpo_step(self.env.reference, self.q, spec, cfg, stream(0, 'grpo'))
        np.testing.assert_array_equal(policy.logits(self.q), self.env.reference.logits(self.q))
        self.assertEqual(result.grad_norm, 0.0)
        self.assertEqual(result.loss, 0.0)

    def test_grpo_group_size(self):
        with self.assertRaises(InvalidGroupError):
            TrainConfig(objective=Objective.GroupReward, group_size=1)

    def test_sft_step(self):
        cfg = TrainConfig(objective=Objective.SupervisedCorrect, policy_lr=0.5)
        dataset = [(0, 0), (0, 0), (1, 2)]
        policy, result = sft_step(self.env.reference, self.q, dataset, cfg)
        self.assertGreater(
            mass_on_correct(policy, self.q, self.spec), mass_on_correct(self.env.reference, self.q, self.spec))
        self.assertGreater(result.loss, 0.0)
        with self.assertRaises(EmptyDatasetError):
            sft_step(self.env.reference, self.q, [], cfg)

    def test_config_validation(self):
        with self.assertRaises(TiltlabError):
            TrainConfig(beta=-1.0)
        with self.assertRaises(TiltlabError):
            TrainConfig(steps=-1)
        self.assertEqual(TrainConfig().echo()['objective'], 'anchored-tb')


class TestTraining(unittest.TestCase):

    def test_exact_anchor_recovers_target(self):
        space, spec, q, reference = two_outcomes()
        env = TrainingEnv(space=space, prompts=(q,), specs={'r': spec}, reference=reference)
        cfg = TrainConfig(beta=1.0, policy_lr=0.5, steps=2000, estimator=GradientEstimator.Exact)
        run = run_training(cfg, env, anchor=PartitionAnchor({'q': LN_1_5}))
        self.assertLess(run.final.kl_fwd, 1e-6)
        np.testing.assert_allclose(trajectory_probs(run.final_policy, q), [2 / 3, 1 / 3], atol=1e-3)
        self.assertLess(exact_tb_loss(run.final_policy, reference, q, spec, 1.0, LN_1_5), 1e-8)

    def test_coupled_learns_partition(self):
        space, spec, q, reference = two_outcomes()
        env = TrainingEnv(space=space, prompts=(q,), specs={'r': spec}, reference=reference)
        cfg = TrainConfig(
            objective=Objective.CoupledTB, beta=1.0, policy_lr=0.5, partition_lr=0.5, steps=3000,
            estimator=GradientEstimator.Exact)
        run = run_training(cfg, env)
        self.assertLess(run.final.kl_fwd, 1e-4)
        self.assertAlmostEqual(run.partition['q'], LN_1_5, delta=1e-2)
        self.assertAlmostEqual(run.final.log_z_phi, run.partition['q'], places=12)

    def test_records(self):
        env = small_env(2)
        cfg = TrainConfig(beta=1.0, steps=5, group_size=4, seed=2)
        run = run_training(cfg, env, anchor=PartitionAnchor({'q0': 0.0, 'q1': 0.0}))
        rows = run.rows()
        self.assertEqual(len(rows), 6)
        self.assertListEqual(list(rows[0]), TRAIN_COLUMNS)
        self.assertListEqual([row['step'] for row in rows], list(range(6)))
        self.assertIsNone(rows[0]['log_z_phi'])
        best = rows[run.best_step]['kl_fwd']
        self.assertEqual(best, min(row['kl_fwd'] for row in rows))

    def test_initial_loss_is_exact(self):
        env = small_env()
        q = env.prompts[0]
        cfg = TrainConfig(beta=1.0, steps=0)
        run = run_training(cfg, env, anchor=PartitionAnchor({'q0': 0.2}))
        self.assertAlmostEqual(
            run.initial.loss, exact_tb_loss(env.reference, env.reference, q, env.spec_of(q), 1.0, 0.2), places=12)
        self.assertEqual(run.final, run.initial)

    def test_prompts_train_independently(self):
        """ Test a prompt gets the same updates alone or next to another prompt. """
        pair = small_env(2)
        alone = TrainingEnv(
            space=pair.space, prompts=pair.prompts[:1], specs=pair.specs, reference=pair.reference)
        cfg = TrainConfig(beta=1.0, steps=10, group_size=4, seed=7)
        anchor = PartitionAnchor({'q0': 0.0, 'q1': 0.5})
        q = pair.prompts[0]
        np.testing.assert_array_equal(
            run_training(cfg, pair, anchor=anchor).final_policy.logits(q),
            run_training(cfg, alone, anchor=anchor).final_policy.logits(q))

    def test_anchor_required(self):
        with self.assertRaises(ContractError):
            run_training(TrainConfig(steps=1), small_env())

    def test_grpo_increases_correct_mass(self):
        env = small_env()
        q = env.prompts[0]
        cfg = TrainConfig(objective=Objective.GroupReward, beta=1.0, steps=100, group_size=8, policy_lr=0.5)
        run = run_training(cfg, env)
        self.assertGreater(run.final.mass_on_correct, run.initial.mass_on_correct)
        self.assertAlmostEqual(
            run.initial.loss, -mass_on_correct(env.reference, q, env.spec_of(q)), places=12)

    def test_sft_trains_only_prompts_with_data(self):
        env = small_env(2)
        cfg = TrainConfig(objective=Objective.SupervisedCorrect, steps=20, policy_lr=0.5)
        with self.assertLogs('Tiltlab', level='WARNING'):
            run = run_training(cfg, env, datasets={'q0': [(0, 0)]})
        q0, q1 = env.prompts
        np.testing.assert_array_equal(run.final_policy.logits(q1), env.reference.logits(q1))
        self.assertGreater(
            mass_on_correct(run.final_policy, q0, env.spec_of(q0)), mass_on_correct(env.reference, q0, env.spec_of(q0)))


class TestDecoupling(unittest.TestCase):

    def test_anchored_training_leaves_the_amortizer(self):
        env = small_env(6)
        labels = [
            (q.features, exact_tilted_target(env.reference, q, env.spec_of(q), 1.0).log_Z) for q in env.prompts]
        g = fit(labels, ridge_lambda=1e-3)
        with tempfile.TemporaryDirectory() as tmp:
            before = Path(tmp).joinpath('before.ckpt')
            after = Path(tmp).joinpath('after.ckpt')
            write_checkpoint(g, before)
            run_training(TrainConfig(beta=1.0, steps=50, group_size=4), env, anchor=g)
            write_checkpoint(g, after)
            self.assertEqual(before.read_bytes(), after.read_bytes())

    def test_coupled_training_moves_the_partition(self):
        env = small_env(2)
        run = run_training(TrainConfig(objective=Objective.CoupledTB, beta=1.0, steps=50, group_size=4), env)
        self.assertTrue(any(value != 0.0 for value in run.partition.values()))


def heavy_and_light():
    """ Ten one-token answers: one heavy correct answer, eight light correct answers, one heavy wrong answer. """
    space = TrajectorySpace(10, 1, stop=False)
    spec = RewardSpec(name='answers', kind=RewardKind.ExplicitSet, trajectories=tuple((t,) for t in range(9)))
    q = Prompt(id='q', features=(0.0,), reward_spec_ref='answers')
    reference = TabularPolicy(space, default=np.log([[0.2] + [0.01] * 8 + [0.72]]))
    return TrainingEnv(space=space, prompts=(q,), specs={'answers': spec}, reference=reference)


class TestObjectiveProperties(unittest.TestCase):

    def test_grpo_ignores_the_affine_transform(self):
        env = small_env()
        plain = env.prompts[0]
        scaled = Prompt(id=plain.id, features=plain.features, reward_spec_ref='r', affine_a=3.0, affine_b=-2.0)
        spec = env.spec_of(plain)
        cfg = TrainConfig(objective=Objective.GroupReward, group_size=8, policy_lr=0.5)
        moved = False
        for seed in range(5):
            first, step_plain = grpo_step(env.reference, plain, spec, cfg, stream(seed, 'affine'))
            second, step_scaled = grpo_step(env.reference, scaled, spec, cfg, stream(seed, 'affine'))
            np.testing.assert_allclose(step_scaled.gradient, step_plain.gradient, atol=1e-12)
            np.testing.assert_allclose(second.logits(plain), first.logits(plain), atol=1e-12)
            moved |= step_plain.grad_norm > 0
        self.assertTrue(moved)

    def test_coupled_partition_optimum_with_frozen_policy(self):
        """ Test the partition scalar alone converges to the on-policy mean of beta r + log pi_ref - log pi. """
        env = small_env()
        q = env.prompts[0]
        spec = env.spec_of(q)
        theta = TabularPolicy.seeded(env.space, [q], seed=11)
        cfg = TrainConfig(
            objective=Objective.CoupledTB, beta=1.5, partition_lr=0.25, estimator=GradientEstimator.Exact)
        state = CoupledState()
        for _ in range(100):
            coupled_step(theta, state, env.reference, q, spec, cfg, None)
        e = enumeration(env.space)
        rewards = np.array([1.0 if o in spec.trajectories else 0.0 for o in e.trajectories])
        probs = trajectory_probs(theta, q)
        log_ratio = np.log(trajectory_probs(env.reference, q)) - np.log(probs)
        self.assertAlmostEqual(state.value(q), float(np.sum(probs * (1.5 * rewards + log_ratio))), places=10)

    def test_sft_on_every_correct_answer_is_uniform(self):
        """ Test the cross-entropy fit spreads evenly over the correct set, unlike the tilted target. """
        space = TrajectorySpace(4, 1, stop=False)
        spec = RewardSpec(name='r', kind=RewardKind.ExplicitSet, trajectories=((0,), (1,), (2,)))
        q = Prompt(id='q', features=(0.0,), reward_spec_ref='r')
        reference = TabularPolicy(space, default=np.log([[0.5, 0.2, 0.1, 0.2]]))
        env = TrainingEnv(space=space, prompts=(q,), specs={'r': spec}, reference=reference)
        cfg = TrainConfig(objective=Objective.SupervisedCorrect, policy_lr=1.0, steps=2000)
        run = run_training(cfg, env, datasets={'q': [(0,), (1,), (2,)]})
        probs = trajectory_probs(run.final_policy, q)
        np.testing.assert_allclose(probs[:3], [1 / 3] * 3, atol=1e-2)
        target = exact_tilted_target(reference, q, spec, 4.0).target_probs
        self.assertGreater(np.max(np.abs(probs[:3] - target[:3] / np.sum(target[:3]))), 0.1)

    def test_exact_anchor_loss_never_increases(self):
        space, spec, q, reference = two_outcomes()
        env = TrainingEnv(space=space, prompts=(q,), specs={'r': spec}, reference=reference)
        cfg = TrainConfig(beta=1.0, policy_lr=0.5, steps=50, estimator=GradientEstimator.Exact)
        run = run_training(cfg, env, anchor=PartitionAnchor({'q': LN_1_5}))
        losses = [run.initial.loss] + [record.loss for record in run.records]
        self.assertAlmostEqual(losses[1], losses[0], places=12)
        for before, after in zip(losses, losses[1:]):
            self.assertLessEqual(after, before + 1e-15)
        self.assertLess(losses[-1], 1e-8)


class TestModeCollapse(unittest.TestCase):

    def setUp(self):
        self.env = heavy_and_light()
        self.q = self.env.prompts[0]
        self.spec = self.env.spec_of(self.q)
        self.log_z = exact_tilted_target(self.env.reference, self.q, self.spec, 4.0).log_Z

    def config(self, objective, seed):
        return TrainConfig(objective=objective, beta=4.0, group_size=16, policy_lr=0.1, steps=1500, seed=seed)

    def test_paired_seeds(self):
        """ Test reward maximization ends far from the target and with fewer distinct answers. """
        anchor = PartitionAnchor({'q': self.log_z})
        anchored_kl = []
        grpo_kl = []
        wins = 0
        for seed in range(5):
            anchored = run_training(self.config(Objective.AnchoredTB, seed), self.env, anchor=anchor).final
            grpo = run_training(self.config(Objective.GroupReward, seed), self.env).final
            anchored_kl.append(anchored.kl_rev)
            grpo_kl.append(grpo.kl_rev)
            wins += anchored.distinct_correct_at_k > grpo.distinct_correct_at_k
        self.assertGreaterEqual(np.mean(grpo_kl), 5.0 * np.mean(anchored_kl), (grpo_kl, anchored_kl))
        self.assertGreaterEqual(wins, 4)

    def test_target_has_more_distinct_answers(self):
        grpo = run_training(self.config(Objective.GroupReward, 0), self.env).final_policy
        target = tilt_policy(self.env.reference, self.q, self.spec, 4.0)
        self.assertGreater(
            distinct_correct_expected(target, self.q, self.spec, 8),
            distinct_correct_expected(grpo, self.q, self.spec, 8))

    def test_grpo_leaves_the_target(self):
        """ Test starting at the target, the correct mass rises while the distance to the target grows. """
        target = tilt_policy(self.env.reference, self.q, self.spec, 4.0)
        run = run_training(self.config(Objective.GroupReward, 1), self.env, initial_policy=target)
        self.assertLess(run.initial.kl_rev, 1e-12)
        self.assertGreater(run.final.mass_on_correct, run.initial.mass_on_correct)
        self.assertGreater(run.final.kl_rev, run.initial.kl_rev + 1e-2)
        correct = [run.initial.mass_on_correct] + [record.mass_on_correct for record in run.records]
        for before, after in zip(correct, correct[1:]):
            self.assertGreaterEqual(after, before - 1e-12)
