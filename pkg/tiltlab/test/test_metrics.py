__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import math
import unittest

import numpy as np

from tiltlab.definitions.definitions import RewardKind
from tiltlab.errors import DiversityError
from tiltlab.metrics import (
    DIVERSITY_COLUMNS,
    distinct_correct_expected,
    distinct_modes_expected,
    diversity_report,
    mass_on_correct,
    mode_entropy,
    pass_at_k_exact,
    pass_at_k_sampled,
)
from tiltlab.policy import TabularPolicy
from tiltlab.streams import stream
from tiltlab.trajectory_env import Prompt, Region, RewardSpec, TrajectorySpace


class TestMetrics(unittest.TestCase):

    def setUp(self):
        # Uniform over S, 0-S, 0-0, 0-1, 1-S, 1-0, 1-1 with masses 1/3 and 1/9
        self.space = TrajectorySpace(2, 2)
        self.q = Prompt(id='q', features=(0.0,), reward_spec_ref='r')
        self.policy = TabularPolicy.uniform(self.space)
        self.spec = RewardSpec(
            name='r', kind=RewardKind.ExplicitSet, trajectories=((2,), (0, 0), (1, 1)), stop_symbol=2)

    def test_mass_on_correct(self):
        self.assertAlmostEqual(mass_on_correct(self.policy, self.q, self.spec), 5 / 9, places=12)

    def test_pass_at_k(self):
        self.assertAlmostEqual(pass_at_k_exact(self.policy, self.q, self.spec, 1), 5 / 9, places=12)
        self.assertAlmostEqual(pass_at_k_exact(self.policy, self.q, self.spec, 3), 1 - (4 / 9) ** 3, places=12)

    def test_distinct_correct(self):
        expected = (1 - (2 / 3) ** 4) + 2 * (1 - (8 / 9) ** 4)
        self.assertAlmostEqual(distinct_correct_expected(self.policy, self.q, self.spec, 4), expected, places=12)
        self.assertAlmostEqual(distinct_correct_expected(self.policy, self.q, self.spec, 1), 5 / 9, places=12)

    def test_distinct_modes_of_regions(self):
        spec = RewardSpec(
            name='r', kind=RewardKind.MultiModalRegions, regions=(Region(prefix=(0,)), Region(prefix=(1,))),
            stop_symbol=2)
        # Each region holds three trajectories of mass 1/9
        expected = 2 * (1 - (2 / 3) ** 2)
        self.assertAlmostEqual(distinct_modes_expected(self.policy, self.q, spec, 2), expected, places=12)

    def test_mode_entropy(self):
        probs = np.array([3, 1, 1]) / 5
        self.assertAlmostEqual(
            mode_entropy(self.policy, self.q, self.spec), float(-np.sum(probs * np.log(probs))), places=12)

    def test_no_correct_mass(self):
        spec = RewardSpec(name='r', kind=RewardKind.ExplicitSet, trajectories=())
        with self.assertRaises(DiversityError):
            mode_entropy(self.policy, self.q, spec)
        report = diversity_report(self.policy, self.q, spec, 4)
        self.assertTrue(math.isnan(report.mode_entropy))
        self.assertEqual(report.distinct_correct_expected, 0.0)
        self.assertEqual(report.distinct_modes_expected, 0.0)
        self.assertEqual(report.pass_at_k, 0.0)

    def test_invalid_k(self):
        with self.assertRaises(ValueError):
            pass_at_k_exact(self.policy, self.q, self.spec, 0)

    def test_sampled_pass_at_k(self):
        """ Test the Monte Carlo estimate against the exact value. """
        sampled = pass_at_k_sampled(self.policy, self.q, self.spec, 2, stream(0, 'test-pass'), 20000)
        self.assertAlmostEqual(sampled, pass_at_k_exact(self.policy, self.q, self.spec, 2), delta=0.02)

    def test_report_columns(self):
        report = diversity_report(self.policy, self.q, self.spec, 4)
        self.assertListEqual(list(report.as_row()), DIVERSITY_COLUMNS)
        self.assertEqual(report.prompt_id, 'q')
