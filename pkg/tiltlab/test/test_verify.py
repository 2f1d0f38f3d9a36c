__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import math
import unittest

from unittest import mock

from tiltlab.tiltlab_api import verify
from tiltlab.tiltlab_api.config import parse_config

DOCUMENT = {
    'rewards': {'r': {'kind': 'explicit-set', 'trajectories': ['0-S']}},
    'prompts': [{'id': 'a', 'features': [0.0], 'reward': 'r'}],
}


def config(**verify_options):
    document = dict(DOCUMENT, verify=verify_options)
    return parse_config(document)


class TestChecks(unittest.TestCase):

    def test_counterexample(self):
        result = verify.check_two_outcome_counterexample(config())
        self.assertTrue(result.passed, result.detail)
        self.assertAlmostEqual(result.values['log_Z'], math.log(1.5), places=12)
        self.assertAlmostEqual(result.values['loss_target'], 4.0, places=12)
        self.assertEqual(result.as_row()['status'], 'pass')

    def test_linear_unbiasedness(self):
        result = verify.check_linear_unbiasedness(config(replications=5000))
        self.assertTrue(result.passed, result.detail)

    def test_geometric_mean_bias(self):
        result = verify.check_geometric_mean_bias(config(replications=100000))
        self.assertTrue(result.passed, result.detail)
        self.assertAlmostEqual(result.values['gm_4'], 0.5 * math.log(2.0) - math.log(1.5), delta=0.01)

    def test_off_by_one_fault_is_caught(self):
        """ Test dividing by N + 1 moves the geometric-mean bias out of its band. """
        result = verify.check_geometric_mean_bias(config(replications=20000, fault_injection='gm-off-by-one'))
        self.assertFalse(result.passed)
        self.assertEqual(result.as_row()['status'], 'fail')
        self.assertIn('Prop. 2', result.detail)
        self.assertTrue(result.detail.startswith('Prop. 2 does not hold: '))

    def test_checks_name_their_proposition(self):
        expected = {
            'two-outcome-counterexample': 'App. C.5',
            'geometric-mean-bias': 'Prop. 2',
            'biased-anchor-stationarity': 'Prop. 3(ii)',
        }
        results = [
            verify.check_two_outcome_counterexample(config()),
            verify.check_geometric_mean_bias(config(replications=2000)),
            verify.check_biased_anchor_stationarity(config(eta_mode='trajectory')),
        ]
        for result in results:
            with self.subTest(check=result.name):
                self.assertEqual(result.proposition, expected[result.name])
                self.assertEqual(result.as_row()['proposition'], expected[result.name])
                self.assertListEqual(list(result.as_row()), verify.REPORT_COLUMNS)

    def test_passing_detail_has_no_prefix(self):
        result = verify.check_two_outcome_counterexample(config())
        self.assertTrue(result.detail.startswith('log Z='))

    def test_stationarity(self):
        result = verify.check_biased_anchor_stationarity(config())
        self.assertTrue(result.passed, result.detail)
        self.assertAlmostEqual(result.values['off_policy'], 2.0 * math.sqrt(2.0) / 3.0, places=9)

    def test_stationarity_skipped_for_trajectory_offsets(self):
        result = verify.check_biased_anchor_stationarity(config(eta_mode='trajectory'))
        self.assertTrue(result.skipped)
        self.assertEqual(result.as_row()['status'], 'skipped')

    def test_envelope(self):
        for mode in ('prompt', 'trajectory'):
            with self.subTest(mode=mode):
                result = verify.check_anchor_error_envelope(config(envelope_draws=20, eta_mode=mode))
                self.assertTrue(result.passed, result.detail)
                self.assertEqual(result.values['violations'], 0)


class TestReport(unittest.TestCase):

    def test_failed_check_does_not_stop_the_others(self):
        def failing(_):
            return verify.CheckResult(name='failing', passed=False, detail='always')

        checks = (failing, verify.check_two_outcome_counterexample)
        with mock.patch.object(verify, 'CHECKS', checks):
            with self.assertLogs('Tiltlab', level='ERROR'):
                report = verify.verify_props(config())
        self.assertFalse(report.passed)
        self.assertListEqual([check.name for check in report.checks], ['failing', 'two-outcome-counterexample'])

    def test_skipped_check_passes(self):
        checks = (verify.check_biased_anchor_stationarity,)
        with mock.patch.object(verify, 'CHECKS', checks):
            report = verify.verify_props(config(eta_mode='trajectory'))
        self.assertTrue(report.passed)
