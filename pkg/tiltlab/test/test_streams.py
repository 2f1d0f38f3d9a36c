__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import unittest

import numpy as np

from tiltlab.streams import derive_seed, stream, stream_key


class TestStreams(unittest.TestCase):

    def test_same_labels_same_draws(self):
        np.testing.assert_array_equal(stream(3, 'q0', 'rollout', 5).random(4), stream(3, 'q0', 'rollout', 5).random(4))

    def test_labels_separate_streams(self):
        draws = {
            tuple(stream(*key).random(3))
            for key in ((3, 'q0', 'rollout', 5), (3, 'q0', 'rollout', 6), (3, 'q1', 'rollout', 5), (4, 'q0', 'rollout', 5))
        }
        self.assertEqual(len(draws), 4)

    def test_key(self):
        self.assertEqual(stream_key(3, 'q', 'stage1', 8), '3|q|stage1|8')

    def test_invalid(self):
        with self.assertRaises(ValueError):
            stream(-1)
        with self.assertRaises(ValueError):
            stream(0, -2)

    def test_derive_seed(self):
        self.assertEqual(derive_seed(1, 'reference'), derive_seed(1, 'reference'))
        self.assertNotEqual(derive_seed(1, 'reference'), derive_seed(2, 'reference'))
        self.assertGreaterEqual(derive_seed(1, 'reference'), 0)
