__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import math
import tempfile
import unittest

from pathlib import Path

import numpy as np

from tiltlab.amortizer import (
    Amortizer,
    PartitionAnchor,
    anchor_rmse,
    anchor_value,
    fit,
    label_manifest,
    predict,
    read_checkpoint,
    write_checkpoint,
)
from tiltlab.definitions.definitions import AmortizerKind
from tiltlab.errors import AmortizerError, ContractError
from tiltlab.streams import stream
from tiltlab.trajectory_env import Prompt


def linear_labels(count=40, noise=0.0):
    rng = stream(0, 'test-labels')
    labels = []
    for _ in range(count):
        x = rng.uniform(-1, 1, size=2)
        labels.append((tuple(float(v) for v in x), float(1.5 + 2.0 * x[0] - 0.5 * x[1] + noise * rng.normal())))
    return labels


class TestRidge(unittest.TestCase):

    def test_recovers_linear_map(self):
        g = fit(linear_labels(), ridge_lambda=0.0, split_seed=1)
        np.testing.assert_allclose(g.weights['coef'], [2.0, -0.5], atol=1e-9)
        self.assertAlmostEqual(float(g.weights['intercept']), 1.5, places=9)
        self.assertLess(g.train_mse, 1e-18)
        self.assertLess(g.val_mse, 1e-18)
        self.assertAlmostEqual(predict(g, (0.5, 0.0)), 2.5, places=9)
        self.assertTrue(g.frozen)

    def test_ridge_shrinks(self):
        labels = linear_labels(noise=0.1)
        small = fit(labels, ridge_lambda=1e-6)
        large = fit(labels, ridge_lambda=100.0)
        self.assertLess(np.linalg.norm(large.weights['coef']), np.linalg.norm(small.weights['coef']))

    def test_rank_deficient_without_penalty(self):
        labels = [((1.0, 1.0), 0.0), ((1.0, 1.0), 1.0), ((1.0, 1.0), 2.0)]
        with self.assertRaises(AmortizerError) as context:
            fit(labels, ridge_lambda=0.0, val_fraction=0.0)
        self.assertIn('ridge_lambda', str(context.exception))
        g = fit(labels, ridge_lambda=1e-3, val_fraction=0.0)
        self.assertTrue(math.isnan(g.val_mse))

    def test_invalid_labels(self):
        with self.assertRaises(AmortizerError):
            fit([((0.0,), 1.0)])
        with self.assertRaises(AmortizerError):
            fit([((0.0,), 1.0), ((0.0, 1.0), 1.0)])
        with self.assertRaises(AmortizerError):
            fit([((0.0,), 1.0), ((1.0,), float('inf'))])
        with self.assertRaises(AmortizerError):
            fit(linear_labels(), ridge_lambda=-1.0)

    def test_split_is_seeded(self):
        labels = linear_labels(noise=0.3)
        self.assertEqual(fit(labels, split_seed=4).val_mse, fit(labels, split_seed=4).val_mse)
        self.assertNotEqual(fit(labels, split_seed=4).val_mse, fit(labels, split_seed=5).val_mse)


class TestHiddenLayer(unittest.TestCase):

    def test_fits_a_curve(self):
        rng = stream(1, 'test-curve')
        labels = [((float(x),), float(np.sin(2 * x))) for x in rng.uniform(-1, 1, size=60)]
        g = fit(labels, kind=AmortizerKind.OneHiddenLayer, epochs=1500, learning_rate=1e-2, hidden_width=16)
        self.assertLess(g.train_mse, 0.05)
        self.assertEqual(len(g.val_curve), 1500)
        self.assertGreater(g.best_epoch, 0)
        self.assertAlmostEqual(g.val_mse, g.val_curve[g.best_epoch - 1], places=12)
        self.assertTrue(g.frozen)


class TestContract(unittest.TestCase):

    def test_frozen_is_read_only(self):
        g = fit(linear_labels())
        with self.assertRaises(ContractError):
            g.ridge_lambda = 1.0
        with self.assertRaises(ValueError):
            g.weights['coef'][0] = 0.0
        with self.assertRaises(TypeError):
            g.weights['coef'] = np.zeros(2)
        with self.assertRaises(TypeError):
            del g.weights['intercept']
        self.assertEqual(g.freeze(), g)

    def test_unfrozen_can_not_predict(self):
        g = Amortizer(
            kind=AmortizerKind.LinearRidge, feature_dim=1, weights={'coef': [1.0], 'intercept': 0.0},
            ridge_lambda=0.0, split_seed=0, train_mse=0.0, val_mse=0.0, label_manifest='')
        with self.assertRaises(ContractError):
            predict(g, (1.0,))
        g.freeze()
        self.assertEqual(predict(g, (2.0,)), 2.0)

    def test_feature_dimension(self):
        g = fit(linear_labels())
        with self.assertRaises(AmortizerError):
            predict(g, (1.0,))

    def test_label_manifest(self):
        labels = linear_labels(5)
        self.assertEqual(label_manifest(labels), label_manifest(list(labels)))
        self.assertNotEqual(label_manifest(labels), label_manifest(list(reversed(labels))))
        self.assertEqual(fit(labels).label_manifest, label_manifest(labels))


class TestAnchors(unittest.TestCase):

    def test_exact_anchor_with_offsets(self):
        q = Prompt(id='a', features=(0.0,), reward_spec_ref='r')
        anchor = PartitionAnchor.exact({'a': 1.0, 'b': 2.0}, -2.0)
        self.assertEqual(anchor_value(anchor, q), -1.0)
        anchor = PartitionAnchor.exact({'a': 1.0, 'b': 2.0}, {'a': 0.5})
        self.assertDictEqual(anchor.as_dict(), {'a': 1.5, 'b': 2.0})
        with self.assertRaises(AmortizerError):
            anchor_value(anchor, Prompt(id='c', features=(0.0,), reward_spec_ref='r'))

    def test_amortizer_anchor(self):
        g = fit(linear_labels(), ridge_lambda=0.0)
        prompts = [
            Prompt(id='a', features=(0.0, 0.0), reward_spec_ref='r'),
            Prompt(id='b', features=(1.0, 0.0), reward_spec_ref='r'),
        ]
        table = PartitionAnchor.from_amortizer(g, prompts)
        self.assertAlmostEqual(table.value(prompts[1]), 3.5, places=9)
        self.assertAlmostEqual(anchor_rmse(g, prompts, {'a': 1.5, 'b': 3.5}), 0.0, places=9)
        self.assertAlmostEqual(anchor_rmse(g, prompts, {'a': 2.5, 'b': 4.5}), 1.0, places=9)


class TestCheckpoint(unittest.TestCase):

    def test_write_and_read(self):
        for kind in AmortizerKind:
            with self.subTest(kind=kind.value):
                g = fit(linear_labels(), kind=kind, epochs=20)
                with tempfile.TemporaryDirectory() as tmp:
                    path = Path(tmp).joinpath('amortizer.ckpt')
                    write_checkpoint(g, path)
                    copy = read_checkpoint(path)
                self.assertTrue(copy.frozen)
                self.assertEqual(copy.kind, g.kind)
                self.assertEqual(copy.label_manifest, g.label_manifest)
                features = np.array([[0.1, 0.2], [-0.3, 0.9]])
                np.testing.assert_array_equal(copy.predict_many(features), g.predict_many(features))

    def test_not_a_checkpoint(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp).joinpath('x.ckpt')
            path.write_text('nothing\n', encoding='utf8')
            with self.assertRaises(AmortizerError):
                read_checkpoint(path)
