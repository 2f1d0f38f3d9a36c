"""Least-squares amortization of the offline labels into a frozen prompt-feature regressor."""

__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import logging

from pathlib import Path
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from tiltlab.definitions.definitions import (
    DEFAULT_HIDDEN_WIDTH,
    DEFAULT_RIDGE_LAMBDA,
    VAL_FRACTION,
    AmortizerKind,
)
from tiltlab.errors import AmortizerError, ContractError
from tiltlab.logger import profiling
from tiltlab.streams import stream
from tiltlab.tools import atomic_write_text, sha256_bytes
from tiltlab.trajectory_env import Prompt

LOGGER = logging.getLogger('Tiltlab')

CHECKPOINT_HEADER = '# tiltlab amortizer'

DEFAULT_EPOCHS = 2000
DEFAULT_LEARNING_RATE = 1e-2

Label = Tuple[Sequence[float], float]


class Amortizer:

    """ A prompt-feature regressor.

    Once frozen, neither the attributes nor the weight mapping can be changed and predict is a pure function.
    """

    def __init__(
            self, kind: AmortizerKind, feature_dim: int, weights: Dict[str, np.ndarray], ridge_lambda: float,
            split_seed: int, train_mse: float, val_mse: float, label_manifest: str,
            val_curve: Tuple[float, ...] = (), best_epoch: Optional[int] = None):
        self.kind = kind
        self.feature_dim = feature_dim
        self.weights = {}
        for name, value in weights.items():
            array = np.array(value, dtype=np.float64)
            array.setflags(write=False)
            self.weights[name] = array
        self.ridge_lambda = ridge_lambda
        self.split_seed = split_seed
        self.train_mse = train_mse
        self.val_mse = val_mse
        self.label_manifest = label_manifest
        self.val_curve = tuple(val_curve)
        self.best_epoch = best_epoch
        self.frozen = False

    def __setattr__(self, key, value):
        if getattr(self, 'frozen', False):
            raise ContractError('The amortizer is frozen, "{}" can not be changed'.format(key))
        super().__setattr__(key, value)

    def freeze(self) -> 'Amortizer':
        if not self.frozen:
            self.weights = MappingProxyType(dict(self.weights))
            self.frozen = True
        return self

    def _forward(self, features: np.ndarray) -> np.ndarray:
        if self.kind == AmortizerKind.LinearRidge:
            return features @ self.weights['coef'] + self.weights['intercept']
        hidden = np.tanh(features @ self.weights['hidden'] + self.weights['hidden_bias'])
        return hidden @ self.weights['output'] + self.weights['output_bias']

    def predict_many(self, features) -> np.ndarray:
        if not self.frozen:
            raise ContractError('The amortizer must be frozen before it is queried')
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if features.shape[1] != self.feature_dim:
            raise AmortizerError(
                'Features of dimension {} expected, got {}'.format(self.feature_dim, features.shape[1]))
        return self._forward(features)


def predict(g: Amortizer, features: Sequence[float]) -> float:
    """ Frozen prediction for one feature vector. """
    return float(g.predict_many([features])[0])


def label_manifest(labels: Sequence[Label]) -> str:
    """ Hash of the label set, order included. """
    lines = []
    for features, value in labels:
        lines.append('{}|{}'.format(' '.join(repr(float(x)) for x in features), repr(float(value))))
    return sha256_bytes('\n'.join(lines).encode('utf8'))


def _split(n: int, val_fraction: float, split_seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """ Seeded shuffle, then the first share goes to validation. """
    n_val = max(1, int(round(val_fraction * n))) if val_fraction > 0 else 0
    if n - n_val < 2:
        n_val = 0
    order = stream(split_seed, 'amortizer-split').permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _fit_ridge(x: np.ndarray, y: np.ndarray, ridge_lambda: float) -> Dict[str, np.ndarray]:
    """ Solve (X'X + lambda D) b = X'y, D the identity without the intercept entry. """
    design = np.c_[np.ones(x.shape[0]), x]
    if ridge_lambda == 0 and np.linalg.matrix_rank(design) < design.shape[1]:
        raise AmortizerError(
            'The design matrix is rank deficient ({} labels, {} features), use a positive ridge_lambda'.format(
                x.shape[0], x.shape[1]))
    penalty = ridge_lambda * np.eye(design.shape[1])
    penalty[0, 0] = 0.0
    coefficients = np.linalg.solve(design.T @ design + penalty, design.T @ y)
    return {'intercept': np.array(coefficients[0]), 'coef': coefficients[1:]}


def _fit_hidden_layer(
        x: np.ndarray, y: np.ndarray, x_val: np.ndarray, y_val: np.ndarray, width: int, epochs: int,
        learning_rate: float, seed: int) -> Tuple[Dict[str, np.ndarray], List[float], int]:
    """ tanh hidden layer, full-batch Adam, best validation epoch kept. """
    rng = stream(seed, 'amortizer-init')
    d = x.shape[1]
    params = {
        'hidden': rng.standard_normal((d, width)) / np.sqrt(max(d, 1)),
        'hidden_bias': np.zeros(width),
        'output': rng.standard_normal(width) / np.sqrt(width),
        'output_bias': np.array(float(np.mean(y))),
    }
    first = {name: np.zeros_like(value) for name, value in params.items()}
    second = {name: np.zeros_like(value) for name, value in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def forward(p, features):
        hidden = np.tanh(features @ p['hidden'] + p['hidden_bias'])
        return hidden, hidden @ p['output'] + p['output_bias']

    def score(p):
        if x_val.shape[0]:
            return float(np.mean((forward(p, x_val)[1] - y_val) ** 2))
        return float(np.mean((forward(p, x)[1] - y) ** 2))

    best = {name: value.copy() for name, value in params.items()}
    best_score = score(params)
    best_epoch = 0
    curve = []
    for epoch in range(1, epochs + 1):
        hidden, prediction = forward(params, x)
        error = 2.0 * (prediction - y) / x.shape[0]
        back = np.outer(error, params['output']) * (1.0 - hidden ** 2)
        gradients = {
            'output': hidden.T @ error,
            'output_bias': np.array(error.sum()),
            'hidden': x.T @ back,
            'hidden_bias': back.sum(axis=0),
        }
        for name, gradient in gradients.items():
            first[name] = beta1 * first[name] + (1 - beta1) * gradient
            second[name] = beta2 * second[name] + (1 - beta2) * gradient ** 2
            corrected_first = first[name] / (1 - beta1 ** epoch)
            corrected_second = second[name] / (1 - beta2 ** epoch)
            params[name] = params[name] - learning_rate * corrected_first / (np.sqrt(corrected_second) + eps)

        current = score(params)
        curve.append(current)
        if current < best_score:
            best_score = current
            best_epoch = epoch
            best = {name: value.copy() for name, value in params.items()}
    return best, curve, best_epoch


@profiling
def fit(
        labels: Sequence[Label],
        kind: AmortizerKind = AmortizerKind.LinearRidge,
        ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
        split_seed: int = 0,
        val_fraction: float = VAL_FRACTION,
        epochs: int = DEFAULT_EPOCHS,
        learning_rate: float = DEFAULT_LEARNING_RATE,
        hidden_width: int = DEFAULT_HIDDEN_WIDTH) -> Amortizer:
    """ Fit on a seeded training split, report train and validation MSE, return it frozen. """
    if ridge_lambda < 0:
        raise AmortizerError('ridge_lambda must be non-negative, got {}'.format(ridge_lambda))
    if len(labels) < 2:
        raise AmortizerError('At least 2 training labels are needed, got {}'.format(len(labels)))
    dims = {len(features) for features, _ in labels}
    if len(dims) != 1:
        raise AmortizerError('Inconsistent feature dimensions {}'.format(sorted(dims)))
    feature_dim = dims.pop()

    x = np.array([features for features, _ in labels], dtype=np.float64).reshape(len(labels), feature_dim)
    y = np.array([value for _, value in labels], dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise AmortizerError('Labels must be finite to be regressed')
    train, val = _split(len(labels), val_fraction, split_seed)

    curve = ()
    best_epoch = None
    if kind == AmortizerKind.LinearRidge:
        weights = _fit_ridge(x[train], y[train], ridge_lambda)
    else:
        weights, curve, best_epoch = _fit_hidden_layer(
            x[train], y[train], x[val], y[val], hidden_width, epochs, learning_rate, split_seed)

    g = Amortizer(
        kind=kind,
        feature_dim=feature_dim,
        weights=weights,
        ridge_lambda=ridge_lambda,
        split_seed=split_seed,
        train_mse=float('nan'),
        val_mse=float('nan'),
        label_manifest=label_manifest(labels),
        val_curve=curve,
        best_epoch=best_epoch,
    )
    g.train_mse = float(np.mean((g._forward(x[train]) - y[train]) ** 2))
    if val.size:
        g.val_mse = float(np.mean((g._forward(x[val]) - y[val]) ** 2))
    else:
        LOGGER.warning('Too few labels for a validation split, val_mse is not available')
    LOGGER.info('Amortizer {} fitted, train MSE {}, val MSE {}'.format(kind.value, g.train_mse, g.val_mse))
    return g.freeze()


class PartitionAnchor:

    """ A frozen per-prompt table of log-partition values. """

    def __init__(self, values: Mapping[str, float]):
        self._values = dict(values)

    @classmethod
    def from_amortizer(cls, g: Amortizer, prompts: Iterable[Prompt]) -> 'PartitionAnchor':
        return cls({q.id: predict(g, q.features) for q in prompts})

    @classmethod
    def exact(
            cls, exact_log_z: Mapping[str, float],
            offsets: Union[float, Mapping[str, float]] = 0.0) -> 'PartitionAnchor':
        """ Exact values, optionally shifted by a constant or per-prompt offset. """
        if isinstance(offsets, Mapping):
            return cls({key: value + offsets.get(key, 0.0) for key, value in exact_log_z.items()})
        return cls({key: value + offsets for key, value in exact_log_z.items()})

    def value(self, q: Prompt) -> float:
        try:
            return self._values[q.id]
        except KeyError:
            raise AmortizerError('No anchor value for prompt "{}"'.format(q.id))

    def as_dict(self) -> Dict[str, float]:
        return dict(self._values)


def anchor_value(g: Union[Amortizer, PartitionAnchor], q: Prompt) -> float:
    if isinstance(g, PartitionAnchor):
        return g.value(q)
    return predict(g, q.features)


def anchor_rmse(
        g: Union[Amortizer, PartitionAnchor], prompts: Sequence[Prompt], oracle_logZ: Mapping[str, float]) -> float:
    """ Root mean square of g(q) - log Z(q) over the prompts. """
    errors = np.array([anchor_value(g, q) - oracle_logZ[q.id] for q in prompts], dtype=np.float64)
    return float(np.sqrt(np.mean(errors ** 2)))


def write_checkpoint(g: Amortizer, path: Union[str, Path]):
    """ Line oriented 'key=value' file, weights as 'weight name shape values'. """
    if not g.frozen:
        raise ContractError('Only frozen amortizers are written')
    lines = [
        CHECKPOINT_HEADER,
        'kind={}'.format(g.kind.value),
        'feature_dim={}'.format(g.feature_dim),
        'ridge_lambda={}'.format(repr(float(g.ridge_lambda))),
        'split_seed={}'.format(g.split_seed),
        'train_mse={}'.format(repr(float(g.train_mse))),
        'val_mse={}'.format(repr(float(g.val_mse))),
        'best_epoch={}'.format('' if g.best_epoch is None else g.best_epoch),
        'label_manifest={}'.format(g.label_manifest),
    ]
    for name in sorted(g.weights):
        value = g.weights[name]
        lines.append('weight {} {} {}'.format(
            name,
            'x'.join(str(n) for n in value.shape) or 'scalar',
            ' '.join(repr(float(v)) for v in value.ravel())))
    atomic_write_text(path, '\n'.join(lines) + '\n')


def read_checkpoint(path: Union[str, Path]) -> Amortizer:
    """ Read a checkpoint, the result is frozen. """
    fields = {}
    weights = {}
    with open(path, encoding='utf8') as f:
        if f.readline().rstrip('\n') != CHECKPOINT_HEADER:
            raise AmortizerError('"{}" is not an amortizer checkpoint'.format(path))
        for line in f:
            line = line.rstrip('\n')
            if not line:
                continue
            if line.startswith('weight '):
                _, name, shape, *values = line.split(' ')
                shape = () if shape == 'scalar' else tuple(int(n) for n in shape.split('x'))
                weights[name] = np.array([float(v) for v in values], dtype=np.float64).reshape(shape)
                continue
            key, _, value = line.partition('=')
            fields[key] = value

    return Amortizer(
        kind=AmortizerKind.find(fields['kind']),
        feature_dim=int(fields['feature_dim']),
        weights=weights,
        ridge_lambda=float(fields['ridge_lambda']),
        split_seed=int(fields['split_seed']),
        train_mse=float(fields['train_mse']),
        val_mse=float(fields['val_mse']),
        label_manifest=fields['label_manifest'],
        best_epoch=int(fields['best_epoch']) if fields.get('best_epoch') else None,
    ).freeze()
