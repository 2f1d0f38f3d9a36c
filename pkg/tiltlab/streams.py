"""Counter-based random streams.

Every random draw in Tiltlab comes from a Philox generator keyed by the global seed
and a tuple of labels (prompt id, purpose, step ...). Two streams with different labels
never share state, so per-prompt work gives the same result whatever the order or the
worker it runs in.
"""

__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import hashlib

from typing import Union

import numpy as np

Label = Union[str, int]


def _word(label: Label) -> int:
    """ Map a label to a 32 bits word, stable across platforms and interpreters. """
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        if label < 0:
            raise ValueError('Integer stream labels must be non-negative, got {}'.format(label))
        return int(label)
    digest = hashlib.sha256(str(label).encode('utf8')).digest()
    return int.from_bytes(digest[:4], 'little')


def stream_key(seed: int, *labels: Label) -> str:
    """ Human readable record of a stream, enough to rebuild it. """
    return '|'.join([str(int(seed))] + [str(label) for label in labels])


def stream(seed: int, *labels: Label) -> np.random.Generator:
    """ Return the generator for the given seed and labels. """
    if seed < 0:
        raise ValueError('The global seed must be non-negative, got {}'.format(seed))
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_word(label) for label in labels))
    return np.random.Generator(np.random.Philox(sequence))


def derive_seed(seed: int, *labels: Label) -> int:
    """ A 63 bits seed derived from a stream, used to hand a seed to another component. """
    return int(stream(seed, 'derive', *labels).integers(0, 2 ** 63 - 1))
