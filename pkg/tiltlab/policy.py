"""Full-prefix tabular softmax policies.

A policy holds, per prompt, one logit row for every token prefix shorter than the maximum
length. Rows are ordered by prefix length, then by the prefix read as a base-V number.
Logits are clamped to [-40, 40] before any softmax, the only deviation from an exact softmax.
"""

__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import itertools
import logging

from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from scipy.special import log_softmax, softmax

from tiltlab.definitions.definitions import LOGIT_CLAMP, TOKEN_SEPARATOR
from tiltlab.errors import InvalidTrajectoryError, TiltlabError
from tiltlab.streams import stream
from tiltlab.tools import atomic_write_text
from tiltlab.trajectory_env import (
    Prompt,
    RewardSpec,
    Trajectory,
    TrajectorySpace,
    check_trajectory,
    enumeration,
    reward_table,
)

LOGGER = logging.getLogger('Tiltlab')

POLICY_HEADER = '# tiltlab policy'
EMPTY_PREFIX = '.'


class TabularPolicy:

    """ Immutable per-prompt logit tables.

    A policy built without per-prompt tables uses its default table for every prompt.
    """

    def __init__(
            self,
            space: TrajectorySpace,
            tables: Optional[Dict[str, np.ndarray]] = None,
            default: Optional[np.ndarray] = None,
            name: str = ''):
        self.space = space
        self.name = name
        shape = (space.prefix_count, space.symbol_count)
        self._tables = {}
        for prompt_id, table in (tables or {}).items():
            self._tables[prompt_id] = self._frozen(table, shape)
        self._default = self._frozen(default, shape) if default is not None else None
        self._log_prob_cache = {}

    @staticmethod
    def _frozen(table, shape) -> np.ndarray:
        table = np.array(table, dtype=np.float64)
        if table.shape != shape:
            raise ValueError('Logit table of shape {} expected, got {}'.format(shape, table.shape))
        table.setflags(write=False)
        return table

    @classmethod
    def uniform(cls, space: TrajectorySpace, name: str = 'uniform') -> 'TabularPolicy':
        return cls(space, default=np.zeros((space.prefix_count, space.symbol_count)), name=name)

    @classmethod
    def seeded(
            cls, space: TrajectorySpace, prompts: Iterable[Prompt], seed: int, scale: float = 1.0,
            name: str = 'seeded') -> 'TabularPolicy':
        """ Gaussian logits, one independent stream per prompt. """
        shape = (space.prefix_count, space.symbol_count)
        tables = {
            q.id: scale * stream(seed, 'reference-logits', q.id).standard_normal(shape) for q in prompts
        }
        return cls(space, tables=tables, name=name)

    @property
    def prompt_ids(self) -> List[str]:
        return sorted(self._tables.keys())

    def logits(self, q: Union[Prompt, str]) -> np.ndarray:
        prompt_id = q.id if isinstance(q, Prompt) else q
        table = self._tables.get(prompt_id, self._default)
        if table is None:
            raise TiltlabError('The policy "{}" has no table for prompt "{}"'.format(self.name, prompt_id))
        return table

    def clamped_logits(self, q: Union[Prompt, str]) -> np.ndarray:
        return np.clip(self.logits(q), -LOGIT_CLAMP, LOGIT_CLAMP)

    def conditionals(self, q: Union[Prompt, str]) -> np.ndarray:
        """ Next-symbol distribution of every prefix row. """
        return softmax(self.clamped_logits(q), axis=1)

    def with_table(self, q: Union[Prompt, str], logits: np.ndarray, name: Optional[str] = None) -> 'TabularPolicy':
        """ A new policy where the table of one prompt is replaced. """
        prompt_id = q.id if isinstance(q, Prompt) else q
        tables = dict(self._tables)
        tables[prompt_id] = logits
        return TabularPolicy(self.space, tables=tables, default=self._default, name=name or self.name)

    def with_tables(self, tables: Dict[str, np.ndarray], name: Optional[str] = None) -> 'TabularPolicy':
        merged = dict(self._tables)
        merged.update(tables)
        return TabularPolicy(self.space, tables=merged, default=self._default, name=name or self.name)

    def __getstate__(self):
        state = dict(self.__dict__)
        state['_log_prob_cache'] = {}
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        for table in list(self._tables.values()) + ([self._default] if self._default is not None else []):
            table.setflags(write=False)


def log_prob_table(policy: TabularPolicy, q: Prompt) -> np.ndarray:
    """ Log-probability of every trajectory, in enumeration order. """
    table = policy.logits(q)
    cached = policy._log_prob_cache.get(q.id)
    if cached is not None and cached[0] is table:
        return cached[1]

    e = enumeration(policy.space)
    log_conditionals = log_softmax(policy.clamped_logits(q), axis=1)
    steps = log_conditionals[e.visit_row, e.visit_symbol]
    values = np.bincount(e.visit_trajectory, weights=steps, minlength=len(e))
    values.setflags(write=False)
    policy._log_prob_cache[q.id] = (table, values)
    return values


def trajectory_probs(policy: TabularPolicy, q: Prompt) -> np.ndarray:
    return np.exp(log_prob_table(policy, q))


def _visits(space: TrajectorySpace, o: Trajectory):
    """ (row, symbol) pairs visited by a trajectory. """
    number = 0
    for position, symbol in enumerate(o):
        yield space.prefix_offset(position) + number, symbol
        if symbol != space.stop_symbol:
            number = number * space.alphabet_size + symbol


def log_prob(policy: TabularPolicy, q: Prompt, o: Trajectory) -> float:
    """ Sum of the per-step log-softmax terms of a trajectory. """
    o = tuple(o)
    check_trajectory(policy.space, o)
    log_conditionals = log_softmax(policy.clamped_logits(q), axis=1)
    return float(sum(log_conditionals[row, symbol] for row, symbol in _visits(policy.space, o)))


def sample_indices(policy: TabularPolicy, q: Prompt, rng: np.random.Generator, n: int) -> np.ndarray:
    """ Ancestral samples, returned as enumeration indices.

    One uniform number is drawn per sample and per position, whether or not the sample has
    already stopped, so the draw count never depends on the policy.
    """
    if n < 1:
        raise ValueError('The sample count must be at least 1, got {}'.format(n))
    space = policy.space
    cumulative = np.cumsum(policy.conditionals(q), axis=1)
    last = space.symbol_count - 1

    number = np.zeros(n, dtype=np.int64)
    index = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for position in range(space.max_len):
        rows = space.prefix_offset(position) + number
        u = rng.random(n)
        choice = np.minimum((u[:, None] >= cumulative[rows]).sum(axis=1), last)
        if space.stop:
            stopping = active & (choice == space.stop_symbol)
            active &= ~stopping
            index[active] += 1 + choice[active] * space.completions(position + 1)
        else:
            index[active] += choice[active] * space.completions(position + 1)
        number[active] = number[active] * space.alphabet_size + choice[active]
    return index


def sample(policy: TabularPolicy, q: Prompt, rng: np.random.Generator, n: int) -> List[Trajectory]:
    """ i.i.d. ancestral samples. """
    trajectories = enumeration(policy.space).trajectories
    return [trajectories[i] for i in sample_indices(policy, q, rng, n)]


def score_gradient(policy: TabularPolicy, q: Prompt, o: Trajectory) -> np.ndarray:
    """ Gradient of log pi(o|q) with respect to the logit table of q. """
    o = tuple(o)
    check_trajectory(policy.space, o)
    conditionals = policy.conditionals(q)
    gradient = np.zeros_like(conditionals)
    for row, symbol in _visits(policy.space, o):
        gradient[row] -= conditionals[row]
        gradient[row, symbol] += 1.0
    return gradient


def weighted_score_gradient(policy: TabularPolicy, q: Prompt, coefficients: np.ndarray) -> np.ndarray:
    """ Sum over the enumeration of coefficients[o] * grad log pi(o|q). """
    e = enumeration(policy.space)
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape != (len(e),):
        raise ValueError('One coefficient per trajectory expected, got shape {}'.format(coefficients.shape))
    conditionals = policy.conditionals(q)
    weights = coefficients[e.visit_trajectory]
    gradient = np.zeros_like(conditionals)
    np.add.at(gradient, (e.visit_row, e.visit_symbol), weights)
    row_weights = np.bincount(e.visit_row, weights=weights, minlength=conditionals.shape[0])
    gradient -= row_weights[:, None] * conditionals
    return gradient


def tilted_logits(base: TabularPolicy, q: Prompt, log_tilt: np.ndarray) -> np.ndarray:
    """ Logits of the policy proportional to base(o) * exp(log_tilt[o]).

    Edge masses are summed over the trajectories through each (prefix, symbol) edge, the
    conditionals are edge mass over prefix mass. Unreachable rows keep the base conditionals.
    """
    e = enumeration(base.space)
    log_weights = log_prob_table(base, q) + np.asarray(log_tilt, dtype=np.float64)
    weights = np.exp(log_weights - np.max(log_weights))

    conditionals = base.conditionals(q)
    edge = np.zeros_like(conditionals)
    np.add.at(edge, (e.visit_row, e.visit_symbol), weights[e.visit_trajectory])
    totals = edge.sum(axis=1)
    reachable = totals > 0
    tilted = conditionals.copy()
    tilted[reachable] = edge[reachable] / totals[reachable, None]
    with np.errstate(divide='ignore'):
        logits = np.log(tilted)
    return np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)


def tilt_policy(base: TabularPolicy, q: Prompt, spec: RewardSpec, strength: float) -> TabularPolicy:
    """ The exact policy proportional to base(o) * exp(strength * r(q, o)) for prompt q. """
    logits = tilted_logits(base, q, strength * reward_table(spec, q, base.space))
    return base.with_table(q, logits, name='{}-tilt-{}'.format(base.name, strength))


def prefixes(space: TrajectorySpace) -> List[Trajectory]:
    """ Token prefixes in row order. """
    output = []
    for length in range(space.max_len):
        output.extend(itertools.product(range(space.alphabet_size), repeat=length))
    return output


def _format_prefix(prefix: Trajectory) -> str:
    return TOKEN_SEPARATOR.join(str(token) for token in prefix) if prefix else EMPTY_PREFIX


def write_policy(policy: TabularPolicy, prompts: Iterable[Prompt], path: Union[str, Path], seed: int):
    """ Flat table file: a commented header, then one 'prompt,prefix,symbol,logit' line per entry. """
    space = policy.space
    lines = [
        POLICY_HEADER,
        '# alphabet_size={}'.format(space.alphabet_size),
        '# max_len={}'.format(space.max_len),
        '# stop={}'.format('true' if space.stop else 'false'),
        '# seed={}'.format(seed),
        '# name={}'.format(policy.name),
        'prompt_id,prefix,symbol,logit',
    ]
    rows = prefixes(space)
    for q in prompts:
        table = policy.logits(q)
        for row, prefix in enumerate(rows):
            for symbol in range(space.symbol_count):
                lines.append('{},{},{},{}'.format(q.id, _format_prefix(prefix), symbol, repr(float(table[row, symbol]))))
    atomic_write_text(path, '\n'.join(lines) + '\n')


def read_policy(path: Union[str, Path]) -> TabularPolicy:
    """ Read a file written by write_policy. """
    header = {}
    tables = {}
    with open(path, encoding='utf8') as f:
        first = f.readline().rstrip('\n')
        if first != POLICY_HEADER:
            raise InvalidTrajectoryError('"{}" is not a policy file'.format(path))
        for line in f:
            line = line.rstrip('\n')
            if line.startswith('#'):
                key, _, value = line[1:].strip().partition('=')
                header[key] = value
                continue
            if line == 'prompt_id,prefix,symbol,logit' or not line:
                continue
            prompt_id, prefix, symbol, logit = line.rsplit(',', 3)
            tables.setdefault(prompt_id, []).append((prefix, int(symbol), float(logit)))

    space = TrajectorySpace(
        alphabet_size=int(header['alphabet_size']),
        max_len=int(header['max_len']),
        stop=header['stop'] == 'true',
    )
    row_of = {_format_prefix(prefix): row for row, prefix in enumerate(prefixes(space))}
    arrays = {}
    for prompt_id, entries in tables.items():
        table = np.zeros((space.prefix_count, space.symbol_count))
        for prefix, symbol, logit in entries:
            table[row_of[prefix], symbol] = logit
        arrays[prompt_id] = table
    return TabularPolicy(space, tables=arrays, name=header.get('name', ''))
