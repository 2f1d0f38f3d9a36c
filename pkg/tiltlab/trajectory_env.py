"""Enumerable trajectory spaces, prompts and verifier rewards.

A trajectory is a tuple of symbol indices. Tokens are 0..V-1 and, when the space is
STOP-terminated, the STOP symbol is V. Trajectories are ordered lexicographically with
STOP before every token, which is also the enumeration order used by every table in
Tiltlab: a per-trajectory table is a numpy vector indexed like `enumerate_trajectories`.
"""

__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import functools
import hashlib
import logging

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from tiltlab.definitions.definitions import (
    BINARY_REWARD_KINDS,
    ENUMERATION_CAP,
    EPS_FLOOR,
    STOP_LABEL,
    TOKEN_SEPARATOR,
    RewardKind,
)
from tiltlab.errors import (
    EnumerationCapError,
    InvalidGroupError,
    InvalidTrajectoryError,
    RewardConfigError,
)

LOGGER = logging.getLogger('Tiltlab')

Trajectory = Tuple[int, ...]


@dataclass(frozen=True)
class TrajectorySpace:

    """ Finite alphabet, bounded length. """

    alphabet_size: int
    max_len: int
    stop: bool = True
    enumeration_cap: int = ENUMERATION_CAP

    def __post_init__(self):
        if self.alphabet_size < 1:
            raise ValueError('The alphabet size must be at least 1, got {}'.format(self.alphabet_size))
        if self.max_len < 1:
            raise ValueError('The maximum length must be at least 1, got {}'.format(self.max_len))

    @property
    def stop_symbol(self) -> Optional[int]:
        return self.alphabet_size if self.stop else None

    @property
    def symbol_count(self) -> int:
        """ Width of a policy row. """
        return self.alphabet_size + 1 if self.stop else self.alphabet_size

    def prefix_offset(self, length: int) -> int:
        """ Number of prefixes strictly shorter than the given length. """
        return sum(self.alphabet_size ** i for i in range(length))

    @property
    def prefix_count(self) -> int:
        return self.prefix_offset(self.max_len)

    def prefix_index(self, prefix: Sequence[int]) -> int:
        """ Row of a token prefix in a policy table. """
        number = 0
        for token in prefix:
            number = number * self.alphabet_size + token
        return self.prefix_offset(len(prefix)) + number

    def completions(self, length: int) -> int:
        """ Number of complete trajectories extending a token prefix of the given length. """
        remaining = self.max_len - length
        if not self.stop:
            return self.alphabet_size ** remaining
        return sum(self.alphabet_size ** i for i in range(remaining)) + self.alphabet_size ** remaining

    def count(self) -> int:
        """ Closed form number of complete trajectories. """
        return self.completions(0)


@dataclass(frozen=True)
class Prompt:

    """ A prompt, its amortizer features and its fixed affine reward transform. """

    id: str
    features: Tuple[float, ...]
    reward_spec_ref: str
    affine_a: float = 1.0
    affine_b: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'features', tuple(float(value) for value in self.features))
        if not self.affine_a > 0:
            raise RewardConfigError(
                'The affine scale of prompt "{}" must be positive, got {}'.format(self.id, self.affine_a))


@dataclass(frozen=True)
class Region:

    """ Trajectories starting with a token prefix, optionally with an exact token count. """

    prefix: Trajectory
    token_length: Optional[int] = None

    def contains(self, o: Trajectory, stop_symbol: Optional[int]) -> bool:
        tokens = o[:-1] if (stop_symbol is not None and o and o[-1] == stop_symbol) else o
        if tuple(tokens[:len(self.prefix)]) != tuple(self.prefix):
            return False
        if self.token_length is not None and len(tokens) != self.token_length:
            return False
        return True


@dataclass(frozen=True)
class RewardSpec:

    """ A deterministic verifier.

    Only the fields of the given kind are read.
    """

    name: str
    kind: RewardKind
    trajectories: Tuple[Trajectory, ...] = ()
    values: Tuple[Tuple[Trajectory, float], ...] = ()
    density: float = 0.5
    seed: int = 0
    regions: Tuple[Region, ...] = ()
    stop_symbol: Optional[int] = None

    def __post_init__(self):
        if self.kind == RewardKind.SeededHashDensity and not 0.0 < self.density < 1.0:
            raise RewardConfigError(
                'The density of reward "{}" must be in (0, 1), got {}'.format(self.name, self.density))

    @property
    def is_binary(self) -> bool:
        return self.kind in BINARY_REWARD_KINDS


@dataclass(eq=False)
class Enumeration:

    """ Everything the exact tables need about a space, computed once. """

    space: TrajectorySpace
    trajectories: Tuple[Trajectory, ...]
    token_lengths: np.ndarray
    # One entry per (trajectory, step) visit of a policy row
    visit_trajectory: np.ndarray
    visit_row: np.ndarray
    visit_symbol: np.ndarray
    index: Dict[Trajectory, int] = field(repr=False)

    def __len__(self) -> int:
        return len(self.trajectories)


def format_trajectory(o: Trajectory, space: TrajectorySpace) -> str:
    """ Hyphen joined token indices, STOP written as 'S'. """
    return TOKEN_SEPARATOR.join(
        STOP_LABEL if symbol == space.stop_symbol else str(symbol) for symbol in o)


def parse_trajectory(text: str, space: TrajectorySpace) -> Trajectory:
    """ Parse the text form written by format_trajectory. """
    symbols = []
    for part in text.strip().split(TOKEN_SEPARATOR):
        if part == STOP_LABEL:
            if not space.stop:
                raise InvalidTrajectoryError('The space has no STOP symbol : "{}"'.format(text))
            symbols.append(space.stop_symbol)
        else:
            try:
                symbols.append(int(part))
            except ValueError:
                raise InvalidTrajectoryError('Malformed trajectory "{}"'.format(text))
    o = tuple(symbols)
    check_trajectory(space, o)
    return o


def check_trajectory(space: TrajectorySpace, o: Trajectory):
    """ Raise if the trajectory is not a complete trajectory of the space. """
    if not o:
        raise InvalidTrajectoryError('Empty trajectory')
    for position, symbol in enumerate(o):
        if not 0 <= symbol < space.symbol_count:
            raise InvalidTrajectoryError('Symbol {} out of range in {}'.format(symbol, o))
        if symbol == space.stop_symbol and position != len(o) - 1:
            raise InvalidTrajectoryError('STOP before the end in {}'.format(o))
    stopped = space.stop and o[-1] == space.stop_symbol
    tokens = len(o) - 1 if stopped else len(o)
    if stopped and tokens >= space.max_len:
        raise InvalidTrajectoryError('Too many tokens before STOP in {}'.format(o))
    if not stopped and tokens != space.max_len:
        raise InvalidTrajectoryError('Trajectory {} is not complete'.format(o))


def _generate(space: TrajectorySpace) -> List[Trajectory]:
    """ Depth first generation, STOP before tokens at every prefix. """
    output = []
    prefix = []

    def extend():
        if len(prefix) == space.max_len:
            output.append(tuple(prefix))
            return
        if space.stop:
            output.append(tuple(prefix) + (space.stop_symbol,))
        for token in range(space.alphabet_size):
            prefix.append(token)
            extend()
            prefix.pop()

    extend()
    return output


@functools.lru_cache(maxsize=32)
def enumeration(space: TrajectorySpace) -> Enumeration:
    """ Enumerate the space with the visit tables of every trajectory. """
    count = space.count()
    if count > space.enumeration_cap:
        raise EnumerationCapError(
            'The space V={}, T={} has {} trajectories, above the enumeration cap {}'.format(
                space.alphabet_size, space.max_len, count, space.enumeration_cap))

    trajectories = _generate(space)
    if len(trajectories) != count:
        raise RuntimeError('Enumeration yields {} trajectories, expected {}'.format(len(trajectories), count))

    visit_trajectory = []
    visit_row = []
    visit_symbol = []
    token_lengths = np.empty(count, dtype=np.int64)
    for i, o in enumerate(trajectories):
        number = 0
        tokens = 0
        for position, symbol in enumerate(o):
            visit_trajectory.append(i)
            visit_row.append(space.prefix_offset(position) + number)
            visit_symbol.append(symbol)
            if symbol != space.stop_symbol:
                number = number * space.alphabet_size + symbol
                tokens += 1
        token_lengths[i] = tokens

    LOGGER.info("Enumerated {} trajectories for V={}, T={}".format(count, space.alphabet_size, space.max_len))
    return Enumeration(
        space=space,
        trajectories=tuple(trajectories),
        token_lengths=token_lengths,
        visit_trajectory=np.asarray(visit_trajectory, dtype=np.int64),
        visit_row=np.asarray(visit_row, dtype=np.int64),
        visit_symbol=np.asarray(visit_symbol, dtype=np.int64),
        index={o: i for i, o in enumerate(trajectories)},
    )


def enumerate_trajectories(space: TrajectorySpace) -> List[Trajectory]:
    """ Lexicographically ordered complete trajectories of the space. """
    return list(enumeration(space).trajectories)


def trajectory_index(space: TrajectorySpace, o: Trajectory) -> int:
    """ Position of a trajectory in the enumeration order. """
    try:
        return enumeration(space).index[tuple(o)]
    except KeyError:
        check_trajectory(space, tuple(o))
        raise


def _hash_unit(spec: RewardSpec, q: Prompt, o: Trajectory) -> float:
    """ Uniform number in [0, 1) from the reward seed, the prompt and the trajectory. """
    key = '{}|{}|{}'.format(spec.seed, q.id, '.'.join(str(symbol) for symbol in o))
    digest = hashlib.sha256(key.encode('utf8')).digest()
    return int.from_bytes(digest[:8], 'little') / 2.0 ** 64


def reward(spec: RewardSpec, q: Prompt, o: Trajectory) -> float:
    """ Verifier reward of a complete trajectory. """
    o = tuple(o)
    if spec.kind == RewardKind.ExplicitSet:
        return 1.0 if o in spec.trajectories else 0.0

    if spec.kind == RewardKind.ExplicitValues:
        for trajectory, value in spec.values:
            if trajectory == o:
                return float(value)
        return 0.0

    if spec.kind == RewardKind.SeededHashDensity:
        return 1.0 if _hash_unit(spec, q, o) < spec.density else 0.0

    if spec.kind == RewardKind.MultiModalRegions:
        return 1.0 if region_of(spec, o) is not None else 0.0

    raise RewardConfigError('Unknown reward kind "{}" for reward "{}"'.format(spec.kind, spec.name))


def region_of(spec: RewardSpec, o: Trajectory) -> Optional[int]:
    """ Index of the first region containing the trajectory. """
    for i, region in enumerate(spec.regions):
        if region.contains(o, spec.stop_symbol):
            return i
    return None


@functools.lru_cache(maxsize=256)
def reward_table(spec: RewardSpec, q: Prompt, space: TrajectorySpace) -> np.ndarray:
    """ Reward of every trajectory, in enumeration order. """
    table = np.array([reward(spec, q, o) for o in enumeration(space).trajectories], dtype=np.float64)
    table.setflags(write=False)
    return table


def correct_mask(spec: RewardSpec, q: Prompt, space: TrajectorySpace) -> np.ndarray:
    """ Trajectories with a positive reward. """
    return reward_table(spec, q, space) > 0


def mode_labels(spec: RewardSpec, q: Prompt, space: TrajectorySpace) -> np.ndarray:
    """ Mode id of every trajectory, -1 when incorrect.

    For region rewards the mode is the region, otherwise every correct trajectory is its own mode.
    """
    trajectories = enumeration(space).trajectories
    mask = correct_mask(spec, q, space)
    labels = np.full(len(trajectories), -1, dtype=np.int64)
    for i, o in enumerate(trajectories):
        if not mask[i]:
            continue
        if spec.kind == RewardKind.MultiModalRegions:
            labels[i] = region_of(spec, o)
        else:
            labels[i] = i
    return labels


def reward_transform(q: Prompt, r):
    """ The fixed prompt affine transform a_q * r + b_q. """
    return q.affine_a * r + q.affine_b


def transformed_reward_table(spec: RewardSpec, q: Prompt, space: TrajectorySpace) -> np.ndarray:
    return reward_transform(q, reward_table(spec, q, space))


def group_normalize(rewards: Iterable[float], eps_floor: float = EPS_FLOOR) -> np.ndarray:
    """ Center and scale a group of rewards by its mean and population standard deviation.

    A zero variance group gives zero advantages.
    """
    rewards = np.asarray(list(rewards) if not isinstance(rewards, np.ndarray) else rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size < 2:
        raise InvalidGroupError('A group needs at least 2 rewards, got {}'.format(rewards.size))

    centered = rewards - rewards.mean()
    deviation = float(np.sqrt(np.mean(centered ** 2)))
    if deviation == 0.0:
        return np.zeros_like(rewards)
    return centered / max(deviation, eps_floor)


def check_feature_dim(prompts: Sequence[Prompt], feature_dim: int):
    """ Every prompt must carry the space-wide feature dimension. """
    for q in prompts:
        if len(q.features) != feature_dim:
            raise RewardConfigError(
                'Prompt "{}" has {} features, expected {}'.format(q.id, len(q.features), feature_dim))
