"""Definitions used in Tiltlab"""

__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

from enum import Enum, IntEnum, unique


class _FindMixin:

    @classmethod
    def find(cls, value_string: str, raise_exception: bool = True):
        """ Return the member for the given string, case insensitive. """
        for member in cls.__members__.values():
            if str(member.value).lower() == str(value_string).lower():
                return member

        if raise_exception:
            raise ValueError(
                'The value "{}" is not a valid {}, expected one of {}'.format(
                    value_string, cls.__name__, ', '.join(cls.values()))
            )
        return None

    @classmethod
    def values(cls) -> list:
        return [member.value for member in cls.__members__.values()]


@unique
class RewardKind(_FindMixin, Enum):
    ExplicitSet = 'explicit-set'
    ExplicitValues = 'explicit-values'
    SeededHashDensity = 'seeded-hash-density'
    MultiModalRegions = 'multi-modal-regions'


# Kinds returning the binary verifier range {0, 1}
BINARY_REWARD_KINDS = (RewardKind.ExplicitSet, RewardKind.SeededHashDensity, RewardKind.MultiModalRegions)


@unique
class Aggregator(_FindMixin, Enum):
    LogSumExp = 'lse'
    GeometricMean = 'gm'
    LinearLog = 'linear-log'


@unique
class AmortizerKind(_FindMixin, Enum):
    LinearRidge = 'linear-ridge'
    OneHiddenLayer = 'one-hidden-layer'


@unique
class Objective(_FindMixin, Enum):
    AnchoredTB = 'anchored-tb'
    CoupledTB = 'coupled-tb'
    GroupReward = 'grpo'
    SupervisedCorrect = 'sft'

    @property
    def is_trajectory_balance(self) -> bool:
        return self in (Objective.AnchoredTB, Objective.CoupledTB)


@unique
class GradientEstimator(_FindMixin, Enum):
    Sampled = 'sampled'
    Exact = 'exact'


@unique
class RolloutWeights(_FindMixin, Enum):
    Unit = 'unit'


@unique
class AnchorSource(_FindMixin, Enum):
    Amortizer = 'amortizer'
    Exact = 'exact'


@unique
class ReferenceKind(_FindMixin, Enum):
    Uniform = 'uniform'
    Seeded = 'seeded'


@unique
class SweepAxis(_FindMixin, Enum):
    Beta = 'beta'
    Samples = 'N'
    ProposalStrength = 'proposal_strength'
    Objective = 'objective'


@unique
class OffsetMode(_FindMixin, Enum):
    """ How a perturbation is added to the exact log-partition in the checks. """
    Prompt = 'prompt'
    Trajectory = 'trajectory'


@unique
class ExitCode(IntEnum):
    Success = 0
    Failure = 1
    ConfigurationError = 2


# Trajectory serialization
STOP_LABEL = 'S'
TOKEN_SEPARATOR = '-'

# Defaults
ENUMERATION_CAP = 2_000_000
LOGIT_CLAMP = 40.0
EPS_FLOOR = 1e-6
DEFAULT_SAMPLES = 8
DEFAULT_GROUP_SIZE = 8
DEFAULT_BETA = 15.0
DEFAULT_POLICY_LR = 0.05
DEFAULT_PARTITION_LR = 0.1
DEFAULT_RIDGE_LAMBDA = 1e-6
DEFAULT_HIDDEN_WIDTH = 64
VAL_FRACTION = 0.1
MIN_REPLICATIONS = 10

# Environment variable overriding the output directory
OUTPUT_DIR_ENV = 'TILTLAB_OUTPUT_DIR'
