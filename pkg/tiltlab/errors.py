"""Exceptions raised by Tiltlab."""

__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'


class TiltlabError(Exception):
    pass


class EnumerationCapError(TiltlabError):
    """ The trajectory space is larger than the configured enumeration cap. """
    pass


class InvalidTrajectoryError(TiltlabError):
    pass


class InvalidGroupError(TiltlabError):
    pass


class RewardConfigError(TiltlabError):
    pass


class SupportError(TiltlabError):
    """ A probability table puts mass where the other one has none. """

    def __init__(self, message: str, trajectory: str = None):
        super().__init__(message)
        self.trajectory = trajectory


class EmptySampleError(TiltlabError):
    pass


class StudyError(TiltlabError):
    pass


class AmortizerError(TiltlabError):
    pass


class ContractError(TiltlabError):
    """ A frozen object was mutated, or an unfrozen one was queried. """
    pass


class EmptyDatasetError(TiltlabError):
    pass


class DiversityError(TiltlabError):
    pass


class StageError(TiltlabError):
    """ A pipeline stage failed. """

    def __init__(self, stage: str, message: str):
        super().__init__('[{}] {}'.format(stage, message))
        self.stage = stage
