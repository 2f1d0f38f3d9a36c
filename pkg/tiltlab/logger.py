__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import functools
import logging
import sys
import time

LOGGER = logging.getLogger('Tiltlab')


def profiling(func):
    """ Decorator to make some profiling. """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        start = time.time()
        result = func(*args, **kwargs)
        end = time.time()
        LOGGER.info("{} ran in {}s".format(func.__name__, round(end - start, 2)))
        return result

    return wrapper


class _StderrFormatter(logging.Formatter):

    """ Prefix warnings and errors the way the command line reports them. """

    def format(self, record: logging.LogRecord) -> str:
        message = super().format(record)
        if record.levelno >= logging.ERROR:
            return "Error: {}".format(message)
        if record.levelno >= logging.WARNING:
            return "Warning: {}".format(message)
        return message


def install_logger(verbose: bool = False) -> logging.Handler:
    """ Install the stderr handler on the Tiltlab logger.

    Info messages are noisy during training, they are only printed in verbose mode.
    """
    for handler in list(LOGGER.handlers):
        if getattr(handler, '_tiltlab', False):
            LOGGER.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_StderrFormatter('%(name)s: %(message)s'))
    handler._tiltlab = True
    LOGGER.addHandler(handler)
    LOGGER.setLevel(logging.INFO if verbose else logging.WARNING)
    LOGGER.propagate = False
    return handler
