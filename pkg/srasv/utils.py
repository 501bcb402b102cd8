"""
Utility functions for the SRasv package

Logging, verbosity control, the package error classes and atomic file
writes shared by every module.
"""
import os
import sys
import inspect
import logging
import tempfile

from decorator import decorator

__all__ = ['logger', 'verbose', 'set_log_level', 'atomic_write']

logger = logging.getLogger('srasv')  # Used across all code
logger.propagate = False  # What to do in case of multiple imports
logger.addHandler(logging.StreamHandler(sys.stdout))


class SrasvError(Exception):
    """Base class of every error raised by the package"""


class NotWav(SrasvError, ValueError):
    """File does not start with a RIFF/WAVE header"""


class UnsupportedFormat(SrasvError, ValueError):
    """WAV file is not 16-bit PCM, mono, 16 kHz"""


class Truncated(SrasvError, ValueError):
    """Declared chunk length runs past the end of the file"""


class TooShort(SrasvError, ValueError):
    """Waveform shorter than the longest analysis window"""


class EmptyInput(SrasvError, ValueError):
    """Time-frequency representation without any column"""


class OddChannels(SrasvError, ValueError):
    """Max-Feature-Map on an odd number of channels"""


class ShapeMismatch(SrasvError, ValueError):
    """Array shape does not match what the layer or optimizer expects"""


class MissingTrace(SrasvError, ValueError):
    """Backward pass requested without a train-mode forward trace"""


class ZeroFeature(SrasvError, ValueError):
    """Zero-norm feature vector: the angle to the class weights is undefined"""


class BadMargin(SrasvError, ValueError):
    """Angular margin is not a positive integer"""


class EmptyClass(SrasvError, ValueError):
    """A class without any training example"""


class EmptyDataset(SrasvError, ValueError):
    """Training requested on an empty manifest"""


class LabelOutOfRange(SrasvError, ValueError):
    """Label index outside of the head width"""


class CheckpointIOError(SrasvError, IOError):
    """Checkpoint or model file cannot be read or written"""


class CorruptCheckpoint(SrasvError, ValueError):
    """Bad magic, inconsistent shape or checksum failure in a blob file"""


class ZeroVector(SrasvError, ValueError):
    """Embedding equal to the centering mean"""


class DimensionMismatch(SrasvError, ValueError):
    """Embedding dimension differs from the model dimension"""


class CohortTooSmall(SrasvError, ValueError):
    """Cohort smaller than top_k, or top_k below 2"""


class ZeroVariance(SrasvError, ValueError):
    """Cohort scores without spread"""


class OneClassOnly(SrasvError, ValueError):
    """Rate computation needs both positive and negative trials"""


class NonpositiveC2(SrasvError, ValueError):
    """t-DCF undefined: the ASV system rejects every spoof trial"""


class UnknownAttackLabel(SrasvError, ValueError):
    """Spoof trial without attack label, or label unknown to the SD set"""


class TrialMismatch(SrasvError, ValueError):
    """Score sets that do not cover the same trials"""


class MalformedLine(SrasvError, ValueError):
    """Unparsable line in a protocol or score file"""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = 'line %d: %s' % (lineno, message)
        super(MalformedLine, self).__init__(message)
        self.lineno = lineno


class DuplicateUtterance(SrasvError, ValueError):
    """Utterance listed twice in a protocol"""


class NonFiniteScore(SrasvError, ValueError):
    """NaN or infinite score"""


class BadSpec(SrasvError, ValueError):
    """Invalid synthetic corpus settings"""


class DegenerateDataWarning(UserWarning):
    """Data lacks the structure a model needs; the model was repaired"""


@decorator
def verbose(function, *args, **kwargs):
    """Let a function override the package log level for one call

    The decorated function takes a ``verbose`` argument (or is a method of an
    object with a ``verbose`` attribute). A value other than None sets the
    level for the duration of the call; the previous level comes back
    afterwards, also when the call raises. Use set_log_level() for the
    global level.
    """
    params = inspect.signature(function).parameters.values()
    arg_names = [p.name for p in params if p.kind == p.POSITIONAL_OR_KEYWORD]
    level = None
    if 'verbose' in arg_names:
        level = args[arg_names.index('verbose')]
    elif arg_names and arg_names[0] == 'self':
        level = getattr(args[0], 'verbose', None)
    if level is None:
        return function(*args, **kwargs)
    old_level = set_log_level(level, True)
    try:
        return function(*args, **kwargs)
    finally:
        set_log_level(old_level)


def set_log_level(verbose=None, return_old_level=False):
    """Set the level of the 'srasv' logger

    Parameters
    ----------
    verbose : bool | str | int | None
        True means INFO; False and None mean WARNING. Strings are level
        names (DEBUG, INFO, WARNING, ERROR, CRITICAL), ints logging levels.
    return_old_level : bool
        If True, return the level in effect before the call.
    """
    if verbose is None or verbose is False:
        verbose = 'WARNING'
    elif verbose is True:
        verbose = 'INFO'
    if isinstance(verbose, str):
        level = logging.getLevelName(verbose.upper())
        if not isinstance(level, int):
            raise ValueError('verbose must be a logging level name, got %r'
                             % verbose)
        verbose = level
    old_level = logger.level
    logger.setLevel(verbose)
    return old_level if return_old_level else None


def atomic_write(path, data, mode='wb'):
    """Write a file through a temporary sibling and a rename

    Parameters
    ----------
    path : str
        Destination file.
    data : bytes | str
        Full file content.
    mode : 'wb' | 'w'
        Binary or text mode.
    """
    dirname = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(dirname):
        os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix='.tmp-')
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
