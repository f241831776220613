"""Exception taxonomy shared across the package.

The command line maps these onto exit codes (see cli.py): configuration
errors exit 1, data errors 2, numeric errors 3, checkpoint/io errors 4.
Contract and shape errors indicate API misuse and are not remapped.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (unknown key, bad value)."""


class DataError(ValueError):
    """Unusable input data (empty corpus, mismatched vocabulary, ...)."""


class VocabularyError(DataError):
    """A token or concept id outside the declared vocabulary."""


class NumericError(ArithmeticError):
    """A numeric guard fired (zero norm, unreachable target, ...)."""


class InfeasibleTargetError(NumericError):
    """No valid alignment exists; the loss would be infinite."""


class ShapeError(ValueError):
    """Array dimensions do not satisfy an operation's contract."""


class ContractError(RuntimeError):
    """An API was driven outside its stated contract."""


class CheckpointError(Exception):
    """Base class for checkpoint serialization failures."""


class CheckpointFormatError(CheckpointError):
    """The file does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """The file's format version is not supported."""


class CheckpointCorruptError(CheckpointError):
    """The payload is truncated or inconsistent with its manifest."""
