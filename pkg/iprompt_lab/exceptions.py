"""
Exception classes for iprompt-lab.

Every error raised by the library derives from IPromptLabError. Each class
carries an ``exit_code`` that the command-line surface returns unchanged:
1 for experiment/verification failures, 2 for usage and configuration errors.
"""


class IPromptLabError(Exception):
    """
    Base class for all iprompt-lab errors.

    Exit code: 1
    """

    exit_code: int = 1

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(message)


class DimensionError(IPromptLabError):
    """
    Tensor shapes do not agree.

    Raised by numerics ops, the encoder and the prompt machinery when an
    operand has the wrong number of dimensions or mismatched sizes.
    """


class NumericError(IPromptLabError):
    """
    A forward value became NaN or infinite.

    Non-finite values are an error state everywhere except masked logits.
    """


class UsageError(IPromptLabError):
    """
    An API was called with arguments it cannot accept.

    Exit code: 2
    """

    exit_code: int = 2


class InvalidMaskError(IPromptLabError):
    """
    A label points at a class the logit mask excludes.
    """


class StateError(IPromptLabError):
    """
    An object is not in the state an operation requires.

    Raised, for example, when composing prompts while a stale chunk is still
    trainable, or when asking for a layer that carries no prompts.
    """


class ProtocolError(StateError):
    """
    Tasks were started or trained out of order.
    """


class FormatError(IPromptLabError):
    """
    A binary dataset or snapshot file is malformed.

    Covers bad magic, unsupported versions, truncation and CRC mismatches.
    """


class ScheduleError(IPromptLabError):
    """
    A task schedule specification cannot be realised.

    Exit code: 2
    """

    exit_code: int = 2


class TrainingError(IPromptLabError):
    """
    Training diverged (non-finite loss).
    """


class ConfigError(IPromptLabError):
    """
    An experiment configuration file is invalid.

    Carries the offending ``key`` and its ``line`` number when known.

    Exit code: 2
    """

    exit_code: int = 2

    def __init__(self, message: str, key: str | None = None, line: int | None = None) -> None:
        self.key = key
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class VerificationError(IPromptLabError):
    """
    A check of the verification suite failed.
    """
