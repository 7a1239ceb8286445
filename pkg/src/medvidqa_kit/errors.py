"""Exception hierarchy and CLI exit codes for medvidqa-kit."""

from __future__ import annotations

from typing import Sequence

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_SERVICE = 3


class MedVidQAError(Exception):
    """Base class for all errors raised by medvidqa-kit."""

    exit_code = EXIT_CONFIG


class ConfigError(MedVidQAError):
    """Invalid configuration, usage, or missing input path."""

    exit_code = EXIT_CONFIG


class DataError(MedVidQAError, ValueError):
    """Input data that cannot be parsed or violates an invariant."""

    exit_code = EXIT_DATA


class ServiceError(MedVidQAError):
    """An external model service failed or could not be reached."""

    exit_code = EXIT_SERVICE


# Corpus and parsing

class MalformedCue(DataError):
    pass


class EmptyTranscript(DataError):
    pass


class DuplicateJudgment(DataError):
    pass


class ParseError(DataError):
    """A line-oriented file could not be parsed.

    Attributes:
        path: File being parsed (may be None for in-memory input)
        line_no: 1-based line number of the offending line
    """

    def __init__(self, message: str, line_no: int, path: object = None):
        self.line_no = line_no
        self.path = path
        where = f"{path}:{line_no}" if path is not None else f"line {line_no}"
        super().__init__(f"{where}: {message}")


class FeatureFormatError(DataError):
    pass


class RunFormatError(DataError):
    pass


# Vectors and scoring

class EmptyText(DataError):
    pass


class InconsistentDim(DataError):
    pass


class ZeroVector(DataError):
    pass


class DimMismatch(DataError):
    pass


class NoChunks(DataError):
    pass


class NoFrames(DataError):
    pass


# Localization

class TokenOutOfRange(DataError):
    pass


class NoCoverage(DataError):
    pass


class EmptySequence(DataError):
    pass


class NoSegments(DataError):
    pass


class NegativeLoss(DataError):
    pass


# Step captioning

class NothingToSummarize(DataError):
    pass


class UnparseableResponse(DataError):
    """The chat response held no parseable step.

    Attributes:
        text: The offending response text
        failures: Per-entry failure messages collected while parsing
    """

    def __init__(self, text: str, failures: Sequence[str] = ()):
        self.text = text
        self.failures = list(failures)
        preview = text if len(text) <= 80 else text[:77] + "..."
        super().__init__(f"No parseable steps in response: {preview!r}")


class NoValidSteps(DataError):
    pass


# Evaluation

class NoRelevant(DataError):
    pass


class DisjointEvaluation(DataError):
    pass


# Services

class ServiceUnavailable(ServiceError):
    """Service failure after all retries.

    Attributes:
        indices: 0-based positions of the inputs that could not be served
    """

    def __init__(self, message: str, indices: Sequence[int] = ()):
        self.indices = sorted(indices)
        super().__init__(f"{message} (failed indices: {self.indices})" if self.indices else message)


class StubMiss(ServiceError):
    """Stub mode found no recorded response for a prompt."""

    def __init__(self, prompt_hash: str):
        self.prompt_hash = prompt_hash
        super().__init__(f"No stub fixture recorded for prompt hash {prompt_hash}")


class ExpansionFailed(ServiceError):
    pass
