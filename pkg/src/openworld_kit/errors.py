"""Exception taxonomy shared across the toolkit."""


class OpenWorldKitError(Exception):
    """Base class for all toolkit errors."""


class ZeroVector(OpenWorldKitError):
    """A vector with (near-)zero norm was given where a direction is required."""


class EmptyRegistry(OpenWorldKitError):
    """Operation needs at least one registered class."""


class DegenerateMean(OpenWorldKitError):
    """Known-class embeddings cancel; the mean direction is undefined."""


class DuplicateClass(OpenWorldKitError):
    """A class name was registered twice."""


class ShapeMismatch(OpenWorldKitError):
    """Array shapes disagree with the module or pyramid layout."""


class DegenerateProjection(OpenWorldKitError):
    """A projected embedding collapsed to zero norm before normalization."""


class NoSamples(OpenWorldKitError):
    """A loss was requested without any contributing samples."""


class NoModules(OpenWorldKitError):
    """An OOD score was requested with no class modules available."""


class EmptyScores(OpenWorldKitError):
    """Threshold calibration needs a nonempty score set."""


class SourceOutOfRange(OpenWorldKitError):
    """A detection points at a pyramid location outside the score map."""


class InfeasibleSpec(OpenWorldKitError):
    """World generation could not satisfy the requested geometry."""


class MissingCheckpoint(OpenWorldKitError):
    """A required checkpoint directory or file does not exist."""


class UndefinedOperatingPoint(OpenWorldKitError):
    """The requested recall level is unreachable on this detection set."""


class ParseError(OpenWorldKitError):
    """An input file could not be parsed."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + where)


class ConfigError(OpenWorldKitError):
    """A run configuration contains unknown keys or invalid values."""
