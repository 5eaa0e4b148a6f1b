"""Exception types shared across the package."""


class VGuideError(Exception):
    """Base class for domain errors (the CLI maps these to exit code 1)."""


class ConfigurationError(VGuideError):
    pass


class ShapeError(VGuideError, ValueError):
    pass


class VocabError(VGuideError, ValueError):
    pass


class CheckpointError(VGuideError):
    pass


class ContextLengthError(VGuideError, ValueError):
    pass


class TrainingError(VGuideError):
    pass
