"""Exception taxonomy shared by the library, the HTTP views and the CLI."""


class ActiShadeError(Exception):
    """Base class for every error raised by this package."""


class InputError(ActiShadeError, ValueError):
    """A caller handed in something that violates a precondition."""


class ConfigError(InputError):
    pass


class NoCandidates(InputError):
    """Keyphrase extraction left nothing to perturb."""


class AlignmentError(InputError):
    """A character span overlaps no token."""


class MalformedRecord(InputError):
    pass


class DomainError(ActiShadeError, ValueError):
    """A mathematically undefined value was requested (e.g. a zero vector)."""


class DetectionError(ActiShadeError):
    pass


class TrainingError(ActiShadeError):
    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
        self.epoch = epoch


class TransportError(ActiShadeError):
    """The model backend could not be reached or answered with a server error."""
