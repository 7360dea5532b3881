"""Exception types shared across the package."""


class InstEditError(Exception):
    """Base class for all errors raised by this package."""


class EmptyMaskError(InstEditError):
    """A mask operation produced (or was given) a mask with no set cells."""


class GrammarError(InstEditError):
    """A prompt could not be parsed by the local caption grammar."""


class RemoteError(InstEditError):
    """A remote parser/detector call failed or returned a malformed reply."""


class NoMatchError(InstEditError):
    """An instance selection matched no detection."""


class AmbiguousMatchError(InstEditError):
    """An instance selection matched several detections and no id was given."""


class CaptureError(InstEditError):
    """A capture was requested for an unknown layer or is missing for a step."""


class GuidanceError(InstEditError):
    """Guidance produced a non-finite energy or gradient."""


class SessionError(InstEditError):
    """A session directory is missing, corrupt, or in an invalid state."""
