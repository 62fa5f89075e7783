"""Exception types shared across the package."""


class GvlError(Exception):
    """Base class for every error raised by this package."""


class BackendFailure(GvlError):
    """A model backend could not produce a response after exhausting retries."""


class RateLimited(BackendFailure):
    """Retries were exhausted while the backend kept answering with 429."""


class TranscriptMiss(GvlError):
    """A scripted backend had no entry for the request fingerprint."""


class MalformedModelOutput(GvlError):
    """Model output did not match the expected shape after all attempts."""


class SchemaViolation(GvlError):
    """A structured document (taxonomy file, transcript, manifest row) failed validation."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


class GridTooFine(GvlError):
    """Requested more grid cells along an axis than there are pixels."""


class MaskMismatch(GvlError):
    """Footprint mask dimensions do not cover the patch bounds."""


class MissingGeoContext(GvlError):
    """Geo-context was required by the prompt config but the patch has none."""


class DegenerateEmbedding(GvlError):
    """An embedding vector has zero norm; cosine similarity is undefined."""


class UnsupportedImage(GvlError):
    """Raster could not be decoded as an RGB image."""


class UnknownLabel(GvlError):
    """A label is not part of the declared class set or taxonomy."""


class PathMismatch(GvlError):
    """A predicted path does not follow the taxonomy's parent-child edges."""


class ConfigError(GvlError):
    """Run configuration is invalid; carries the offending field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")
