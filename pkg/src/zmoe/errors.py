"""Exception types shared across the package.

Plain invalid arguments raise :class:`ValueError`; everything that can
only be detected at runtime against real data gets a dedicated class so
callers (and the CLI exit-code mapping) can tell data corruption apart
from bad configuration.
"""


class ZmoeError(Exception):
    """Base class for package-specific errors."""


class CodecError(ZmoeError):
    """A compression backend failed while (de)compressing."""

    def __init__(self, message, codec_id=None):
        super().__init__(message)
        self.codec_id = codec_id


class UnsupportedCodecError(CodecError):
    """No backend registered under the requested codec id or name."""


class CorruptionError(ZmoeError):
    """Stored bytes fail their checksum or length contract."""


class FormatError(ZmoeError):
    """A container file is malformed or truncated."""


class NotFoundError(ZmoeError):
    """Lookup of an expert, tensor or shard that is not present."""


class TooLargeError(ZmoeError):
    """An instance exceeds the exhaustive oracle's search limits."""


class ConvergenceError(ZmoeError):
    """Iterative fitting did not reach tolerance within the budget."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class CapacityError(ZmoeError):
    """Insertion into a cache pool with zero configured capacity."""


class DegenerateModelError(ZmoeError):
    """A probability model assigns zero mass to the conditioning event."""
