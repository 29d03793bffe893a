"""
Exception types shared by the HERL modules.

Every failure the pipeline can report derives from HerlError so the CLI and
the Flask server can turn it into a JSON error body with one handler.
"""


class HerlError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1

    def to_dict(self) -> dict:
        return {'error': str(self) or self.__class__.__name__, 'kind': self.__class__.__name__}


class InvalidInputError(HerlError, ValueError):
    """Rejected input: a precondition of the called operation does not hold."""

    exit_code = 2


class GridConstructionError(InvalidInputError):
    pass


class ConfigurationError(HerlError):
    """Unsupported parameters or an unreadable configuration file."""

    exit_code = 2


class CapacityError(HerlError):
    """The model does not fit in the ciphertext slots (S > N/2)."""

    exit_code = 2


class NeedsBootstrapError(HerlError):
    """A multiplication was requested on a ciphertext with no level left."""


class DecryptionError(HerlError):
    pass


class NumericError(HerlError):
    pass


class ConsistencyError(HerlError):
    """A desirability vector does not solve the linear system it claims to."""


class OracleFailure(HerlError):
    pass


class SynthesisFailure(HerlError):
    """Decryption noise overwhelmed the desirability signal."""


class ProtocolError(HerlError):
    """Malformed, truncated or mismatched protocol message."""
