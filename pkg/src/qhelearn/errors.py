"""Exception hierarchy shared across the package."""


class QheError(Exception):
    """Base class for every error raised by qhelearn."""


class DomainError(QheError, ValueError):
    """An argument lies outside the operation's domain."""


class ValidationError(QheError, ValueError):
    """A structured object (gate, config, permutation table) is malformed."""


class UnsupportedGateError(QheError):
    pass


class WrongKeyError(QheError):
    """A ciphertext was used with a keypair or handle from another vault."""


class SealedAccessError(QheError):
    """Decryption was attempted without the secret key."""


class ProtocolError(QheError):
    pass


class TranscriptError(ProtocolError):
    pass


class ResourceError(QheError):
    pass


class SolverError(QheError):
    pass


class TrainingDiverged(QheError):
    pass
