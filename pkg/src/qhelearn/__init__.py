"""Simulated quantum homomorphic encryption for delegated and federated learning."""

from .errors import (
    DomainError,
    ProtocolError,
    QheError,
    ResourceError,
    SealedAccessError,
    SolverError,
    TrainingDiverged,
    TranscriptError,
    UnsupportedGateError,
    ValidationError,
    WrongKeyError,
)

__version__ = "0.1.0"
