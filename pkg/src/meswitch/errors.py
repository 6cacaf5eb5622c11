"""Error kinds shared across the artifact format, registry and serving path."""

from __future__ import annotations

__all__ = [
    "ArtifactError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedArtifactError",
    "BaseDigestMismatchError",
    "RegistryError",
    "DuplicateExpertError",
    "UnknownExpertError",
    "BudgetExceededError",
    "DistillDivergenceError",
]


class ArtifactError(Exception):
    """Malformed or unreadable expert artifact."""


class BadMagicError(ArtifactError):
    pass


class UnsupportedVersionError(ArtifactError):
    pass


class TruncatedArtifactError(ArtifactError):
    pass


class BaseDigestMismatchError(ArtifactError):
    """Artifact was compressed against a different base model."""


class RegistryError(Exception):
    """Expert registry misuse or resource exhaustion."""


class DuplicateExpertError(RegistryError):
    pass


class UnknownExpertError(RegistryError):
    pass


class BudgetExceededError(RegistryError):
    """Artifact cannot fit in the byte budget even after evicting victims."""


class DistillDivergenceError(RuntimeError):
    """Step-size training lost stability (loss exceeded 10x initial)."""
