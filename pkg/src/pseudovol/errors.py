"""Exception hierarchy shared across the pipeline.

CLI exit codes map onto these: ConfigError -> 2, ArtifactError -> 3,
NumericalError -> 4. Everything else is a plain ValueError/OSError.
"""


class PseudovolError(Exception):
    pass


class ConfigError(PseudovolError):
    """Invalid or inconsistent experiment configuration."""


class ArtifactError(PseudovolError):
    """Missing or stale on-disk artifact (config-hash mismatch, bad format)."""


class NumericalError(PseudovolError):
    """Non-finite values encountered during training or evaluation."""
