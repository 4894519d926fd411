"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2,
MissingArtifactError -> 3, anything else -> 1.
"""


class ConfigError(Exception):
    """Invalid or inconsistent configuration."""


class MissingArtifactError(Exception):
    """A required on-disk artifact (dataset, codebook, checkpoint) is absent."""


class PlacementError(ConfigError):
    """Scene generation cannot place the requested objects."""


class InfeasibleChangeError(ValueError):
    """A change spec is not applicable to the given scene."""
