"""Exception types shared across the package."""


class AvatarDiffError(Exception):
    """Base class for package errors."""


class ConfigError(AvatarDiffError):
    """Invalid configuration value or incompatible checkpoint/config."""


class ManifestError(AvatarDiffError):
    """Malformed or inconsistent dataset manifest."""


class OracleError(AvatarDiffError):
    """A landmark oracle could not measure the given image."""


class MissingArtifactError(AvatarDiffError):
    """An upstream pipeline artifact (dataset, checkpoint, ...) is absent."""
