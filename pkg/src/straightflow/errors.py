"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    """A time or index argument lies outside the region where it is defined."""


class NumericError(FloatingPointError):
    pass


class DegenerateTrajectoryError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class IncompatibleArtifact(ValueError):
    """A stored dataset or checkpoint fails its checksum or does not fit the config."""
