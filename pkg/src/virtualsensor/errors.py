"""Exception hierarchy shared across the package."""


class VirtualSensorError(Exception):
    """Base class for all package-specific failures."""


class ParseError(VirtualSensorError):
    """A data file could not be parsed; message names the offending line."""


class SchemaError(VirtualSensorError):
    """Inputs violate the feature schema or shape contracts."""


class DegenerateFeatureError(VirtualSensorError):
    """A feature column has too few observations to standardize."""


class CheckpointError(VirtualSensorError):
    """Checkpoint file is corrupt, incompatible, or refuses to save."""
