"""Exception types shared across the screening pipeline."""


class PlasmoscanError(Exception):
    """Base class for all library errors."""


class DimensionError(PlasmoscanError):
    """Tensor or image shapes do not compose; the message names the offending axis."""


class ParameterError(PlasmoscanError):
    """A configuration value is outside its allowed range."""


class StateError(PlasmoscanError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class FormatError(PlasmoscanError):
    """Bytes do not decode as a supported image or model file."""


class VersionError(FormatError):
    """Model file carries an unsupported format version."""


class DatasetError(PlasmoscanError):
    """Dataset layout is missing a class folder or a split emptied a class."""


class TrainingError(PlasmoscanError):
    """Training aborted; carries the epoch and batch where the loss went bad."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
