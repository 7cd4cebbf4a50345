"""Exception hierarchy shared by all pipeline stages."""


class CommaCloudError(Exception):
    """Base class for every error raised by this package."""


class FormatError(CommaCloudError, ValueError):
    """A file does not follow the expected on-disk format."""


class FrameNameError(CommaCloudError, ValueError):
    """A frame filename does not match ``YYYYMMDD_HHMM.pgm``."""


class PreconditionError(CommaCloudError, ValueError):
    """An argument violates an operation's precondition."""


class EmptyGroupError(CommaCloudError, ValueError):
    """No pixel samples exist for an (hour, tile) group."""


class CoverageError(CommaCloudError, KeyError):
    """A trained model has no entry for the requested hour or tile."""


class InsufficientHistoryError(CommaCloudError, ValueError):
    """Too few frames inside the motion span."""


class TrainingError(CommaCloudError, ValueError):
    """A classifier cannot be trained on the supplied data."""
