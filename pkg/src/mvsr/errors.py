"""Exception types shared across the package."""


class MVSRError(Exception):
    """Base class for all package errors."""


class ValidationError(MVSRError):
    """Bad input: wrong sizes, malformed files, unknown config keys."""


class NumericError(MVSRError):
    """A computation produced a non-finite or out-of-contract value."""


class NonPositiveDepth(NumericError):
    pass


class ShapeMismatch(ValidationError):
    pass


class BadGroupCount(ValidationError):
    pass


class MissingGradient(MVSRError):
    pass


class VersionMismatch(ValidationError):
    pass


class CorruptFile(ValidationError):
    pass


class BadImageSize(ValidationError):
    pass


class NoValidView(NumericError):
    pass


class EmptyCloud(ValidationError):
    pass


class BadDirection(ValidationError):
    pass


class BadSize(ValidationError):
    pass


class NoValidPixels(ValidationError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id


class ConfigError(ValidationError):
    pass


def check_finite(what: str, values) -> None:
    """Raise NumericError naming ``what`` and the first bad index if any value is NaN or inf."""
    import numpy as np

    values = np.asarray(values)
    bad = ~np.isfinite(values)
    if bad.any():
        first = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericError(f"non-finite {what}: {int(bad.sum())} of {values.size} values, first at {first}")
