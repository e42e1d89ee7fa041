"""Exception types shared across the package."""


class RydqcaError(Exception):
    pass


class InvalidArgument(RydqcaError, ValueError):
    pass


class PreconditionViolation(RydqcaError):
    pass


class UnsupportedRepresentation(RydqcaError):
    pass


class NumericalFailure(RydqcaError):
    def __init__(self, message, label=""):
        super().__init__(f"{message} [segment: {label}]" if label else message)
        self.label = label


class NonInvertibleModel(RydqcaError):
    pass


class NoLaterData(RydqcaError):
    pass


class InternalConsistencyError(RydqcaError):
    pass
