"""Exception vocabulary shared across the toolkit."""


class FragAuditError(Exception):
    """Base class; carries a machine-readable payload for the CLI."""

    def payload(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


class ConfigError(FragAuditError):
    pass


class NormalizationSingularity(FragAuditError):
    """A hidden pre-activation vector had zero norm under exact normalization."""


class InvalidDataset(FragAuditError):
    pass


class FormatError(FragAuditError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class InvalidSplit(FragAuditError):
    pass


class InvalidPermutation(FragAuditError):
    pass


class InvalidSize(FragAuditError):
    pass


class NumericalDivergence(FragAuditError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class IncompatibleCheckpoint(FragAuditError):
    pass


class SlopeUndefined(FragAuditError):
    pass


class LogDomainError(FragAuditError):
    pass


class MarginNotPositive(FragAuditError):
    pass


class DegenerateLayer(FragAuditError):
    pass


class SigmaSearchFailed(FragAuditError):
    pass


class ComplexEndpoints(FragAuditError):
    pass


class InadmissibleAlpha(FragAuditError):
    pass


class BoundUndefined(FragAuditError):
    pass


class ZeroHits(FragAuditError):
    pass


class RejectionExhausted(FragAuditError):
    pass
