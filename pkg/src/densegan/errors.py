"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A configuration or build-time contract was violated."""


class WiringError(RuntimeError):
    """The dense skip grid was wired with the wrong arity or shapes."""


class NonFiniteError(FloatingPointError):
    """A forward pass or loss produced NaN/Inf.

    ``where`` names the offending node, stage or loss term.
    """

    def __init__(self, where, message=None):
        self.where = where
        super().__init__(message or f"non-finite values produced at {where}")


class MetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. a single label)."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be read or does not match the current run."""


class BatchLoadError(RuntimeError):
    """One or more records of a batch failed to load.

    ``failures`` maps record index to the error message.
    """

    def __init__(self, failures):
        self.failures = dict(failures)
        lines = [f"  [{idx}] {msg}" for idx, msg in sorted(self.failures.items())]
        super().__init__("failed to load %d record(s):\n%s" % (len(lines), "\n".join(lines)))
