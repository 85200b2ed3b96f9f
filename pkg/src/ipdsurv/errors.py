"""Exception hierarchy shared by all pipeline stages."""


class IpdError(Exception):
    """Base class for errors raised by ipdsurv."""


class DataError(IpdError):
    """Input data failed validation."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FitError(IpdError):
    """A numerical fit did not converge or is not identifiable."""

    def __init__(self, message, theta=None, grad_norm=None):
        super().__init__(message)
        self.theta = theta
        self.grad_norm = grad_norm


class MissingArtifactError(IpdError):
    """A downstream command ran before the upstream artifact existed."""
