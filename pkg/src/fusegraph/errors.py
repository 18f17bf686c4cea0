"""Exception hierarchy shared by all fusegraph modules."""


class FuseGraphError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(FuseGraphError, ValueError):
    pass


class ConfigError(FuseGraphError, ValueError):
    pass


class ValidationError(FuseGraphError):
    """Raised when a graph fails validation; carries every diagnostic."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics) or "invalid graph")


class FormatError(FuseGraphError):
    """Malformed or unsupported GraphPack content (bad magic, unknown op, version)."""


class IntegrityError(FormatError):
    """GraphPack blob does not agree with its manifest."""


class SignatureError(FuseGraphError):
    """Run inputs do not match the graph input signature."""


class ExecutionError(FuseGraphError):
    pass


class NumericInputError(FuseGraphError, ValueError):
    pass
