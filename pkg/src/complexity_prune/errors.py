"""Exception types shared across the package."""


class PruneError(Exception):
    """Base class for all package errors."""


class ContractError(PruneError, ValueError):
    """A caller violated an operation's preconditions (lengths, ranges, shapes)."""


class InputError(PruneError, ValueError):
    """Input batch does not match the architecture."""


class DegenerateBatchError(PruneError, ValueError):
    """Every sample in a batch has (near) zero cross-entropy loss."""


class DegenerateBatchWarning(UserWarning):
    pass


class RegressionUndefined(PruneError, ValueError):
    pass


class TrainingFault(PruneError, RuntimeError):
    def __init__(self, message, iteration=None, diagnostics=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration
        self.diagnostics = diagnostics or {}


class ValidationError(PruneError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class ConfigParseError(PruneError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DependencyError(PruneError, RuntimeError):
    def __init__(self, artifact, message=None):
        super().__init__(message or f"missing prerequisite artifact: {artifact}")
        self.artifact = artifact
