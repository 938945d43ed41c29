"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class DivergenceError(RuntimeError):
    """A simulation produced a non-finite or out-of-bound state."""

    def __init__(self, step: int, message: str = "state diverged"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class SolverError(RuntimeError):
    """An iterative solver failed to converge."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class SearchError(RuntimeError):
    """The demonstrator search could not produce a usable gain."""


class DatasetError(ValueError):
    """A dataset file is malformed or inconsistent with its header."""

    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


class CheckpointError(ValueError):
    """A checkpoint's manifest or payload does not match its config."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss; carries the last good checkpoint."""

    def __init__(self, step: int, checkpoint):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.checkpoint = checkpoint
