"""Exception types shared across the package."""


class EasError(Exception):
    """Base class for all package errors."""


class ShapeError(EasError):
    """Shape mismatch in a graph operation; carries the offending node name."""

    def __init__(self, node: str, message: str):
        self.node = node
        super().__init__(f"{node}: {message}")


class GraphError(EasError):
    """Misuse of the computation graph (non-scalar loss, repeated backward)."""


class NonFiniteGradientError(EasError):
    """An optimizer received a NaN/Inf gradient; carries the parameter name."""

    def __init__(self, param: str):
        self.param = param
        super().__init__(f"non-finite gradient for parameter '{param}'")


class SpaceError(EasError):
    """Illegal search-space configuration, encoding, or architecture choice."""


class MaskError(EasError):
    """A sample's label class was masked out of its own softmax."""


class InfeasibleBudgetError(EasError):
    """No architecture satisfying the budget was found within the attempt cap."""

    def __init__(self, budget: float, attempts: int):
        self.budget = budget
        self.attempts = attempts
        super().__init__(
            f"no feasible architecture under {budget:.3f}M MAdds in {attempts} attempts"
        )


class DatasetError(EasError):
    """Dataset ingestion or partition/dataset mismatch problems."""


class ConfigError(EasError):
    """Invalid experiment or module configuration."""


class DivergenceError(EasError):
    """Training produced a non-finite loss; a checkpoint was written first."""

    def __init__(self, step: int, checkpoint: str | None):
        self.step = step
        self.checkpoint = checkpoint
        where = f"; checkpoint saved to {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at step {step}{where}")


class CheckpointError(EasError):
    """Corrupt checkpoint file or mismatched space hash on load."""
