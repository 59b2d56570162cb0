"""Exception hierarchy shared across the package.

Split into three families so the command-line interface can map them to
distinct exit codes: input/validation problems, numerical failures during
fitting, and I/O problems (plain OSError is used for the latter).
"""


class ValidationError(ValueError):
    """Invalid input: bad dimensions, malformed files, inconsistent options."""


class DisconnectedGraphError(ValidationError):
    """The areal adjacency graph has more than one connected component."""

    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        parts = "; ".join(str(c) for c in self.components)
        super().__init__(
            f"adjacency graph is disconnected ({len(self.components)} components): {parts}"
        )


class CollinearityError(ValidationError):
    """The fixed-effects design matrix is rank deficient."""

    def __init__(self, dependent_columns):
        self.dependent_columns = list(dependent_columns)
        cols = ", ".join(str(c) for c in self.dependent_columns)
        super().__init__(f"fixed-effects design is rank deficient; dependent columns: {cols}")


class IllPosedConstraintsError(ValidationError):
    """Constraints do not exclude the precision kernel; the projection is undefined."""


class NumericalError(RuntimeError):
    """Numerical failure mid-fit (singular covariance, overflow after step-halving)."""


class ConvergenceError(RuntimeError):
    """A fit required by downstream work did not converge."""
