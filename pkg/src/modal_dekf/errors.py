"""Exception hierarchy shared across the package."""


class ModalDekfError(Exception):
    """Base class for all package errors."""


class ValidationError(ModalDekfError, ValueError):
    """Invalid input data, configuration or dimensions."""


class FilterDivergenceError(ModalDekfError, RuntimeError):
    """A Kalman recursion produced a singular innovation covariance or a
    non-finite state.

    Attributes
    ----------
    step : int
        Zero-based sample index at which the failure occurred.
    node : int or None
        Node id for distributed filters, None for the centralized one.
    """

    def __init__(self, message, step, node=None):
        self.step = step
        self.node = node
        where = f"step {step}" if node is None else f"node {node}, round {step}"
        super().__init__(f"{message} ({where})")


class DegenerateSignalError(ModalDekfError, RuntimeError):
    """The data cannot support the requested model order (rank deficiency,
    missing oscillatory poles)."""


class NonConvergenceError(ModalDekfError, RuntimeError):
    """Consensus iteration exceeded its iteration budget.

    Attributes
    ----------
    last_average : numpy.ndarray
        The consensus vector at the final iteration.
    """

    def __init__(self, message, last_average):
        self.last_average = last_average
        super().__init__(message)


class ModeMatchError(ModalDekfError, RuntimeError):
    """An estimated mode could not be matched to any ground-truth mode."""
