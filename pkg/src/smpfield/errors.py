"""Exception hierarchy shared by all modules."""


class SmpError(Exception):
    """Base class for every error raised by smpfield."""


class InputError(SmpError, ValueError):
    """Bad shapes, mismatched grids or otherwise invalid arguments."""


class SimulationError(SmpError, RuntimeError):
    """A forward simulation produced non-finite values."""

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class SolverError(SmpError, RuntimeError):
    """Backward regression or Riccati solve failed."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class ConfigError(InputError):
    """Experiment configuration failed validation."""

    def __init__(self, message, block=None):
        super().__init__(message if block is None else f"[{block}] {message}")
        self.block = block
