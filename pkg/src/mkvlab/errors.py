"""Exception types shared across the package."""


class MkvLabError(Exception):
    pass


class ConfigurationError(MkvLabError, ValueError):
    """Invalid grid, counts or experiment configuration."""


class PreconditionError(MkvLabError, ValueError):
    """An operation was called outside its documented domain."""


class ModelError(MkvLabError):
    """A coefficient could not be evaluated or returned garbage."""


class SimulationBlowUp(MkvLabError, FloatingPointError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"particle state left the admissible range at step {step}")


class UnsupportedStructure(MkvLabError, NotImplementedError):
    """The requested check needs structure the model does not have."""
