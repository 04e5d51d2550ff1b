"""Exception hierarchy. CLI exit codes are attached to the base classes."""


class PanelCausalError(Exception):
    exit_code = 1


class ConfigError(PanelCausalError, ValueError):
    """Invalid configuration. Carries every problem found, not just the first."""

    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(PanelCausalError, ValueError):
    exit_code = 3


class EstimationError(PanelCausalError, RuntimeError):
    exit_code = 4


class ConvergenceError(EstimationError):
    pass


class SeparationError(EstimationError):
    pass


class InfeasibleError(EstimationError):
    pass


class StageError(PanelCausalError):
    """Wraps a failure inside a pipeline stage, tagging the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"[{stage}] {cause}")
