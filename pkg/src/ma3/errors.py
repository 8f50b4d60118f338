"""Exception types that the CLI maps to distinct exit codes."""


class ConfigError(ValueError):
    """Bad configuration: unknown key, unparseable value, contract violation."""


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite loss; the run must abort, not skip."""

    def __init__(self, episode, message):
        super().__init__(message)
        self.episode = episode


class CheckpointVersionError(RuntimeError):
    """Checkpoint container version is not supported by this build."""


class GradCheckError(RuntimeError):
    """A finite-difference gradient check exceeded its tolerance."""

    def __init__(self, component, max_rel_err, message):
        super().__init__(message)
        self.component = component
        self.max_rel_err = max_rel_err
