"""Exception hierarchy shared by all solver modules."""


class GhostkinError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class SolvabilityViolation(GhostkinError):
    pass


class NoConvergence(GhostkinError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class IsotropyDefect(GhostkinError):
    pass


class MemoryBudgetExceeded(GhostkinError):
    pass


class CutoffTooLarge(GhostkinError):
    pass


class DecayFitFailed(GhostkinError):
    pass


class PicardDiverged(GhostkinError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class TemperatureNonPositive(GhostkinError):
    pass


class FluxIdentityViolation(GhostkinError):
    def __init__(self, message, defects=None):
        super().__init__(message)
        self.defects = defects


class FitUnreliable(GhostkinError):
    pass


class ConfigError(GhostkinError):
    pass
