"""Exception types shared across the package."""


class HodgeLabError(Exception):
    """Base class for all package errors."""


class UnsupportedGenus(HodgeLabError):
    pass


class LevelOutOfRange(HodgeLabError):
    pass


class NonEmbeddedMesh(HodgeLabError):
    pass


class UnsupportedDegree(HodgeLabError):
    pass


class MaxRetriesExceeded(HodgeLabError):
    def __init__(self, msg, seed=None):
        super().__init__(msg)
        self.seed = seed


class KindMismatch(HodgeLabError):
    pass


class SingularAssembly(HodgeLabError):
    pass


class SolverBreakdown(HodgeLabError):
    def __init__(self, msg, iterations=None, residual=None):
        super().__init__(msg)
        self.iterations = iterations
        self.residual = residual


class GapUndecidable(HodgeLabError):
    def __init__(self, msg, ratio=None):
        super().__init__(msg)
        self.ratio = ratio


class MissingChiData(HodgeLabError):
    pass


class EllipticityViolated(HodgeLabError):
    pass


class SeriesDiverged(HodgeLabError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


class GridTooCoarse(HodgeLabError):
    pass


class FitResidualTooLarge(HodgeLabError):
    pass


class EigenNotConverged(HodgeLabError):
    pass


class TailFitUnstable(HodgeLabError):
    def __init__(self, msg, cond=None):
        super().__init__(msg)
        self.cond = cond


class ConfigError(HodgeLabError):
    pass
