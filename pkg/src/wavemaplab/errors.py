"""Exception hierarchy; each class maps to one CLI exit code."""


class LabError(Exception):
    exit_code = 2


class InputError(LabError, ValueError):
    exit_code = 3


class DomainError(LabError, ValueError):
    exit_code = 3


class CheckFailure(LabError):
    exit_code = 2


class QuadratureError(LabError):
    """Adaptive quadrature missed its tolerance; carries the best estimate."""

    exit_code = 4

    def __init__(self, message, best=float("nan"), error=float("nan")):
        super().__init__(f"{message} (best={best!r}, err={error!r})")
        self.best = best
        self.error = error


class FixedPointError(LabError):
    exit_code = 4


class InstabilityError(LabError):
    exit_code = 4

    def __init__(self, message, last_good_time=float("nan")):
        super().__init__(f"{message} (last good t={last_good_time!r})")
        self.last_good_time = last_good_time


class SingularityError(LabError):
    exit_code = 4


class OrthogonalityError(LabError):
    exit_code = 4


class ResolutionError(LabError):
    exit_code = 5
