"""Exception hierarchy shared across the package."""


class LivtError(Exception):
    """Base class for every error raised by livt."""


class ProfileError(LivtError, ValueError):
    """Bad imbalance profile parameters (gamma < 1, empty tail, n_min > n_max)."""


class PriorError(LivtError, ValueError):
    """A class prior that cannot be built or used (zero counts, degenerate C)."""


class CoverageError(LivtError, ValueError):
    """Source dataset holds fewer instances of a class than the profile asks for."""

    def __init__(self, cls: int, have: int, need: int):
        super().__init__(f"class {cls}: source has {have} instances, profile needs {need}")
        self.cls = cls
        self.have = have
        self.need = need


class ShapeError(LivtError, ValueError):
    pass


class TargetError(LivtError, ValueError):
    """Targets outside the domain a loss accepts."""


class ConfigError(LivtError, ValueError):
    pass


class MaskError(LivtError, ValueError):
    pass


class NumericalError(LivtError, FloatingPointError):
    """Non-finite value detected; ``name`` identifies the offending tensor."""

    def __init__(self, name: str, detail: str = ""):
        msg = f"non-finite values in {name}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.name = name


class ScheduleError(LivtError, ValueError):
    pass


class OptimizerError(LivtError, ValueError):
    pass


class MetricError(LivtError, ValueError):
    pass


class OracleError(LivtError, ValueError):
    pass


class FormatError(LivtError, ValueError):
    """Corrupt or foreign file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset
