"""Exception hierarchy for mbe_lab."""


class MBELabError(Exception):
    """Base class for all library errors."""


class InvalidGrid(MBELabError, ValueError):
    pass


class OddGridSize(InvalidGrid):
    pass


class NegativeOrder(MBELabError, ValueError):
    pass


class NegativeTime(MBELabError, ValueError):
    pass


class GridMismatch(MBELabError, ValueError):
    pass


class NonFiniteField(MBELabError, FloatingPointError):
    pass


class UnderResolved(MBELabError, ValueError):
    pass


class DegenerateFit(MBELabError, ValueError):
    pass


class BlowUpDetected(MBELabError, RuntimeError):
    def __init__(self, message, t=None, value=None):
        super().__init__(message)
        self.t = t
        self.value = value


class MeanModeDiverges(MBELabError, ValueError):
    pass


class UnstableNoiseProfile(MBELabError, ValueError):
    pass


class MissingProbe(MBELabError, KeyError):
    pass


class WrongRegime(MBELabError, ValueError):
    pass


class WindowOutsideRecord(MBELabError, ValueError):
    pass


class EnsembleError(MBELabError, RuntimeError):
    """Raised when one or more ensemble members fail.

    ``failures`` is a list of ``(index, seed, message)`` tuples.
    """

    def __init__(self, failures):
        self.failures = list(failures)
        lines = [f"sample {i} (seed {s}): {msg}" for i, s, msg in self.failures]
        super().__init__(f"{len(self.failures)} ensemble member(s) failed:\n" + "\n".join(lines))


class ConfigError(MBELabError, ValueError):
    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.key = key
        self.line = line


class UnknownKey(ConfigError):
    pass


class ConfigTypeError(ConfigError):
    pass


class MissingRequired(ConfigError):
    pass
