"""Exception hierarchy shared by every surroforge module."""


class SurroforgeError(Exception):
    """Base class for all library errors."""


class InvalidSignal(SurroforgeError, ValueError):
    pass


class InvalidParameter(SurroforgeError, ValueError):
    pass


class DegenerateSignal(SurroforgeError, ValueError):
    """Raised when a signal has (near-)zero variance where spread is required."""


class CoverageGap(SurroforgeError, ValueError):
    def __init__(self, index):
        super().__init__(f"no window covers sample index {index}")
        self.index = index


class MissingChannel(SurroforgeError, KeyError):
    pass


class ShapeError(SurroforgeError, ValueError):
    pass


class TapeConsumed(SurroforgeError, RuntimeError):
    pass


class InvalidSpec(SurroforgeError, ValueError):
    pass


class InvalidDataset(SurroforgeError, ValueError):
    pass


class DivergenceError(SurroforgeError, ArithmeticError):
    def __init__(self, epoch, batch):
        super().__init__(f"loss became non-finite at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class MissingArtifact(SurroforgeError, LookupError):
    pass
