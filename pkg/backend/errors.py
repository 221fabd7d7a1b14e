"""Exception hierarchy shared by the engine and the runner."""


class HardWallError(Exception):
    """Base class for every error raised by the engine."""


class GridTooNarrowError(HardWallError):
    """The tail grid cannot hold the requested depth without losing mass."""


class CorruptCacheError(HardWallError):
    """A cached tail table failed its checksum or was truncated."""


class VersionMismatchError(HardWallError):
    """A cached tail table was written by an incompatible format version."""


class DegenerateKernelError(HardWallError):
    """A conditioned kernel has no mass left after reweighting."""


class WindowEscapeError(HardWallError):
    """Propagated mass reached the edge of its computation window."""


class BudgetExceededError(HardWallError):
    """A run or an oracle exhausted its time or attempt budget."""


class ConfigInvalidError(HardWallError):
    """An experiment configuration failed validation."""


class EmptyBatchError(HardWallError):
    """A statistic was requested on an empty sample batch."""


class InsufficientSamplesError(HardWallError):
    """A fit or estimator received fewer samples than it requires."""
