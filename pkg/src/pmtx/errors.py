class PmError(Exception):
    """Base class for every error raised by pmtx."""


class PmRangeError(PmError, IndexError):
    pass


class CapacityError(PmError):
    pass


class FormatError(PmError):
    pass


class UsageError(PmError):
    pass


class BusyError(PmError):
    """Another transaction currently owns the object for writing."""


class ResourceExhausted(PmError):
    """No idle transaction descriptor is available; callers may retry."""


class AllocationError(PmError):
    pass
