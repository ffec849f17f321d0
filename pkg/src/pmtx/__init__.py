"""Failure-atomic transactions over simulated persistent memory."""

from .errors import (AllocationError, BusyError, CapacityError, FormatError, PmError, PmRangeError,
                     ResourceExhausted, UsageError)
from .layout import RuntimeKind, TxnState
from .region import Region, RegionConfig, region_create, region_open
from .simpm import CostReport, CrashPolicy, FlushMode, LineState, Pdom, PdomConfig, PersistentMedium
from .txn import Mode, Txn

__version__ = "0.1.0"


def txn_begin(region: Region) -> Txn:
    return region.begin()


def pm_alloc(txn: Txn, size: int) -> int:
    return txn.alloc(size)


def pm_free(txn: Txn, ref: int):
    txn.free(ref)


__all__ = [
    "AllocationError", "BusyError", "CapacityError", "CostReport", "CrashPolicy", "FlushMode",
    "FormatError", "LineState", "Mode", "Pdom", "PdomConfig", "PersistentMedium", "PmError",
    "PmRangeError", "Region", "RegionConfig", "ResourceExhausted", "RuntimeKind", "Txn", "TxnState",
    "UsageError", "pm_alloc", "pm_free", "region_create", "region_open", "txn_begin",
]
