"""On-medium formats.  Everything is little-endian and 8-byte aligned."""

import enum
import struct

from .simpm import LINE

MAGIC = b"PMTXRGN\0"
FORMAT_VERSION = 1


class RuntimeKind(enum.IntEnum):
    UNDO = 1
    REDO = 2
    COW = 3


class TxnState(enum.IntEnum):
    IDLE = 0
    RUNNING = 1
    ABORTED = 2
    COMMITTED = 3


# region header, line 0
#   magic 8s | format_version u32 | runtime_kind u32 | root u64 | heap_meta u64
#   txn_table u64 | global_version u64 | size u64
HEADER = struct.Struct("<8sIIQQQQQ")
HDR_ROOT = 16
HDR_GLOBAL_VERSION = 40

# geometry, line 1
#   n_desc u32 | chunk_size u32 | n_chunks u32 | unit_size u32 | n_units u32 | pad u32
#   chunk_base u64 | heap_base u64 | meta_entry u32 | bitmap_bytes u32
GEOMETRY = struct.Struct("<IIIIIIQQII")
GEOMETRY_OFF = LINE

DESC_TABLE_OFF = 2 * LINE

# transaction descriptor, one line each
#   state u64 | version u64 | log_tail u64 | log_head u64
#   alloc_count u64 | alloc_head u64 | wset_count u64 | wset_head u64
DESC = struct.Struct("<QQQQQQQQ")
DESC_SIZE = LINE
D_STATE, D_VERSION, D_LOG_TAIL, D_LOG_HEAD = 0, 8, 16, 24
D_ALLOC_COUNT, D_ALLOC_HEAD, D_WSET_COUNT, D_WSET_HEAD = 32, 40, 48, 56

# log chunk header: next u64 | reserved u64
CHUNK_HDR = 16
SKIP_MARK = 0x534B49505F4E5854  # record moved on to the next chunk

# object header, 32 bytes in front of every heap block
#   plain:   size u32 | kind u16 | pad u16 | writers u64 | reserved 16
#   wrapper: size u32 | kind u16 | writer u16 | old u64 | new u64 | old_backup u64
OBJ_HDR = 32
OBJ_HEAD = struct.Struct("<IHH")
OBJ_WRITERS = 8
W_OLD, W_NEW, W_BACKUP = 8, 16, 24
WRAPPER = struct.Struct("<IHHQQQ")


class ObjKind(enum.IntEnum):
    FREE = 0
    PLAIN = 1
    WRAPPER = 2
    PAYLOAD = 3


# superblock meta entry: class u32 | span u32 | pad, then the bitmap
SB_HEAD = struct.Struct("<II")

# undo record: prolog u64 | version u64 | kind u32 | length u32 | target u64 | payload | checksum u64
UNDO_SENTINEL = 0x554E444F5F4C4F47
UNDO_HEAD = struct.Struct("<QQIIQ")
UNDO_DATA, UNDO_COMMIT = 1, 2

# redo record: version u64 | object_base u64 | offset u32 | length u32 | prev u64 | payload
REDO_HEAD = struct.Struct("<QQIIQ")

# allocation log record: version u64 | op u32 | flags u32 | unit u32 | block u32 | block_size u32 | span u32
ALLOC_REC = struct.Struct("<QIIIIII")
OP_ALLOC, OP_FREE = 1, 2
FLAG_EAGER = 1

# COW write-set record: version u64 | wrapper u64 | old_backup u64 | new u64
WSET_REC = struct.Struct("<QQQQ")


def pad8(n: int) -> int:
    return (n + 7) & ~7


def align(n: int, a: int) -> int:
    return (n + a - 1) // a * a


def undo_record_size(length: int) -> int:
    return UNDO_HEAD.size + pad8(length) + 8


def redo_record_size(length: int) -> int:
    return REDO_HEAD.size + pad8(length)
