"""Optional glibc malloc tuning for array-heavy workloads.

Every tape op allocates fresh buffers, and glibc serves blocks above its
mmap threshold straight from mmap/munmap, which is expensive under some
kernels and sandboxes. Raising the threshold keeps those buffers on the
reusable heap. Harmless no-op where glibc or mallopt is unavailable.
"""

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_THRESHOLD_BYTES = 256 * 1024 * 1024


def tune_malloc() -> bool:
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok1 = libc.mallopt(_M_MMAP_THRESHOLD, _THRESHOLD_BYTES)
        ok2 = libc.mallopt(_M_TRIM_THRESHOLD, _THRESHOLD_BYTES)
        return bool(ok1 and ok2)
    except (OSError, AttributeError):
        return False
