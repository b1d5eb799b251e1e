"""CRC-64/XZ (ECMA-182 polynomial, reflected, init and xorout all ones).

Check value for b"123456789" is 0x995DC9BBDF1939FA.
"""

import numpy as np
from numba import njit

_POLY_REFLECTED = 0xC96C5795D7870F42


def _make_table():
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _POLY_REFLECTED if crc & 1 else crc >> 1
        table[i] = crc
    return table


_TABLE = _make_table()


@njit(cache=True)
def _update(crc, data, table):
    for b in data:
        crc = table[(crc ^ np.uint64(b)) & np.uint64(0xFF)] ^ (crc >> np.uint64(8))
    return crc


def crc64(data, crc=0):
    """CRC of ``data`` (bytes-like); pass a previous result as ``crc`` to continue."""
    buf = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
    state = np.uint64(crc ^ 0xFFFFFFFFFFFFFFFF)
    state = _update(state, buf, _TABLE)
    return int(state) ^ 0xFFFFFFFFFFFFFFFF
