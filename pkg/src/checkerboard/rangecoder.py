"""Byte-oriented range coder over integer CDF tables.

32-bit range, 16-bit frequencies, carry propagation through a cached byte
plus a run of pending 0xFF bytes.  The flush writes a single byte: any value
in the final interval that is a multiple of 2**24 identifies the message,
and the decoder supplies the three implied zero bytes itself.  A valid
stream is therefore consumed to exactly ``len(data) + 3`` bytes, which is
how truncation and trailing garbage are detected.

The inner loops are compiled with numba when it is importable.
"""

import numpy as np

from .entropy import CdfTable, PRECISION
from .errors import ContractError, DecodeError

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
IMPLIED_BYTES = 3

# encoder state slots
_LOW, _RANGE, _CACHE, _PENDING, _STARTED, _POS = range(6)
# decoder state slots
_CODE, _DRANGE, _DPOS, _ERR = range(4)


@njit(cache=True)
def _shift_low(state, out):
    low = state[_LOW]
    if low < 0xFF000000 or low > MASK32:
        carry = low >> 32
        if state[_STARTED]:
            out[state[_POS]] = (state[_CACHE] + carry) & 0xFF
            state[_POS] += 1
        state[_STARTED] = 1
        for _ in range(state[_PENDING] - 1):
            out[state[_POS]] = (0xFF + carry) & 0xFF
            state[_POS] += 1
        state[_PENDING] = 0
        state[_CACHE] = (low >> 24) & 0xFF
    state[_PENDING] += 1
    state[_LOW] = (low << 8) & MASK32


@njit(cache=True)
def _encode_kernel(state, out, cdfs, rows, symbols, precision):
    for i in range(symbols.shape[0]):
        row = rows[i]
        s = symbols[i]
        start = cdfs[row, s]
        freq = cdfs[row, s + 1] - start
        r = state[_RANGE] >> precision
        state[_LOW] += r * start
        state[_RANGE] = r * freq
        while state[_RANGE] < TOP:
            state[_RANGE] <<= 8
            _shift_low(state, out)


@njit(cache=True)
def _flush_kernel(state, out):
    low = state[_LOW]
    state[_LOW] = (low + TOP - 1) & ~(TOP - 1)
    _shift_low(state, out)
    _shift_low(state, out)


@njit(cache=True)
def _next_byte(state, data):
    pos = state[_DPOS]
    state[_DPOS] = pos + 1
    if pos < data.shape[0]:
        return np.int64(data[pos])
    if pos >= data.shape[0] + IMPLIED_BYTES:
        state[_ERR] = 1
    return np.int64(0)


@njit(cache=True)
def _decode_kernel(state, data, cdfs, rows, out, precision):
    total = np.int64(1) << precision
    for i in range(rows.shape[0]):
        row = rows[i]
        r = state[_DRANGE] >> precision
        target = state[_CODE] // r
        if target >= total:
            state[_ERR] = 2
            return i
        lo = 0
        hi = cdfs.shape[1] - 1
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if cdfs[row, mid] <= target:
                lo = mid
            else:
                hi = mid
        start = cdfs[row, lo]
        state[_CODE] -= r * start
        state[_DRANGE] = r * (cdfs[row, lo + 1] - start)
        while state[_DRANGE] < TOP:
            state[_CODE] = ((state[_CODE] << 8) | _next_byte(state, data)) & MASK32
            state[_DRANGE] <<= 8
        if state[_ERR]:
            return i
        out[i] = lo
    return rows.shape[0]


def _single_table(table):
    return np.asarray(table.cdf, dtype=np.int64)[None, :]


class RangeEncoder:
    """Accumulates symbols; :meth:`finalize` returns the byte stream."""

    def __init__(self, precision_bits=PRECISION):
        self.precision = precision_bits
        self._state = np.zeros(6, dtype=np.int64)
        self._state[_RANGE] = MASK32
        self._state[_PENDING] = 1
        self._out = np.zeros(64, dtype=np.uint8)
        self._finished = False
        self.symbols_coded = 0

    def _reserve(self, n_symbols):
        need = int(self._state[_POS]) + int(self._state[_PENDING]) + 2 * n_symbols + 16
        if need > len(self._out):
            grown = np.zeros(max(need, 2 * len(self._out)), dtype=np.uint8)
            grown[: len(self._out)] = self._out
            self._out = grown

    def encode_symbol(self, table, symbol):
        """Code one symbol against a :class:`CdfTable`."""
        if not table.s_min <= symbol <= table.s_max:
            raise ContractError(f"symbol {symbol} outside table range [{table.s_min}, {table.s_max}]")
        self.encode_batch(np.array([symbol]), _single_table(table), np.zeros(1, dtype=np.int64), table.s_min)

    def encode_batch(self, symbols, cdfs, rows, s_min):
        """Code ``symbols[i]`` against ``cdfs[rows[i]]`` for every i, in order."""
        if self._finished:
            raise ContractError("encoder already finalized")
        sym = np.ascontiguousarray(symbols, dtype=np.int64).reshape(-1) - s_min
        rows = np.ascontiguousarray(rows, dtype=np.int64).reshape(-1)
        if sym.shape != rows.shape:
            raise ContractError("symbols and table rows must have the same length")
        if sym.size and (sym.min() < 0 or sym.max() > cdfs.shape[1] - 2):
            raise ContractError("symbol outside table range")
        self._reserve(sym.size)
        _encode_kernel(self._state, self._out, np.ascontiguousarray(cdfs, dtype=np.int64), rows, sym, self.precision)
        self.symbols_coded += sym.size

    def finalize(self):
        if not self._finished:
            self._reserve(0)
            _flush_kernel(self._state, self._out)
            self._finished = True
        return self._out[: self._state[_POS]].tobytes()


class RangeDecoder:
    """Mirror of :class:`RangeEncoder`.

    Decoding with a table sequence other than the encoder's is not detected
    here in general; it surfaces as wrong symbols or a :class:`DecodeError`.
    """

    def __init__(self, data, precision_bits=PRECISION):
        self.precision = precision_bits
        self._data = np.frombuffer(bytes(data), dtype=np.uint8)
        self._state = np.zeros(4, dtype=np.int64)
        self._state[_DRANGE] = MASK32
        code = 0
        for _ in range(4):
            code = (code << 8) | int(_next_byte(self._state, self._data))
        self._state[_CODE] = code
        if self._state[_ERR]:
            raise DecodeError("stream is too short to initialise the decoder")

    def decode_symbol(self, table):
        out = self.decode_batch(_single_table(table), np.zeros(1, dtype=np.int64), table.s_min)
        return int(out[0])

    def decode_batch(self, cdfs, rows, s_min):
        rows = np.ascontiguousarray(rows, dtype=np.int64).reshape(-1)
        out = np.zeros(rows.size, dtype=np.int64)
        done = _decode_kernel(
            self._state, self._data, np.ascontiguousarray(cdfs, dtype=np.int64), rows, out, self.precision
        )
        if self._state[_ERR] == 1:
            raise DecodeError(f"stream truncated after {done} of {rows.size} symbols")
        if self._state[_ERR]:
            raise DecodeError(f"corrupt stream at symbol {done} of {rows.size}")
        return out + s_min

    @property
    def bytes_consumed(self):
        return int(self._state[_DPOS])

    def finish(self):
        """Check that exactly the encoder's bytes were consumed."""
        expected = len(self._data) + IMPLIED_BYTES
        if self.bytes_consumed != expected:
            raise DecodeError(
                f"stream length mismatch: consumed {self.bytes_consumed - IMPLIED_BYTES} of {len(self._data)} bytes"
            )


def encode_symbols(symbols, tables):
    """Convenience: code a list of symbols against a list of CdfTables."""
    enc = RangeEncoder(tables[0].precision_bits if tables else PRECISION)
    for s, t in zip(symbols, tables):
        enc.encode_symbol(t, int(s))
    return enc.finalize()


def decode_symbols(data, tables):
    dec = RangeDecoder(data, tables[0].precision_bits if tables else PRECISION)
    out = [dec.decode_symbol(t) for t in tables]
    dec.finish()
    return out


def ideal_bits(symbols, cdfs, rows, s_min, precision_bits=PRECISION):
    """``sum(-log2(freq / 2**precision))`` for a batch, matching the coder's tables."""
    sym = np.asarray(symbols, dtype=np.int64).reshape(-1) - s_min
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    freq = cdfs[rows, sym + 1] - cdfs[rows, sym]
    return float(-np.log2(freq / float(1 << precision_bits)).sum())


__all__ = [
    "CdfTable",
    "RangeEncoder",
    "RangeDecoder",
    "encode_symbols",
    "decode_symbols",
    "ideal_bits",
]
