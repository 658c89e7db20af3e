"""Range-variant asymmetric numeral system (rANS) entropy coder.

32-bit state, byte-at-a-time renormalization, 16-bit fixed-point
probabilities.  The encoder buffers (table, symbol) pairs and encodes them
in reverse at flush so the decoder can read forward; the byte stream starts
with the final state (big-endian) followed by renormalization bytes.

A correct decode returns the state to its initial value with every byte
consumed, which ``Decoder.verify_end`` checks; corruption and truncation
surface there (or earlier as an exhausted stream).
"""

from __future__ import annotations

import numpy as np

from .errors import BitstreamError, DomainError, ShapeError

PROB_BITS = 16
PROB_SCALE = 1 << PROB_BITS
STATE_LOW = 1 << 23
_MASK = PROB_SCALE - 1


class CdfTable:
    """Cumulative fixed-point frequencies: cum[0]=0, cum[-1]=2^16, freq >= 1."""

    __slots__ = ("cum",)

    def __init__(self, cum):
        cum = np.asarray(cum, dtype=np.uint32)
        if cum.ndim != 1 or len(cum) < 2:
            raise ShapeError(f"cdf needs at least one symbol, got shape {cum.shape}")
        if cum[0] != 0 or cum[-1] != PROB_SCALE:
            raise DomainError(f"cdf must span [0, {PROB_SCALE}], got "
                              f"[{cum[0]}, {cum[-1]}]")
        if np.any(np.diff(cum.astype(np.int64)) < 1):
            raise DomainError("cdf frequencies must all be >= 1")
        self.cum = cum

    @property
    def num_symbols(self) -> int:
        return len(self.cum) - 1

    def freq(self, s: int) -> int:
        return int(self.cum[s + 1] - self.cum[s])

    def lookup(self, cf: int) -> int:
        return int(np.searchsorted(self.cum, cf, side="right")) - 1


def quantize_pmf(pmf) -> np.ndarray:
    """Round a pmf to integer frequencies that are >= 1 and sum to 2^16."""
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or len(pmf) < 1:
        raise ShapeError(f"pmf must be a non-empty vector, got shape {pmf.shape}")
    if len(pmf) > PROB_SCALE - 1:
        raise DomainError(f"at most {PROB_SCALE - 1} symbols per table, got {len(pmf)}")
    if np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
        raise DomainError("pmf entries must be finite and non-negative")
    total = pmf.sum()
    if total <= 0:
        freqs = np.ones(len(pmf), dtype=np.int64)
    else:
        freqs = np.maximum(1, np.floor(pmf / total * PROB_SCALE + 0.5)).astype(np.int64)
    diff = PROB_SCALE - int(freqs.sum())
    if diff > 0:
        freqs[int(np.argmax(freqs))] += diff
    while diff < 0:
        # shave the largest entries; keeps every frequency at >= 1
        i = int(np.argmax(freqs))
        take = min(freqs[i] - 1, -diff)
        if take == 0:
            raise DomainError("pmf cannot be normalized: too many symbols")
        freqs[i] -= take
        diff += take
    return freqs


def table_from_freqs(freqs) -> CdfTable:
    freqs = np.asarray(freqs, dtype=np.int64)
    return CdfTable(np.concatenate([[0], np.cumsum(freqs)]))


# uniform byte table: encoding one symbol costs exactly 8 bits
BYTE_TABLE = CdfTable(np.arange(257, dtype=np.uint32) * 256)


class Encoder:
    """Buffering rANS encoder; push in decode order, flush once."""

    def __init__(self):
        self._tokens: list[tuple[CdfTable, int]] = []

    def push(self, table: CdfTable, symbol: int) -> None:
        if not 0 <= symbol < table.num_symbols:
            raise DomainError(f"symbol {symbol} outside table of "
                              f"{table.num_symbols} symbols")
        self._tokens.append((table, symbol))

    def flush(self) -> bytes:
        x = STATE_LOW
        out = bytearray()
        for table, s in reversed(self._tokens):
            f = table.freq(s)
            x_max = ((STATE_LOW >> PROB_BITS) << 8) * f
            while x >= x_max:
                out.append(x & 0xFF)
                x >>= 8
            x = (x // f) * PROB_SCALE + (x % f) + int(table.cum[s])
        out.extend(x.to_bytes(4, "little"))
        return bytes(reversed(out))


class Decoder:
    """Streaming decoder over one flushed payload."""

    def __init__(self, data: bytes):
        if len(data) < 4:
            raise BitstreamError(f"payload too short ({len(data)} bytes)")
        self._data = data
        self._x = int.from_bytes(data[:4], "big")
        self._pos = 4

    def decode(self, table: CdfTable) -> int:
        cf = self._x & _MASK
        s = table.lookup(cf)
        self._x = table.freq(s) * (self._x >> PROB_BITS) + cf - int(table.cum[s])
        while self._x < STATE_LOW:
            if self._pos >= len(self._data):
                raise BitstreamError("payload exhausted mid-symbol")
            self._x = (self._x << 8) | self._data[self._pos]
            self._pos += 1
        return s

    def verify_end(self) -> None:
        """After the last symbol a healthy stream sits exactly at its start state."""
        if self._x != STATE_LOW or self._pos != len(self._data):
            raise BitstreamError(
                f"corrupt payload: state {self._x:#x} at byte {self._pos} "
                f"of {len(self._data)}")


def rans_encode(symbols, tables) -> bytes:
    """Encode symbols[i] with tables[i]; an empty sequence yields a bare header."""
    if len(symbols) != len(tables):
        raise ShapeError(f"{len(symbols)} symbols vs {len(tables)} tables")
    enc = Encoder()
    for s, t in zip(symbols, tables):
        enc.push(t, int(s))
    return enc.flush()


def rans_decode(data: bytes, tables) -> list[int]:
    dec = Decoder(data)
    out = [dec.decode(t) for t in tables]
    dec.verify_end()
    return out
