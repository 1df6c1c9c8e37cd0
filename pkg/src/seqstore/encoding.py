"""Trait-aware columnar encodings for stripe columns.

Four encodings, chosen per column from the value profile:

* ``DELTA_VARINT``: fully present, non-decreasing integers. Payload is
  ``varint(scale) zz(first) zz(delta_1 / scale) ...`` where ``scale`` is the
  GCD of the deltas, so millisecond timestamps at second granularity cost
  the same as second timestamps.
* ``PRESENCE_BITMAP``: fewer than half the values present. Type tag, an
  LSB-first bitmap, then the present values packed in plain form.
* ``DICTIONARY``: at most 256 distinct values (missing counts as one).
  Type tag, entry count u16, entries (nullable plain form), one u8 code per
  value. Entries are ordered by first occurrence.
* ``PLAIN``: type tag, a nullable flag, then per value an optional presence
  byte and the fixed-width value.

Plain value forms: u64/i64 are 8 bytes LE, f32 is 4 bytes LE, strings are a
u8 length followed by UTF-8 bytes.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Sequence

from seqstore.errors import EncodingError

MISSING = None


class Encoding(enum.IntEnum):
    DELTA_VARINT = 0
    PRESENCE_BITMAP = 1
    DICTIONARY = 2
    PLAIN = 3


class ValueType(enum.IntEnum):
    U64 = 0
    I64 = 1
    F32 = 2
    STR = 3


@dataclass(frozen=True)
class EncodedColumn:
    trait_name: str
    encoding: Encoding
    payload: bytes

    @property
    def size(self) -> int:
        return len(self.payload)


_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F32 = struct.Struct("<f")
_U16 = struct.Struct("<H")


def zigzag(v: int) -> int:
    return (v << 1) if v >= 0 else ((-v) << 1) - 1


def unzigzag(z: int) -> int:
    return (z >> 1) if not z & 1 else -((z + 1) >> 1)


def write_varint(out: bytearray, v: int) -> None:
    """Unsigned LEB128."""
    if v < 0:
        raise EncodingError(f"varint cannot encode negative value {v}")
    while v >= 0x80:
        out.append((v & 0x7F) | 0x80)
        v >>= 7
    out.append(v)


def read_varint(buf: bytes | memoryview, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if b < 0x80:
            return result, pos
        shift += 7


def _is_int(v: object) -> bool:
    return type(v) is int or (isinstance(v, int) and not isinstance(v, bool))


def infer_type(values: Sequence[object]) -> ValueType:
    """Value type of the present values; raises on mixed or out-of-range input."""
    present = [v for v in values if v is not MISSING]
    if not present:
        return ValueType.U64
    types = {type(v) for v in present}
    if types == {int} or all(_is_int(v) for v in present):
        lo, hi = min(present), max(present)
        if lo >= 0:
            if hi > (1 << 64) - 1:
                raise EncodingError(f"integer {hi} exceeds u64 range")
            return ValueType.U64
        if lo < -(1 << 63) or hi >= (1 << 63):
            raise EncodingError(f"integers [{lo}, {hi}] exceed i64 range")
        return ValueType.I64
    if all(isinstance(v, float) for v in present):
        for v in present:
            try:
                if _F32.unpack(_F32.pack(v))[0] != v:
                    raise EncodingError(f"float {v!r} is not representable as f32")
            except OverflowError:
                raise EncodingError(f"float {v!r} overflows f32") from None
        return ValueType.F32
    if all(isinstance(v, str) for v in present):
        for v in present:
            if len(v.encode()) > 255:
                raise EncodingError(f"string of {len(v.encode())} bytes exceeds 255")
        return ValueType.STR
    kinds = sorted({type(v).__name__ for v in present})
    raise EncodingError(f"unsupported or mixed value types {kinds}")


def _write_value(out: bytearray, vt: ValueType, v: object) -> None:
    if vt is ValueType.U64:
        out += _U64.pack(v)
    elif vt is ValueType.I64:
        out += _I64.pack(v)
    elif vt is ValueType.F32:
        out += _F32.pack(v)
    else:
        raw = v.encode()  # type: ignore[union-attr]
        out.append(len(raw))
        out += raw


def _read_value(buf: memoryview, pos: int, vt: ValueType) -> tuple[object, int]:
    if vt is ValueType.U64:
        return _U64.unpack_from(buf, pos)[0], pos + 8
    if vt is ValueType.I64:
        return _I64.unpack_from(buf, pos)[0], pos + 8
    if vt is ValueType.F32:
        return _F32.unpack_from(buf, pos)[0], pos + 4
    n = buf[pos]
    return bytes(buf[pos + 1 : pos + 1 + n]).decode(), pos + 1 + n


def _is_monotone_int(values: Sequence[object]) -> bool:
    if not values or not ({type(v) for v in values} == {int} or all(_is_int(v) for v in values)):
        return False
    return all(a <= b for a, b in zip(values, values[1:]))  # type: ignore[operator]


def _encode_delta(values: Sequence[int]) -> bytes:
    infer_type(values)
    deltas = [b - a for a, b in zip(values, values[1:])]
    scale = 0
    for d in deltas:
        scale = math.gcd(scale, d)
    scale = scale or 1
    out = bytearray()
    write_varint(out, scale)
    write_varint(out, zigzag(values[0]))
    for d in deltas:
        write_varint(out, zigzag(d // scale))
    return bytes(out)


def _decode_delta(buf: memoryview, n: int) -> list[int]:
    scale, pos = read_varint(buf, 0)
    z, pos = read_varint(buf, pos)
    cur = unzigzag(z)
    out = [cur]
    for _ in range(n - 1):
        z, pos = read_varint(buf, pos)
        cur += unzigzag(z) * scale
        out.append(cur)
    return out


def delta_values(column: EncodedColumn, n: int) -> list[int]:
    """The logical delta sequence of a DELTA_VARINT column (first value absolute)."""
    values = _decode_delta(memoryview(column.payload), n)
    return values[:1] + [b - a for a, b in zip(values, values[1:])]


def _encode_bitmap(values: Sequence[object], vt: ValueType) -> bytes:
    out = bytearray([vt])
    bitmap = bytearray((len(values) + 7) // 8)
    for i, v in enumerate(values):
        if v is not MISSING:
            bitmap[i >> 3] |= 1 << (i & 7)
    out += bitmap
    for v in values:
        if v is not MISSING:
            _write_value(out, vt, v)
    return bytes(out)


def _decode_bitmap(buf: memoryview, n: int) -> list[object]:
    vt = ValueType(buf[0])
    nbytes = (n + 7) // 8
    bitmap = buf[1 : 1 + nbytes]
    pos = 1 + nbytes
    out: list[object] = []
    for i in range(n):
        if bitmap[i >> 3] >> (i & 7) & 1:
            v, pos = _read_value(buf, pos, vt)
            out.append(v)
        else:
            out.append(MISSING)
    return out


def _encode_plain(values: Sequence[object], vt: ValueType) -> bytes:
    nullable = any(v is MISSING for v in values)
    out = bytearray([vt, int(nullable)])
    for v in values:
        if nullable:
            out.append(v is not MISSING)
            if v is MISSING:
                continue
        _write_value(out, vt, v)
    return bytes(out)


def _decode_plain(buf: memoryview, n: int) -> list[object]:
    vt = ValueType(buf[0])
    nullable = buf[1]
    pos = 2
    out: list[object] = []
    for _ in range(n):
        if nullable:
            flag = buf[pos]
            pos += 1
            if not flag:
                out.append(MISSING)
                continue
        v, pos = _read_value(buf, pos, vt)
        out.append(v)
    return out


def _dictionary_entries(values: Sequence[object]) -> list[object]:
    seen: dict[object, int] = {}
    for v in values:
        # (type, value) keys keep 1 and 1.0 apart
        key = (type(v), v)
        if key not in seen:
            seen[key] = len(seen)
    return [k[1] for k in seen]


def _encode_dictionary(values: Sequence[object], vt: ValueType) -> bytes:
    entries = _dictionary_entries(values)
    if len(entries) > 256:
        raise EncodingError(f"{len(entries)} distinct values exceed the 256-entry dictionary")
    code = {(type(v), v): i for i, v in enumerate(entries)}
    out = bytearray([vt])
    out += _U16.pack(len(entries))
    for v in entries:
        out.append(v is not MISSING)
        if v is not MISSING:
            _write_value(out, vt, v)
    out += bytes(code[(type(v), v)] for v in values)
    return bytes(out)


def _decode_dictionary(buf: memoryview, n: int) -> list[object]:
    vt = ValueType(buf[0])
    (count,) = _U16.unpack_from(buf, 1)
    pos = 3
    entries: list[object] = []
    for _ in range(count):
        flag = buf[pos]
        pos += 1
        if flag:
            v, pos = _read_value(buf, pos, vt)
            entries.append(v)
        else:
            entries.append(MISSING)
    return [entries[c] for c in buf[pos : pos + n]]


def choose_encoding(values: Sequence[object]) -> Encoding:
    """Pick an encoding from the column's profile."""
    if _is_monotone_int(values):
        return Encoding.DELTA_VARINT
    present = sum(v is not MISSING for v in values)
    if values and present * 2 < len(values):
        return Encoding.PRESENCE_BITMAP
    return Encoding.PLAIN


def encode_column(trait_name: str, values: Sequence[object], encoding: Encoding | None = None) -> EncodedColumn:
    """Encode one column; ``encoding=None`` selects by value profile.

    Dictionary encoding is chosen automatically only when it is smaller
    than plain encoding of the same values.
    """
    vt = infer_type(values)
    if encoding is None:
        encoding = choose_encoding(values)
        if encoding is Encoding.PLAIN and len(_dictionary_entries(values)) <= 256:
            plain = _encode_plain(values, vt)
            dictionary = _encode_dictionary(values, vt)
            if len(dictionary) < len(plain):
                return EncodedColumn(trait_name, Encoding.DICTIONARY, dictionary)
            return EncodedColumn(trait_name, Encoding.PLAIN, plain)
    if encoding is Encoding.DELTA_VARINT:
        if not values or not ({type(v) for v in values} == {int} or all(_is_int(v) for v in values)):
            raise EncodingError(f"column {trait_name!r}: delta encoding needs fully present integers")
        payload = _encode_delta(values)  # type: ignore[arg-type]
    elif encoding is Encoding.PRESENCE_BITMAP:
        payload = _encode_bitmap(values, vt)
    elif encoding is Encoding.DICTIONARY:
        payload = _encode_dictionary(values, vt)
    else:
        payload = _encode_plain(values, vt)
    return EncodedColumn(trait_name, Encoding(encoding), payload)


_DECODERS = {
    Encoding.DELTA_VARINT: _decode_delta,
    Encoding.PRESENCE_BITMAP: _decode_bitmap,
    Encoding.DICTIONARY: _decode_dictionary,
    Encoding.PLAIN: _decode_plain,
}


def decode_column(column: EncodedColumn, event_count: int) -> list[object]:
    """Decode exactly ``event_count`` values (``None`` marks a missing value)."""
    if event_count == 0:
        return []
    return _DECODERS[column.encoding](memoryview(column.payload), event_count)


def decode_payload(encoding: Encoding, payload: bytes | memoryview, event_count: int) -> list[object]:
    if event_count == 0:
        return []
    return _DECODERS[encoding](memoryview(payload), event_count)
