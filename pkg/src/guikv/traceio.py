"""Binary ``.gkvt`` trace container.

Layout (all integers little-endian)::

    "GKVT" | u32 version=1 | u32 flags (bit0: values present)
    u32 L, H_kv, G, d_h, n, omega, segment_count
    segment_count x (u32 start, u32 end, u8 kind, u32 step)
    L x float32 blocks: keys[H_kv,n,d_h], obs_queries[H_kv*G,omega,d_h],
                        hidden_norms[n], (values[H_kv,n,d_h] if bit0)
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .cache_model import LayerTrace, LayoutError, PromptLayout, Segment, SegmentKind, build_layout

MAGIC = b"GKVT"
VERSION = 1
FLAG_VALUES = 1

_PREAMBLE = struct.Struct("<4sII")
_HEADER = struct.Struct("<7I")
_SEGMENT = struct.Struct("<IIBI")
_CRC = struct.Struct("<I")


class TraceFormatError(ValueError):
    """Base class for unreadable trace files."""


class BadMagicError(TraceFormatError):
    pass


class UnsupportedVersionError(TraceFormatError):
    pass


class TruncatedTraceError(TraceFormatError):
    pass


class ChecksumError(TraceFormatError):
    pass


class ShapeMismatchError(TraceFormatError):
    pass


def encode_trace(layout: PromptLayout, traces: Sequence[LayerTrace]) -> bytes:
    if not traces:
        raise ValueError("need at least one layer")
    first = traces[0]
    h, n, d = first.keys.shape
    g = first.group
    has_values = first.values is not None
    for t in traces:
        t.check_layout(layout)
        if t.keys.shape != (h, n, d) or t.group != g or (t.values is not None) != has_values:
            raise ValueError("all layers must share shapes and value presence")
    parts = [
        _PREAMBLE.pack(MAGIC, VERSION, FLAG_VALUES if has_values else 0),
        _HEADER.pack(len(traces), h, g, d, n, layout.omega, len(layout.segments)),
    ]
    for s in layout.segments:
        parts.append(_SEGMENT.pack(s.start, s.end, int(s.kind), s.step))
    for t in traces:
        blocks = [t.keys, t.obs_queries, t.hidden_norms]
        if has_values:
            blocks.append(t.values)
        for b in blocks:
            parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def write_trace(path: str | Path, layout: PromptLayout, traces: Sequence[LayerTrace]) -> None:
    data = encode_trace(layout, traces)
    with open(path, "wb") as f:
        f.write(data)


def decode_trace(data: bytes) -> tuple[PromptLayout, list[LayerTrace]]:
    if len(data) < _PREAMBLE.size:
        raise TruncatedTraceError("file shorter than the trace preamble")
    magic, version, flags = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    off = _PREAMBLE.size
    if len(data) < off + _HEADER.size:
        raise TruncatedTraceError("file ends inside the header")
    L, h, g, d, n, omega, nseg = _HEADER.unpack_from(data, off)
    off += _HEADER.size
    if min(L, h, g, d, n, omega, nseg) == 0:
        raise ShapeMismatchError("header declares a zero dimension")
    per_layer = h * n * d + h * g * omega * d + n + (h * n * d if flags & FLAG_VALUES else 0)
    expected = off + nseg * _SEGMENT.size + 4 * L * per_layer + _CRC.size
    if len(data) < expected:
        raise TruncatedTraceError(f"file has {len(data)} bytes, header implies {expected}")
    if len(data) > expected:
        raise ShapeMismatchError(
            f"file has {len(data)} bytes but declared shapes account for {expected}")
    (stored_crc,) = _CRC.unpack_from(data, expected - _CRC.size)
    if zlib.crc32(data[:expected - _CRC.size]) != stored_crc:
        raise ChecksumError("CRC32 mismatch")
    segments = []
    for _ in range(nseg):
        start, end, kind, step = _SEGMENT.unpack_from(data, off)
        off += _SEGMENT.size
        if kind not in (0, 1):
            raise ShapeMismatchError(f"unknown segment kind {kind}")
        segments.append(Segment(start, end, SegmentKind(kind), step))
    try:
        layout = build_layout(segments, omega)
    except LayoutError as exc:
        raise ShapeMismatchError(f"invalid layout: {exc}") from exc
    if layout.n != n:
        raise ShapeMismatchError(f"segments cover {layout.n} tokens, header says {n}")

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        return arr.astype(np.float64)

    traces = []
    for layer in range(L):
        keys = take(h * n * d, (h, n, d))
        queries = take(h * g * omega * d, (h * g, omega, d))
        norms = take(n, (n,))
        values = take(h * n * d, (h, n, d)) if flags & FLAG_VALUES else None
        try:
            traces.append(LayerTrace(layer=layer, keys=keys, obs_queries=queries,
                                     hidden_norms=norms, group=g, values=values))
        except ValueError as exc:
            raise ShapeMismatchError(str(exc)) from exc
    return layout, traces


def read_trace(path: str | Path) -> tuple[PromptLayout, list[LayerTrace]]:
    with open(path, "rb") as f:
        return decode_trace(f.read())
