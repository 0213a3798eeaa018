"""Time-tag event model and a bit-exact binary stream format.

A tag stream is the common currency between the detector simulator and the
analysis code: an ordered sequence of (channel, tick) detection events on a
fixed discrete clock, plus a small self-describing header. Tick values count
clock quanta (156.25 ps by default) from the start of the acquisition.

Binary layout, all integers little-endian:

    magic         4 bytes   b"GTAG"
    version       u16       currently 1
    quantum_ps    f64       clock quantum in picoseconds
    channel_count u8
    duration_s    f64       acquisition duration in seconds
    n_meta        u16       number of metadata key/value pairs
    per pair:     u16 key length, UTF-8 key bytes, u16 value length, UTF-8 value bytes
    events        9 bytes each: u8 channel, u64 tick

Total file size is exactly header length + 9 * n_events.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Mapping

import numpy as np

MAGIC = b"GTAG"
FORMAT_VERSION = 1
DEFAULT_QUANTUM_PS = 156.25
EVENT_BYTES = 9

_FIXED_HEADER = struct.Struct("<4sHdBd")
_U16 = struct.Struct("<H")
_EVENT_DTYPE = np.dtype([("channel", "u1"), ("tick", "<u8")])

_WRITE_CHUNK = 1 << 22  # events per write, keeps peak buffer size ~36 MB


class StreamFormatError(ValueError):
    """Malformed stream data; ``offset`` is the byte position of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class TimeTag:
    """One detection event: tagger channel and clock-quantum count."""

    channel: int
    tick: int


@dataclass(frozen=True)
class StreamHeader:
    quantum_ps: float = DEFAULT_QUANTUM_PS
    channel_count: int = 16
    duration_s: float = 0.0
    metadata: Mapping[str, str] = field(default_factory=dict)

    @property
    def quantum_s(self) -> float:
        return self.quantum_ps * 1e-12

    def validate(self) -> None:
        if not self.quantum_ps > 0:
            raise ValueError(f"clock quantum must be positive, got {self.quantum_ps} ps")
        if not 1 <= self.channel_count <= 255:
            raise ValueError(f"channel_count must be in [1, 255], got {self.channel_count}")
        if self.duration_s < 0:
            raise ValueError(f"duration must be non-negative, got {self.duration_s}")
        for key, value in self.metadata.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ValueError("metadata must map str to str")


class TagStream:
    """Immutable, time-ordered event stream.

    Events are stored as parallel numpy arrays (``channels`` u8, ``ticks``
    u64). Instances are safe to share read-only across analysis tasks; the
    arrays are marked non-writeable at construction.
    """

    __slots__ = ("header", "channels", "ticks")

    def __init__(self, header: StreamHeader, channels: np.ndarray, ticks: np.ndarray):
        header.validate()
        channels = np.ascontiguousarray(channels, dtype=np.uint8)
        ticks = np.ascontiguousarray(ticks, dtype=np.uint64)
        if channels.shape != ticks.shape or channels.ndim != 1:
            raise ValueError("channels and ticks must be 1-D arrays of equal length")
        if ticks.size:
            if np.any(ticks[1:] < ticks[:-1]):
                idx = int(np.argmax(ticks[1:] < ticks[:-1])) + 1
                raise ValueError(f"ticks must be non-decreasing (violation at event {idx})")
            if np.any(channels >= header.channel_count):
                raise ValueError(f"channel values must be < {header.channel_count}")
            last_t = float(ticks[-1]) * header.quantum_s
            if last_t > header.duration_s:
                raise ValueError(
                    f"last event at {last_t:.6g} s exceeds declared duration {header.duration_s:.6g} s"
                )
        channels.setflags(write=False)
        ticks.setflags(write=False)
        self.header = header
        self.channels = channels
        self.ticks = ticks

    @classmethod
    def from_times(
        cls,
        times_s: np.ndarray,
        duration_s: float,
        quantum_ps: float = DEFAULT_QUANTUM_PS,
        channel: int = 0,
        channel_count: int = 16,
        metadata: Mapping[str, str] | None = None,
    ) -> "TagStream":
        """Quantize sorted event times (seconds) onto the tick clock."""
        times_s = np.asarray(times_s, dtype=np.float64)
        quantum_s = quantum_ps * 1e-12
        ticks = np.floor(times_s / quantum_s).astype(np.uint64)
        # Guard against float round-up at the acquisition edge.
        if ticks.size:
            keep = ticks.astype(np.float64) * quantum_s <= duration_s
            ticks = ticks[keep]
        header = StreamHeader(
            quantum_ps=quantum_ps,
            channel_count=channel_count,
            duration_s=duration_s,
            metadata=dict(metadata or {}),
        )
        channels = np.full(ticks.shape, channel, dtype=np.uint8)
        return cls(header, channels, ticks)

    @property
    def n_events(self) -> int:
        return int(self.ticks.size)

    def __len__(self) -> int:
        return self.n_events

    def __eq__(self, other) -> bool:
        if not isinstance(other, TagStream):
            return NotImplemented
        return (
            self.header.quantum_ps == other.header.quantum_ps
            and self.header.channel_count == other.header.channel_count
            and self.header.duration_s == other.header.duration_s
            and dict(self.header.metadata) == dict(other.header.metadata)
            and np.array_equal(self.channels, other.channels)
            and np.array_equal(self.ticks, other.ticks)
        )

    def __repr__(self) -> str:
        return (
            f"TagStream({self.n_events} events, {self.header.duration_s} s, "
            f"quantum {self.header.quantum_ps} ps)"
        )

    def events(self) -> Iterator[TimeTag]:
        for ch, tick in zip(self.channels, self.ticks):
            yield TimeTag(int(ch), int(tick))

    def times_s(self) -> np.ndarray:
        """Event times in seconds (float64)."""
        return self.ticks.astype(np.float64) * self.header.quantum_s

    def mean_rate_hz(self) -> float:
        if self.header.duration_s <= 0:
            return 0.0
        return self.n_events / self.header.duration_s


def _as_sink(sink) -> tuple[BinaryIO, bool]:
    if hasattr(sink, "write"):
        return sink, False
    return open(sink, "wb"), True


def _as_source(source) -> tuple[BinaryIO, bool]:
    if hasattr(source, "read"):
        return source, False
    return open(source, "rb"), True


def write_stream(stream: TagStream, sink) -> int:
    """Serialize a stream; returns the number of bytes written.

    The byte count is always header length + 9 bytes per event.
    """
    fh, owned = _as_sink(sink)
    try:
        meta = dict(stream.header.metadata)
        parts = [
            _FIXED_HEADER.pack(
                MAGIC,
                FORMAT_VERSION,
                stream.header.quantum_ps,
                stream.header.channel_count,
                stream.header.duration_s,
            ),
            _U16.pack(len(meta)),
        ]
        for key, value in meta.items():
            kb = key.encode("utf-8")
            vb = value.encode("utf-8")
            parts.append(_U16.pack(len(kb)) + kb + _U16.pack(len(vb)) + vb)
        header_bytes = b"".join(parts)
        fh.write(header_bytes)
        written = len(header_bytes)
        n = stream.n_events
        for lo in range(0, n, _WRITE_CHUNK):
            hi = min(lo + _WRITE_CHUNK, n)
            block = np.empty(hi - lo, dtype=_EVENT_DTYPE)
            block["channel"] = stream.channels[lo:hi]
            block["tick"] = stream.ticks[lo:hi]
            fh.write(block.tobytes())
            written += (hi - lo) * EVENT_BYTES
        return written
    finally:
        if owned:
            fh.close()


def read_stream(source) -> TagStream:
    """Parse a serialized stream; inverse of :func:`write_stream`."""
    fh, owned = _as_source(source)
    try:
        data = fh.read()
    finally:
        if owned:
            fh.close()

    if len(data) < _FIXED_HEADER.size:
        raise StreamFormatError("truncated fixed header", len(data))
    magic, version, quantum_ps, channel_count, duration_s = _FIXED_HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise StreamFormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise StreamFormatError(f"unsupported format version {version}", 4)
    offset = _FIXED_HEADER.size

    if len(data) < offset + 2:
        raise StreamFormatError("truncated metadata count", len(data))
    (n_meta,) = _U16.unpack_from(data, offset)
    offset += 2
    metadata: dict[str, str] = {}
    for _ in range(n_meta):
        try:
            (klen,) = _U16.unpack_from(data, offset)
            key = data[offset + 2 : offset + 2 + klen].decode("utf-8")
            if len(data) < offset + 2 + klen:
                raise struct.error
            offset += 2 + klen
            (vlen,) = _U16.unpack_from(data, offset)
            value = data[offset + 2 : offset + 2 + vlen].decode("utf-8")
            if len(data) < offset + 2 + vlen:
                raise struct.error
            offset += 2 + vlen
        except (struct.error, UnicodeDecodeError):
            raise StreamFormatError("truncated or malformed metadata entry", offset) from None
        metadata[key] = value

    body = data[offset:]
    if len(body) % EVENT_BYTES:
        raise StreamFormatError(
            "truncated event record", offset + len(body) - len(body) % EVENT_BYTES
        )
    records = np.frombuffer(body, dtype=_EVENT_DTYPE)
    channels = records["channel"].copy()
    ticks = records["tick"].copy()
    if ticks.size and np.any(ticks[1:] < ticks[:-1]):
        idx = int(np.argmax(ticks[1:] < ticks[:-1])) + 1
        raise StreamFormatError("event ticks are not non-decreasing", offset + idx * EVENT_BYTES)

    header = StreamHeader(
        quantum_ps=quantum_ps,
        channel_count=channel_count,
        duration_s=duration_s,
        metadata=metadata,
    )
    try:
        return TagStream(header, channels, ticks)
    except ValueError as exc:
        raise StreamFormatError(str(exc), offset) from None


def slice_stream(stream: TagStream, t_start: float, t_end: float) -> TagStream:
    """Events with t_start <= t < t_end, re-based so the slice starts at 0.

    The returned stream's duration is ``t_end - t_start``. Slicing a stream
    into a partition of its duration conserves the total event count.
    """
    if not 0 <= t_start <= t_end <= stream.header.duration_s:
        raise ValueError(
            f"invalid slice bounds [{t_start}, {t_end}] for duration {stream.header.duration_s}"
        )
    quantum_s = stream.header.quantum_s
    times = stream.times_s()
    mask = (times >= t_start) & (times < t_end)
    shift = np.uint64(np.ceil(t_start / quantum_s)) if t_start > 0 else np.uint64(0)
    header = StreamHeader(
        quantum_ps=stream.header.quantum_ps,
        channel_count=stream.header.channel_count,
        duration_s=t_end - t_start,
        metadata=dict(stream.header.metadata),
    )
    return TagStream(header, stream.channels[mask], stream.ticks[mask] - shift)


def write_csv(stream: TagStream, sink) -> None:
    """Plain-text export, one ``channel,tick`` row per event."""
    own = not hasattr(sink, "write")
    fh = open(sink, "w", encoding="utf-8") if own else sink
    try:
        fh.write("channel,tick\n")
        for lo in range(0, stream.n_events, _WRITE_CHUNK):
            hi = min(lo + _WRITE_CHUNK, stream.n_events)
            rows = "\n".join(
                f"{int(c)},{int(t)}" for c, t in zip(stream.channels[lo:hi], stream.ticks[lo:hi])
            )
            if rows:
                fh.write(rows + "\n")
    finally:
        if own:
            fh.close()
