"""PacketLogger-style capture records, text rendering and capture files.

Binary capture layout, one record after another, all integers big-endian::

    length(4) | seconds(4) | microseconds(4) | kind(1) | body

``length`` counts every byte after itself. For packet kinds the body is the
HCI packet without its H4 indicator; for notes and errors it is the UTF-8
message, a NUL terminator, then any attached payload.
"""

from __future__ import annotations

import re
import struct
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from enum import IntEnum
from pathlib import Path
from typing import Callable, Iterable

from . import hci
from .hci import AclData, Command, Event, EventCode, HciPacket, PacketIndicator

ACL_SEND_LABEL = "LEAS Send"
PACKET_MARKER = "▶ "

_RECORD_HEADER = struct.Struct(">IIIB")
_MIN_LENGTH = _RECORD_HEADER.size - 4
_MAX_SECONDS = 0xFFFFFFFF
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_MONTHS = ("Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")


class RecordKind(IntEnum):
    COMMAND = 0x00
    EVENT = 0x01
    ACL_SEND = 0x02
    ACL_RECV = 0x03
    NOTE = 0x06
    ERROR = 0x07

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def is_packet(self) -> bool:
        return self in _PACKET_TYPES


_LABELS = {
    RecordKind.COMMAND: "HCI Command",
    RecordKind.EVENT: "HCI Event",
    RecordKind.ACL_SEND: ACL_SEND_LABEL,
    RecordKind.ACL_RECV: "LEAS Receive",
    RecordKind.NOTE: "Note",
    RecordKind.ERROR: "Error",
}
_KIND_BY_LABEL = {label: kind for kind, label in _LABELS.items()}

_PACKET_TYPES = {
    RecordKind.COMMAND: (PacketIndicator.COMMAND, Command),
    RecordKind.EVENT: (PacketIndicator.EVENT, Event),
    RecordKind.ACL_SEND: (PacketIndicator.ACL, AclData),
    RecordKind.ACL_RECV: (PacketIndicator.ACL, AclData),
}


class CorruptRecord(ValueError):
    """A capture file stopped making sense at ``offset``.

    ``records`` holds every complete record decoded before that point.
    """

    def __init__(self, offset: int, reason: str, records: list[LogRecord]):
        super().__init__(f"corrupt capture record at offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason
        self.records = records


# --- packet descriptions ---------------------------------------------------

def describe_acl(pkt: AclData) -> str:
    n = len(pkt.payload)
    return f"Data [Handle: 0x{pkt.handle:04X}, Packet Boundary Flags: 0x{pkt.pb_flag:X}, Length: 0x{n:04X} ({n})]"


def describe_nocp(counts: list[tuple[int, int]]) -> str:
    parts = [f"Handle: 0x{h:04X} - Packets: 0x{n:04X}" for h, n in counts]
    return " - ".join(["Number of Completed Packets"] + parts)


def _describe_event(event: Event) -> tuple[int | None, str]:
    code = event.code
    try:
        if code == EventCode.NUMBER_OF_COMPLETED_PACKETS:
            counts = hci.completed_packets(event)
            if counts:
                return counts[0][0], describe_nocp(counts)
        elif code in (EventCode.COMMAND_COMPLETE, EventCode.COMMAND_STATUS):
            opcode = hci.event_opcode(event)
            status = hci.event_status(event)
            if opcode is not None:
                title = "Command Complete" if code == EventCode.COMMAND_COMPLETE else "Command Status"
                text = f"{title} [{opcode.value:04X}] {opcode.name}"
                if status is not None:
                    text += f" - Status: 0x{status:02X}"
                return None, text
        elif code == EventCode.CONNECTION_COMPLETE and len(event.params) >= 9:
            handle = hci.connection_handle(event)
            peer = hci.format_bdaddr(event.params[3:9][::-1])
            return handle, (f"Connection Complete - Handle: 0x{handle:04X} - Peer: {peer}"
                            f" - Status: 0x{event.params[0]:02X}")
        elif code == EventCode.DISCONNECTION_COMPLETE and len(event.params) >= 4:
            handle = hci.connection_handle(event)
            return handle, (f"Disconnection Complete - Handle: 0x{handle:04X}"
                            f" - Reason: 0x{event.params[3]:02X} - Status: 0x{event.params[0]:02X}")
    except hci.MalformedPacket:
        pass
    n = len(event.params)
    return None, f"Event 0x{code:02X} - Length: 0x{n:02X} ({n})"


def describe(kind: RecordKind, packet: HciPacket) -> tuple[int | None, str]:
    """Handle column and message text for a packet record."""
    if isinstance(packet, AclData):
        return packet.handle, describe_acl(packet)
    if isinstance(packet, Event):
        return _describe_event(packet)
    if isinstance(packet, Command):
        n = len(packet.params)
        return None, f"[{packet.opcode.value:04X}] {packet.opcode.name} - Length: 0x{n:02X} ({n})"
    raise TypeError(f"{kind.name} records cannot hold {type(packet).__name__}")


# --- records ---------------------------------------------------------------

@dataclass(frozen=True)
class LogRecord:
    timestamp: datetime
    kind: RecordKind
    handle: int | None
    message: str
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "kind", RecordKind(self.kind))
        object.__setattr__(self, "payload", bytes(self.payload))
        ts = self.timestamp
        if ts.tzinfo is None:
            raise ValueError("timestamps must be timezone-aware")
        if not 0 <= (ts - _EPOCH).total_seconds() <= _MAX_SECONDS:
            raise ValueError("timestamp outside the capture format range")
        if self.kind.is_packet:
            packet = self.packet
            expected = describe(self.kind, packet)
            if (self.handle, self.message) != expected:
                raise ValueError(f"{self.kind.name} record text does not match its packet: {expected}")
        else:
            if self.handle is not None:
                raise ValueError(f"{self.kind.name} records carry no handle")
            if "\0" in self.message:
                raise ValueError("messages cannot contain NUL")
            if self.kind == RecordKind.ERROR and not self.message:
                raise ValueError("error records need a message")

    @property
    def packet(self) -> HciPacket:
        """Decoded HCI packet held by a packet record."""
        indicator, cls = _PACKET_TYPES[self.kind]
        packet = hci.decode_unframed(indicator, self.payload)
        if not isinstance(packet, cls):
            raise ValueError(f"{self.kind.name} payload decodes to {type(packet).__name__}")
        return packet

    @classmethod
    def for_packet(cls, kind: RecordKind, packet: HciPacket, timestamp: datetime) -> LogRecord:
        handle, message = describe(kind, packet)
        return cls(timestamp, kind, handle, message, packet.to_bytes())

    @classmethod
    def error(cls, message: str, timestamp: datetime) -> LogRecord:
        return cls(timestamp, RecordKind.ERROR, None, message)

    @classmethod
    def note(cls, message: str, timestamp: datetime, payload: bytes = b"") -> LogRecord:
        return cls(timestamp, RecordKind.NOTE, None, message, payload)


# --- text ------------------------------------------------------------------

def format_timestamp(ts: datetime) -> str:
    ts = ts.astimezone(timezone.utc)
    return f"{_MONTHS[ts.month - 1]} {ts.day:02d} {ts:%H:%M:%S}.{ts.microsecond // 1000:03d}"


def render_columns(record: LogRecord) -> str:
    """Everything after the timestamp column."""
    handle = f"0x{record.handle:04X}" if record.handle is not None else ""
    marker = PACKET_MARKER if record.kind.is_packet else ""
    line = f"{record.kind.label:<12}  {handle:<6}  {marker}{record.message}"
    return line if marker or record.message else line.rstrip()


def render_text(record: LogRecord) -> str:
    return f"{format_timestamp(record.timestamp)}  {render_columns(record)}"


@dataclass(frozen=True)
class TextRow:
    """A parsed rendered line; the payload is not part of the text."""

    timestamp: datetime
    kind: RecordKind
    handle: int | None
    message: str


_TEXT_LINE = re.compile(
    r"(?P<mon>[A-Z][a-z]{2}) (?P<day>\d{1,2}) (?P<hms>\d{2}:\d{2}:\d{2})[.:](?P<ms>\d{3})  (?P<rest>.*)"
)


def parse_text(line: str, year: int = 1970) -> TextRow:
    """Parse a rendered line; accepts both ``HH:MM:SS.mmm`` and ``HH:MM:SS:mmm``."""
    m = _TEXT_LINE.fullmatch(line.rstrip("\n"))
    if not m or m["mon"] not in _MONTHS:
        raise ValueError(f"not a capture text line: {line!r}")
    h, mi, s = (int(x) for x in m["hms"].split(":"))
    ts = datetime(year, _MONTHS.index(m["mon"]) + 1, int(m["day"]), h, mi, s,
                  int(m["ms"]) * 1000, tzinfo=timezone.utc)
    rest = m["rest"].ljust(22)
    label = rest[:12].rstrip()
    if label not in _KIND_BY_LABEL:
        raise ValueError(f"unknown record label {label!r}")
    kind = _KIND_BY_LABEL[label]
    handle_text = rest[14:20].strip()
    message = rest[22:]
    if kind.is_packet and message.startswith(PACKET_MARKER):
        message = message[len(PACKET_MARKER):]
    return TextRow(ts, kind, int(handle_text, 16) if handle_text else None, message)


# --- binary capture files --------------------------------------------------

def _encode_record(record: LogRecord) -> bytes:
    delta = record.timestamp - _EPOCH
    seconds = delta.days * 86400 + delta.seconds
    if record.kind.is_packet:
        body = record.payload
    else:
        body = record.message.encode("utf-8") + b"\0" + record.payload
    header = _RECORD_HEADER.pack(_MIN_LENGTH + len(body), seconds, delta.microseconds, record.kind)
    return header + body


def write_capture(records: Iterable[LogRecord]) -> bytes:
    return b"".join(_encode_record(r) for r in records)


def _decode_body(kind: RecordKind, ts: datetime, body: bytes) -> LogRecord:
    if kind.is_packet:
        indicator, _ = _PACKET_TYPES[kind]
        return LogRecord.for_packet(kind, hci.decode_unframed(indicator, body), ts)
    text, nul, payload = body.partition(b"\0")
    if not nul:
        raise ValueError("message is not NUL-terminated")
    return LogRecord(ts, kind, None, text.decode("utf-8"), payload)


def read_capture(data: bytes) -> list[LogRecord]:
    """Decode a capture file.

    Raises ``CorruptRecord`` at the first record that is truncated or
    inconsistent; the exception carries all records before it.
    """
    records: list[LogRecord] = []
    offset = 0
    view = memoryview(data)
    while offset < len(view):
        if len(view) - offset < _RECORD_HEADER.size:
            raise CorruptRecord(offset, "truncated record header", records)
        length, seconds, micros, tag = _RECORD_HEADER.unpack_from(view, offset)
        end = offset + 4 + length
        if length < _MIN_LENGTH:
            raise CorruptRecord(offset, f"record length {length} below minimum", records)
        if end > len(view):
            raise CorruptRecord(offset, f"record needs {end - len(view)} more bytes", records)
        if micros >= 1_000_000:
            raise CorruptRecord(offset, "microsecond field out of range", records)
        try:
            kind = RecordKind(tag)
            ts = _EPOCH + timedelta(seconds=seconds, microseconds=micros)
            record = _decode_body(kind, ts, bytes(view[offset + _RECORD_HEADER.size:end]))
        except (ValueError, hci.HciError) as exc:
            raise CorruptRecord(offset, str(exc), records) from exc
        records.append(record)
        offset = end
    return records


def load_capture(path: str | Path) -> list[LogRecord]:
    return read_capture(Path(path).read_bytes())


def save_capture(path: str | Path, records: Iterable[LogRecord]) -> None:
    Path(path).write_bytes(write_capture(records))


# --- recording sink --------------------------------------------------------

def _wall_clock() -> datetime:
    return datetime.now(timezone.utc)


class CaptureLog:
    """Thread-safe append-only record sink.

    Timestamps come from ``clock`` truncated to milliseconds and are clamped
    so they never go backwards.
    """

    def __init__(self, clock: Callable[[], datetime] | None = None):
        self._clock = clock or _wall_clock
        self._records: list[LogRecord] = []
        self._lock = threading.Lock()
        self._last: datetime | None = None

    def _now(self) -> datetime:
        ts = self._clock()
        ts = ts.replace(microsecond=ts.microsecond // 1000 * 1000)
        if self._last is not None and ts < self._last:
            ts = self._last
        self._last = ts
        return ts

    def append(self, record: LogRecord) -> LogRecord:
        with self._lock:
            self._records.append(record)
        return record

    def packet(self, kind: RecordKind, packet: HciPacket) -> LogRecord:
        with self._lock:
            record = LogRecord.for_packet(kind, packet, self._now())
            self._records.append(record)
        return record

    def error(self, message: str) -> LogRecord:
        with self._lock:
            record = LogRecord.error(message, self._now())
            self._records.append(record)
        return record

    def note(self, message: str, payload: bytes = b"") -> LogRecord:
        with self._lock:
            record = LogRecord.note(message, self._now(), payload)
            self._records.append(record)
        return record

    def __len__(self):
        return len(self._records)

    @property
    def records(self) -> list[LogRecord]:
        with self._lock:
            return list(self._records)

    def since(self, mark: int) -> list[LogRecord]:
        with self._lock:
            return self._records[mark:]

    def render(self, tail: int | None = None) -> list[str]:
        records = self.records
        if tail is not None:
            records = records[-tail:] if tail else []
        return [render_text(r) for r in records]

    def export(self, path: str | Path) -> None:
        save_capture(path, self.records)
