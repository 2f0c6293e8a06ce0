"""HCI packet model, H4 framing and the raw command buffer layout.

H4 frames are one indicator byte followed by the packet exactly as the
Bluetooth Core specification lays it out (all multi-byte fields
little-endian):

    0x01 command  | opcode(2) | param_len(1) | params
    0x02 ACL data | handle+flags(2) | data_len(2) | data
    0x03 SCO data | handle+flags(2) | data_len(1) | data
    0x04 event    | event_code(1) | param_len(1) | params
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import ClassVar, Union

MAX_HANDLE = 0x0EFF
MAX_PARAMS = 255
MAX_ACL_PAYLOAD = 0xFFFF
MAX_SCO_PAYLOAD = 0xFF


class PacketIndicator(IntEnum):
    COMMAND = 0x01
    ACL = 0x02
    SCO = 0x03
    EVENT = 0x04


class EventCode(IntEnum):
    CONNECTION_COMPLETE = 0x03
    DISCONNECTION_COMPLETE = 0x05
    COMMAND_COMPLETE = 0x0E
    COMMAND_STATUS = 0x0F
    NUMBER_OF_COMPLETED_PACKETS = 0x13
    VENDOR_SPECIFIC = 0xFF


class HciError(Exception):
    """Base class for codec errors."""


class NeedMoreData(HciError):
    """The input ends inside a packet; feed more bytes and retry."""


class UnknownIndicator(HciError):
    def __init__(self, indicator: int):
        super().__init__(f"unknown H4 packet indicator 0x{indicator:02X}")
        self.indicator = indicator


class LengthOverflow(HciError, ValueError):
    pass


class MalformedPacket(HciError, ValueError):
    """A header field holds a value outside its type's range."""


class MalformedBuffer(HciError, ValueError):
    """A raw command buffer whose header disagrees with its size."""


def _check_handle(handle: int) -> None:
    if not 0 <= handle <= MAX_HANDLE:
        raise ValueError(f"connection handle 0x{handle:X} outside 0x0000..0x{MAX_HANDLE:04X}")


def _check_flag(name: str, value: int) -> None:
    if not 0 <= value <= 0x3:
        raise ValueError(f"{name} must fit in 2 bits, got {value}")


@dataclass(frozen=True, order=True)
class Opcode:
    ogf: int
    ocf: int

    def __post_init__(self):
        if not 0 <= self.ogf <= 0x3F:
            raise ValueError(f"OGF 0x{self.ogf:X} does not fit in 6 bits")
        if not 0 <= self.ocf <= 0x3FF:
            raise ValueError(f"OCF 0x{self.ocf:X} does not fit in 10 bits")

    @property
    def value(self) -> int:
        return (self.ogf << 10) | self.ocf

    @classmethod
    def from_value(cls, value: int) -> Opcode:
        if not 0 <= value <= 0xFFFF:
            raise ValueError(f"opcode 0x{value:X} does not fit in 16 bits")
        return cls(value >> 10, value & 0x3FF)

    @property
    def name(self) -> str:
        return OPCODE_NAMES.get(self.value, f"Unknown_Command_{self.value:04X}")

    def __str__(self):
        return f"0x{self.value:04X}"


RESET = Opcode(0x03, 0x003)
READ_LOCAL_NAME = Opcode(0x03, 0x014)
READ_BUFFER_SIZE = Opcode(0x04, 0x005)
READ_BD_ADDR = Opcode(0x04, 0x009)
CREATE_CONNECTION = Opcode(0x01, 0x005)
DISCONNECT = Opcode(0x01, 0x006)
VENDOR_WRITE_RAM = Opcode(0x3F, 0x04C)
VENDOR_READ_RAM = Opcode(0x3F, 0x04D)
VENDOR_LAUNCH_RAM = Opcode(0x3F, 0x04E)

OPCODE_NAMES = {
    RESET.value: "Reset",
    READ_LOCAL_NAME.value: "Read_Local_Name",
    READ_BUFFER_SIZE.value: "Read_Buffer_Size",
    READ_BD_ADDR.value: "Read_BD_ADDR",
    CREATE_CONNECTION.value: "Create_Connection",
    DISCONNECT.value: "Disconnect",
    VENDOR_WRITE_RAM.value: "VSC_Write_RAM",
    VENDOR_READ_RAM.value: "VSC_Read_RAM",
    VENDOR_LAUNCH_RAM.value: "VSC_Launch_RAM",
}


@dataclass(frozen=True)
class Command:
    opcode: Opcode
    params: bytes = b""

    indicator: ClassVar[PacketIndicator] = PacketIndicator.COMMAND

    def __post_init__(self):
        object.__setattr__(self, "params", bytes(self.params))
        if len(self.params) > MAX_PARAMS:
            raise LengthOverflow(f"command parameters are {len(self.params)} bytes, max {MAX_PARAMS}")

    def to_bytes(self) -> bytes:
        return struct.pack("<HB", self.opcode.value, len(self.params)) + self.params


@dataclass(frozen=True)
class Event:
    code: int
    params: bytes = b""

    indicator: ClassVar[PacketIndicator] = PacketIndicator.EVENT

    def __post_init__(self):
        object.__setattr__(self, "params", bytes(self.params))
        if not 0 <= self.code <= 0xFF:
            raise ValueError(f"event code {self.code} does not fit in 8 bits")
        if len(self.params) > MAX_PARAMS:
            raise LengthOverflow(f"event parameters are {len(self.params)} bytes, max {MAX_PARAMS}")

    def to_bytes(self) -> bytes:
        return struct.pack("<BB", self.code, len(self.params)) + self.params


@dataclass(frozen=True)
class AclData:
    handle: int
    pb_flag: int
    bc_flag: int
    payload: bytes = b""

    indicator: ClassVar[PacketIndicator] = PacketIndicator.ACL

    def __post_init__(self):
        object.__setattr__(self, "payload", bytes(self.payload))
        _check_handle(self.handle)
        _check_flag("pb_flag", self.pb_flag)
        _check_flag("bc_flag", self.bc_flag)
        if len(self.payload) > MAX_ACL_PAYLOAD:
            raise LengthOverflow(f"ACL payload is {len(self.payload)} bytes, max {MAX_ACL_PAYLOAD}")

    def to_bytes(self) -> bytes:
        word = self.handle | (self.pb_flag << 12) | (self.bc_flag << 14)
        return struct.pack("<HH", word, len(self.payload)) + self.payload


@dataclass(frozen=True)
class ScoData:
    handle: int
    status_flag: int
    payload: bytes = b""

    indicator: ClassVar[PacketIndicator] = PacketIndicator.SCO

    def __post_init__(self):
        object.__setattr__(self, "payload", bytes(self.payload))
        _check_handle(self.handle)
        _check_flag("status_flag", self.status_flag)
        if len(self.payload) > MAX_SCO_PAYLOAD:
            raise LengthOverflow(f"SCO payload is {len(self.payload)} bytes, max {MAX_SCO_PAYLOAD}")

    def to_bytes(self) -> bytes:
        word = self.handle | (self.status_flag << 12)
        return struct.pack("<HB", word, len(self.payload)) + self.payload


HciPacket = Union[Command, Event, AclData, ScoData]

# indicator -> (header size, offset of the length field, length field format)
_HEADERS = {
    PacketIndicator.COMMAND: (3, 2, "<B"),
    PacketIndicator.ACL: (4, 2, "<H"),
    PacketIndicator.SCO: (3, 2, "<B"),
    PacketIndicator.EVENT: (2, 1, "<B"),
}


def _parse_body(indicator: int, header: bytes, body: bytes) -> HciPacket:
    if indicator == PacketIndicator.COMMAND:
        (opcode,) = struct.unpack_from("<H", header)
        return Command(Opcode.from_value(opcode), body)
    if indicator == PacketIndicator.EVENT:
        return Event(header[0], body)
    (word,) = struct.unpack_from("<H", header)
    handle = word & 0x0FFF
    if handle > MAX_HANDLE:
        raise MalformedPacket(f"connection handle 0x{handle:03X} is in the reserved range")
    if indicator == PacketIndicator.ACL:
        return AclData(handle, (word >> 12) & 0x3, (word >> 14) & 0x3, body)
    if word >> 14:
        raise MalformedPacket("reserved SCO header bits are set")
    return ScoData(handle, (word >> 12) & 0x3, body)


def _decode_at(data, offset: int) -> tuple[HciPacket, int]:
    """Decode one H4 frame starting at ``offset``; return it and the end offset."""
    if len(data) <= offset:
        raise NeedMoreData("no packet indicator")
    indicator = data[offset]
    if indicator not in _HEADERS:
        raise UnknownIndicator(indicator)
    header_size, len_offset, len_format = _HEADERS[indicator]
    start = offset + 1
    if len(data) < start + header_size:
        raise NeedMoreData("truncated header")
    header = bytes(data[start:start + header_size])
    (length,) = struct.unpack_from(len_format, header, len_offset)
    end = start + header_size + length
    if len(data) < end:
        raise NeedMoreData(f"need {end - len(data)} more bytes")
    return _parse_body(indicator, header, bytes(data[start + header_size:end])), end


def encode_h4(packet: HciPacket) -> bytes:
    return bytes([packet.indicator]) + packet.to_bytes()


def decode_h4(stream: bytes) -> tuple[HciPacket, bytes]:
    """Decode the first H4 frame of ``stream``.

    Returns the packet and the unconsumed tail. Raises ``NeedMoreData`` when
    the stream stops inside a frame, ``UnknownIndicator`` when the first byte
    is not a valid packet type.
    """
    packet, end = _decode_at(stream, 0)
    return packet, bytes(stream[end:])


def decode_unframed(indicator: int, raw: bytes) -> HciPacket:
    """Decode a packet stored without its indicator byte; the bytes must hold exactly one packet."""
    packet, end = _decode_at(bytes([indicator]) + bytes(raw), 0)
    if end != len(raw) + 1:
        raise MalformedPacket(f"{len(raw) + 1 - end} trailing bytes after packet")
    return packet


class H4Decoder:
    """Incremental H4 decoder for one byte stream.

    Bytes may arrive split at arbitrary points; ``feed`` returns every packet
    completed so far and keeps the partial remainder.
    """

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, data: bytes) -> list[HciPacket]:
        self._buffer += data
        packets = []
        offset = 0
        try:
            while True:
                packet, offset = _decode_at(self._buffer, offset)
                packets.append(packet)
        except NeedMoreData:
            pass
        finally:
            del self._buffer[:offset]
        return packets

    @property
    def pending(self) -> int:
        return len(self._buffer)

    def reset(self) -> None:
        self._buffer.clear()


def raw_command_buffer(opcode: Opcode, params: bytes = b"") -> bytes:
    """Build the unframed command buffer handed to the raw send call."""
    if len(params) > MAX_PARAMS:
        raise LengthOverflow(f"command parameters are {len(params)} bytes, max {MAX_PARAMS}")
    return struct.pack("<HB", opcode.value, len(params)) + bytes(params)


def parse_raw_command(buffer: bytes) -> Command:
    if len(buffer) < 3:
        raise MalformedBuffer(f"command buffer is {len(buffer)} bytes, header needs 3")
    opcode, length = struct.unpack_from("<HB", buffer)
    if length != len(buffer) - 3:
        raise MalformedBuffer(
            f"command header declares {length} parameter bytes, buffer carries {len(buffer) - 3}"
        )
    return Command(Opcode.from_value(opcode), buffer[3:])


# --- device addresses ------------------------------------------------------

def parse_bdaddr(text: str) -> bytes:
    """'AA:BB:CC:DD:EE:FF' -> 6 bytes in display order."""
    parts = text.replace("-", ":").split(":")
    if len(parts) == 1 and len(text) == 12:
        parts = [text[i:i + 2] for i in range(0, 12, 2)]
    if len(parts) != 6:
        raise ValueError(f"not a Bluetooth device address: {text!r}")
    return bytes(int(p, 16) for p in parts)


def format_bdaddr(addr: bytes) -> str:
    return ":".join(f"{b:02X}" for b in addr)


# --- event builders and accessors -----------------------------------------

def command_complete(opcode: Opcode, return_params: bytes = b"", num_packets: int = 1) -> Event:
    return Event(EventCode.COMMAND_COMPLETE, struct.pack("<BH", num_packets, opcode.value) + return_params)


def command_status(status: int, opcode: Opcode, num_packets: int = 1) -> Event:
    return Event(EventCode.COMMAND_STATUS, struct.pack("<BBH", status, num_packets, opcode.value))


def connection_complete(status: int, handle: int, bd_addr: bytes, link_type: int = 0x01,
                        encryption: int = 0x00) -> Event:
    # addresses travel little-endian
    return Event(
        EventCode.CONNECTION_COMPLETE,
        struct.pack("<BH", status, handle) + bd_addr[::-1] + bytes([link_type, encryption]),
    )


def disconnection_complete(status: int, handle: int, reason: int) -> Event:
    return Event(EventCode.DISCONNECTION_COMPLETE, struct.pack("<BHB", status, handle, reason))


def number_of_completed_packets(counts: list[tuple[int, int]]) -> Event:
    params = bytes([len(counts)])
    params += b"".join(struct.pack("<H", h) for h, _ in counts)
    params += b"".join(struct.pack("<H", n) for _, n in counts)
    return Event(EventCode.NUMBER_OF_COMPLETED_PACKETS, params)


def event_opcode(event: Event) -> Opcode | None:
    """Opcode a Command Complete / Command Status event answers, else None."""
    if event.code == EventCode.COMMAND_COMPLETE and len(event.params) >= 3:
        return Opcode.from_value(struct.unpack_from("<H", event.params, 1)[0])
    if event.code == EventCode.COMMAND_STATUS and len(event.params) >= 4:
        return Opcode.from_value(struct.unpack_from("<H", event.params, 2)[0])
    return None


def event_status(event: Event) -> int | None:
    if event.code == EventCode.COMMAND_COMPLETE:
        return event.params[3] if len(event.params) >= 4 else None
    if event.code in (EventCode.COMMAND_STATUS, EventCode.CONNECTION_COMPLETE,
                      EventCode.DISCONNECTION_COMPLETE):
        return event.params[0] if event.params else None
    return None


def return_parameters(event: Event) -> bytes:
    """Return parameters of a Command Complete, including the leading status byte."""
    return event.params[3:]


def completed_packets(event: Event) -> list[tuple[int, int]]:
    params = event.params
    if event.code != EventCode.NUMBER_OF_COMPLETED_PACKETS or not params:
        return []
    n = params[0]
    if len(params) < 1 + 4 * n:
        raise MalformedPacket("Number of Completed Packets event is truncated")
    handles = struct.unpack_from(f"<{n}H", params, 1)
    counts = struct.unpack_from(f"<{n}H", params, 1 + 2 * n)
    return list(zip(handles, counts))


def connection_handle(event: Event) -> int | None:
    """Handle named by a Connection Complete or Disconnection Complete event."""
    if event.code in (EventCode.CONNECTION_COMPLETE, EventCode.DISCONNECTION_COMPLETE) \
            and len(event.params) >= 3:
        return struct.unpack_from("<H", event.params, 1)[0] & 0x0FFF
    return None
