"""Deterministic simulated HCI controller.

Models a Broadcom-style chip closely enough for raw HCI/ACL work: a handful
of standard commands, connection setup against a loopback peer, credit-based
ACL flow control with Number of Completed Packets events, and the vendor RAM
commands used for temporary firmware patching.

Inbound packets are queued by ``submit`` (safe from any thread) and handled
one at a time by ``process``. Accepted ACL packets sit in the controller's
buffers until ``transmit`` sends them to the peer, which is when their
credits are released.
"""

from __future__ import annotations

import configparser
import logging
import random
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from . import hci
from .hci import AclData, Command, Event, HciPacket, Opcode

log = logging.getLogger(__name__)

MAX_RAM_CHUNK = 251
LOCAL_NAME_SIZE = 248

# HCI status codes used in-band
STATUS_SUCCESS = 0x00
STATUS_UNKNOWN_COMMAND = 0x01
STATUS_UNKNOWN_CONNECTION = 0x02
STATUS_CONNECTION_LIMIT = 0x09
STATUS_CONNECTION_EXISTS = 0x0B
STATUS_INVALID_PARAMETERS = 0x12
REASON_LOCAL_HOST = 0x16


@dataclass
class ControllerProfile:
    """Static configuration of a simulated chip."""

    bd_addr: bytes | None = None
    local_name: str = "BCM20702A0 (sim)"
    acl_buffers: int = 8
    acl_buffer_size: int = 1021
    seed: int = 0
    patch_entry: int = 0x00200400
    patched_marker: str = " [patched]"
    first_handle: int = 0x000B
    write_ram_opcode: Opcode = hci.VENDOR_WRITE_RAM
    read_ram_opcode: Opcode = hci.VENDOR_READ_RAM
    launch_ram_opcode: Opcode = hci.VENDOR_LAUNCH_RAM

    def __post_init__(self):
        if self.acl_buffers < 1 or self.acl_buffer_size < 1:
            raise ValueError("ACL buffer count and size must be positive")
        if self.bd_addr is not None and len(self.bd_addr) != 6:
            raise ValueError("bd_addr must be 6 bytes")
        if not 0 <= self.first_handle <= hci.MAX_HANDLE:
            raise ValueError("first_handle outside the connection handle range")

    @classmethod
    def from_text(cls, text: str) -> ControllerProfile:
        """Parse ``key = value`` lines (``#`` comments); integers accept 0x prefixes."""
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.read_string("[profile]\n" + text)
        section = parser["profile"]
        kwargs = {}
        known = {f for f in cls.__dataclass_fields__}
        for key, value in section.items():
            if key not in known:
                raise ValueError(f"unknown profile key {key!r}")
            if key == "bd_addr":
                kwargs[key] = hci.parse_bdaddr(value)
            elif key in ("local_name", "patched_marker"):
                kwargs[key] = value
            elif key.endswith("_opcode"):
                kwargs[key] = Opcode.from_value(int(value, 0))
            else:
                kwargs[key] = int(value, 0)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> ControllerProfile:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass
class ConnectionState:
    handle: int
    peer: bytes
    outstanding: int = 0


@dataclass
class ControllerState:
    bd_addr: bytes
    local_name: str
    acl_buffers: int
    acl_buffer_size: int
    rng_seed: int
    connections: dict[int, ConnectionState] = field(default_factory=dict)
    ram: dict[int, int] = field(default_factory=dict)

    @property
    def outstanding(self) -> int:
        return sum(c.outstanding for c in self.connections.values())


class AclResult(Enum):
    ACCEPTED = "accepted"
    QUEUED = "credits-exhausted"
    HANDLE_UNKNOWN = "handle-unknown"


Listener = Callable[[bytes], None]


class Controller:
    def __init__(self, profile: ControllerProfile | None = None):
        self.profile = profile or ControllerProfile()
        bd_addr = self.profile.bd_addr
        if bd_addr is None:
            rng = random.Random(self.profile.seed)
            bd_addr = bytes(rng.randrange(256) for _ in range(6))
        self.state = ControllerState(
            bd_addr=bd_addr,
            local_name=self.profile.local_name,
            acl_buffers=self.profile.acl_buffers,
            acl_buffer_size=self.profile.acl_buffer_size,
            rng_seed=self.profile.seed,
        )
        self._inbound: deque[HciPacket] = deque()
        self._tx: deque[AclData] = deque()  # accepted, holding a credit
        self._waiting: deque[AclData] = deque()  # no credit yet
        self._lock = threading.RLock()
        self._listeners: list[Listener] = []
        self.peer_deliveries: list[tuple[int, bytes]] = []
        self.max_outstanding = 0

    # -- wiring ---------------------------------------------------------

    def attach(self, listener: Listener) -> None:
        with self._lock:
            self._listeners.append(listener)

    def detach(self, listener: Listener) -> None:
        with self._lock:
            if listener in self._listeners:
                self._listeners.remove(listener)

    def _emit(self, events: list[Event]) -> None:
        for event in events:
            frame = hci.encode_h4(event)
            for listener in list(self._listeners):
                listener(frame)

    def submit(self, packet: HciPacket) -> None:
        self._inbound.append(packet)

    def submit_frame(self, frame: bytes) -> None:
        packet, rest = hci.decode_h4(frame)
        if rest:
            raise hci.MalformedPacket("frame holds more than one packet")
        self.submit(packet)

    # -- scheduling -----------------------------------------------------

    def process(self) -> None:
        """Handle every queued inbound packet in arrival order."""
        with self._lock:
            while self._inbound:
                packet = self._inbound.popleft()
                if isinstance(packet, Command):
                    self._emit(self.handle_command(packet))
                elif isinstance(packet, AclData):
                    if self.handle_acl(packet) is AclResult.HANDLE_UNKNOWN:
                        log.debug("dropping ACL for unknown handle 0x%04X", packet.handle)
                else:
                    log.debug("ignoring inbound %s", type(packet).__name__)

    def transmit(self, max_packets: int | None = None) -> int:
        """Send up to ``max_packets`` buffered ACL packets to the peer; returns the count sent."""
        sent = 0
        with self._lock:
            while self._tx and (max_packets is None or sent < max_packets):
                pkt = self._tx.popleft()
                conn = self.state.connections[pkt.handle]
                self.peer_deliveries.append((pkt.handle, pkt.payload))
                conn.outstanding -= 1
                sent += 1
                self._emit([hci.number_of_completed_packets([(pkt.handle, 1)])])
                self._admit_waiting()
        return sent

    def run_until_idle(self) -> None:
        with self._lock:
            while self._inbound or self._tx:
                self.process()
                self.transmit()

    @property
    def idle(self) -> bool:
        return not (self._inbound or self._tx or self._waiting)

    # -- ACL ------------------------------------------------------------

    def _credit_free(self) -> bool:
        return self.state.outstanding < self.state.acl_buffers

    def _accept(self, pkt: AclData) -> None:
        self.state.connections[pkt.handle].outstanding += 1
        self._tx.append(pkt)
        self.max_outstanding = max(self.max_outstanding, self.state.outstanding)

    def _admit_waiting(self) -> None:
        while self._waiting and self._credit_free():
            pkt = self._waiting.popleft()
            if pkt.handle in self.state.connections:
                self._accept(pkt)

    def handle_acl(self, pkt: AclData) -> AclResult:
        with self._lock:
            if pkt.handle not in self.state.connections:
                return AclResult.HANDLE_UNKNOWN
            if self._waiting or not self._credit_free():
                self._waiting.append(pkt)
                return AclResult.QUEUED
            self._accept(pkt)
            return AclResult.ACCEPTED

    # -- commands -------------------------------------------------------

    def handle_command(self, cmd: Command) -> list[Event]:
        with self._lock:
            op = cmd.opcode
            p = self.profile
            if op == hci.RESET:
                return self._reset(cmd)
            if op == hci.READ_BD_ADDR:
                return [hci.command_complete(op, bytes([STATUS_SUCCESS]) + self.state.bd_addr[::-1])]
            if op == hci.READ_LOCAL_NAME:
                name = self.state.local_name.encode("utf-8")[:LOCAL_NAME_SIZE]
                return [hci.command_complete(op, bytes([STATUS_SUCCESS]) + name.ljust(LOCAL_NAME_SIZE, b"\0"))]
            if op == hci.READ_BUFFER_SIZE:
                ret = struct.pack("<BHBHH", STATUS_SUCCESS, self.state.acl_buffer_size, 0,
                                  self.state.acl_buffers, 0)
                return [hci.command_complete(op, ret)]
            if op == hci.CREATE_CONNECTION:
                return self._create_connection(cmd)
            if op == hci.DISCONNECT:
                return self._disconnect(cmd)
            if op in (p.write_ram_opcode, p.read_ram_opcode, p.launch_ram_opcode):
                return self._vendor(cmd)
            return [hci.command_status(STATUS_UNKNOWN_COMMAND, op)]

    def _reset(self, cmd: Command) -> list[Event]:
        self.state.connections.clear()
        self.state.ram.clear()
        self.state.local_name = self.profile.local_name
        self._tx.clear()
        self._waiting.clear()
        return [hci.command_complete(cmd.opcode, bytes([STATUS_SUCCESS]))]

    def allocate_handle(self) -> int | None:
        """Lowest free handle at or above the profile's first handle."""
        for handle in range(self.profile.first_handle, hci.MAX_HANDLE + 1):
            if handle not in self.state.connections:
                return handle
        return None

    def _create_connection(self, cmd: Command) -> list[Event]:
        if len(cmd.params) < 6:
            return [hci.command_status(STATUS_INVALID_PARAMETERS, cmd.opcode)]
        peer = cmd.params[:6][::-1]
        events = [hci.command_status(STATUS_SUCCESS, cmd.opcode)]
        if any(c.peer == peer for c in self.state.connections.values()):
            events.append(hci.connection_complete(STATUS_CONNECTION_EXISTS, 0, peer))
            return events
        handle = self.allocate_handle()
        if handle is None:
            events.append(hci.connection_complete(STATUS_CONNECTION_LIMIT, 0, peer))
            return events
        self.state.connections[handle] = ConnectionState(handle, peer)
        events.append(hci.connection_complete(STATUS_SUCCESS, handle, peer))
        return events

    def _disconnect(self, cmd: Command) -> list[Event]:
        if len(cmd.params) < 3:
            return [hci.command_status(STATUS_INVALID_PARAMETERS, cmd.opcode)]
        handle = struct.unpack_from("<H", cmd.params)[0] & 0x0FFF
        if handle not in self.state.connections:
            return [hci.command_status(STATUS_UNKNOWN_CONNECTION, cmd.opcode)]
        events = [hci.command_status(STATUS_SUCCESS, cmd.opcode)]
        # flushed packets still complete so every accepted send gets exactly one NOCP count
        flushed = sum(1 for pkt in self._tx if pkt.handle == handle)
        self._tx = deque(pkt for pkt in self._tx if pkt.handle != handle)
        self._waiting = deque(pkt for pkt in self._waiting if pkt.handle != handle)
        if flushed:
            events.append(hci.number_of_completed_packets([(handle, flushed)]))
        del self.state.connections[handle]
        events.append(hci.disconnection_complete(STATUS_SUCCESS, handle, REASON_LOCAL_HOST))
        self._admit_waiting()
        return events

    def _vendor(self, cmd: Command) -> list[Event]:
        p = self.profile
        params = cmd.params
        if len(params) < 4:
            return [hci.command_complete(cmd.opcode, bytes([STATUS_INVALID_PARAMETERS]))]
        (addr,) = struct.unpack_from("<I", params)
        if cmd.opcode == p.write_ram_opcode:
            return self.vendor_write_ram(addr, params[4:])
        if cmd.opcode == p.read_ram_opcode:
            if len(params) != 5 or params[4] > MAX_RAM_CHUNK:
                return [hci.command_complete(cmd.opcode, bytes([STATUS_INVALID_PARAMETERS]))]
            return self.vendor_read_ram(addr, params[4])
        return self.vendor_launch_ram(addr)

    # -- vendor RAM -----------------------------------------------------

    def vendor_write_ram(self, addr: int, data: bytes) -> list[Event]:
        if len(data) > MAX_RAM_CHUNK:
            raise hci.LengthOverflow(f"Write_RAM carries at most {MAX_RAM_CHUNK} bytes")
        with self._lock:
            for i, b in enumerate(data):
                self.state.ram[(addr + i) & 0xFFFFFFFF] = b
        return [hci.command_complete(self.profile.write_ram_opcode, bytes([STATUS_SUCCESS]))]

    def read_ram(self, addr: int, length: int) -> bytes:
        ram = self.state.ram
        return bytes(ram.get((addr + i) & 0xFFFFFFFF, 0) for i in range(length))

    def vendor_read_ram(self, addr: int, length: int) -> list[Event]:
        if not 0 <= length <= MAX_RAM_CHUNK:
            raise hci.LengthOverflow(f"Read_RAM returns at most {MAX_RAM_CHUNK} bytes")
        with self._lock:
            data = self.read_ram(addr, length)
        return [hci.command_complete(self.profile.read_ram_opcode, bytes([STATUS_SUCCESS]) + data)]

    def vendor_launch_ram(self, addr: int) -> list[Event]:
        with self._lock:
            marker = self.profile.patched_marker
            if addr == self.profile.patch_entry and not self.state.local_name.endswith(marker):
                self.state.local_name += marker
        return [hci.command_complete(self.profile.launch_ram_opcode, bytes([STATUS_SUCCESS]))]
