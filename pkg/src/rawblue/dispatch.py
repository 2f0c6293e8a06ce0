"""Raw HCI/ACL send calls and the user-client hop beneath them.

``send_raw_command`` and ``send_raw_acl_data`` keep the argument order of the
private framework calls they stand in for::

    int send_raw_command(uint32_t request, void *commandData, size_t commandSize)
    int send_raw_acl_data(void *commandData, size_t commandSize, uint32_t handle, uint32_t request)

Both validate their arguments on the caller's side, then hand an H4 frame to
``dispatch_user_client``, whose routines play the driver: they check the
connection table, write capture records and push the frame to the transport.
The call returns as soon as the status is known; controller events are
delivered later by ``poll``/``wait_for`` or by the optional delivery thread.
"""

from __future__ import annotations

import logging
import struct
import threading
import time
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable

from . import hci
from .capture import CaptureLog, RecordKind
from .hci import AclData, Command, Event, EventCode, HciPacket, Opcode
from .transport import Transport, TransportDown

log = logging.getLogger(__name__)

UINT32_MAX = 0xFFFFFFFF
DEFAULT_PB_FLAG = 0x3


class DispatchStatus(IntEnum):
    SUCCESS = 0
    # argument / validation errors
    MALFORMED_BUFFER = -1
    INVALID_ARGUMENT = -2
    HANDLE_OUT_OF_RANGE = -3
    # transport / controller errors
    TRANSPORT_DOWN = 1
    NO_DEVICE_HANDLE = 2


class Selector(IntEnum):
    SEND_HCI = 0x01
    SEND_ACL = 0x02


class UnknownSelector(LookupError):
    def __init__(self, selector: int):
        super().__init__(f"no user-client routine registered for selector 0x{selector:02X}")
        self.selector = selector


@dataclass(frozen=True)
class UserClientSelector:
    selector: int
    payload: bytes


@dataclass(frozen=True)
class RawCall:
    api: str
    request_id: object
    status: DispatchStatus


def no_device_handle_message(handle: int) -> str:
    return f"ACLPacketToHw No Device Handle 0x{handle:X}"


def not_sent_message(handle: int) -> str:
    return f"Above ACL Packet not sent Handle 0x{handle:X}"


def _is_buffer(value) -> bool:
    return isinstance(value, (bytes, bytearray, memoryview))


def _is_uint32(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and 0 <= value <= UINT32_MAX


class DispatchSession:
    """One client's view of the raw-access path.

    Tracks the live connection handles it has seen completed, so ACL sends to
    unknown handles are refused here the same way the kernel driver refuses them.
    """

    def __init__(self, transport: Transport, capture: CaptureLog | None = None,
                 sink: Callable[[HciPacket], None] | None = None, pb_flag: int = DEFAULT_PB_FLAG):
        self.transport = transport
        self.capture = capture if capture is not None else CaptureLog()
        self.sink = sink
        self.pb_flag = pb_flag
        self.calls: list[RawCall] = []
        self.received: list[HciPacket] = []
        self._handles: set[int] = set()
        self._routines = {
            Selector.SEND_HCI: self._route_command,
            Selector.SEND_ACL: self._route_acl,
        }
        self._cond = threading.Condition()
        self._receive_lock = threading.Lock()
        self._delivery: threading.Thread | None = None
        self._stop = threading.Event()

    @property
    def live_handles(self) -> list[int]:
        with self._cond:
            return sorted(self._handles)

    # -- raw API ----------------------------------------------------------

    def send_raw_command(self, request_id: int, command_data: bytes) -> int:
        """Send an unframed command buffer (opcode, length, params)."""
        status = self._send_command(request_id, command_data)
        self.calls.append(RawCall("command", request_id, status))
        return status

    def _send_command(self, request_id, command_data) -> DispatchStatus:
        if not _is_uint32(request_id):
            self.capture.error(f"HCISendRawCommand Invalid Request {request_id!r}")
            return DispatchStatus.INVALID_ARGUMENT
        if not _is_buffer(command_data):
            self.capture.error("HCISendRawCommand Malformed Buffer: not a byte buffer")
            return DispatchStatus.MALFORMED_BUFFER
        try:
            command = hci.parse_raw_command(bytes(command_data))
        except hci.MalformedBuffer as exc:
            self.capture.error(f"HCISendRawCommand Malformed Buffer: {exc}")
            return DispatchStatus.MALFORMED_BUFFER
        reply = self.dispatch_user_client(UserClientSelector(Selector.SEND_HCI, hci.encode_h4(command)))
        return DispatchStatus(struct.unpack("b", reply)[0])

    def send_raw_acl(self, data: bytes, handle: int, request_id: int) -> int:
        """Send ACL ``data`` on ``handle``; the size argument is taken from the buffer."""
        size = len(data) if _is_buffer(data) else 0
        return self.send_raw_acl_data(data, size, handle, request_id)

    def send_raw_acl_data(self, command_data: bytes, command_size: int, handle: int, request: int) -> int:
        status = self._send_acl(command_data, command_size, handle, request)
        self.calls.append(RawCall("acl", request, status))
        return status

    def _send_acl(self, data, size, handle, request) -> DispatchStatus:
        if not _is_buffer(data) or len(data) == 0:
            self.capture.error("HCISendRawACLData Malformed Buffer: expected a non-empty byte buffer")
            return DispatchStatus.MALFORMED_BUFFER
        if not isinstance(size, int) or isinstance(size, bool) or size != len(data):
            self.capture.error(f"HCISendRawACLData Size Mismatch: size {size!r}, buffer {len(data)} bytes")
            return DispatchStatus.MALFORMED_BUFFER
        if not _is_uint32(handle):
            self.capture.error(f"HCISendRawACLData Invalid Handle {handle!r}")
            return DispatchStatus.INVALID_ARGUMENT
        if not _is_uint32(request):
            self.capture.error(f"HCISendRawACLData Invalid Request {request!r}")
            return DispatchStatus.INVALID_ARGUMENT
        if handle > hci.MAX_HANDLE:
            self.capture.error(f"HCISendRawACLData Handle 0x{handle:X} Out Of Range")
            return DispatchStatus.HANDLE_OUT_OF_RANGE
        if len(data) > hci.MAX_ACL_PAYLOAD:
            self.capture.error(f"HCISendRawACLData Malformed Buffer: {len(data)} bytes exceeds ACL length")
            return DispatchStatus.MALFORMED_BUFFER
        packet = AclData(handle, self.pb_flag, 0, bytes(data))
        reply = self.dispatch_user_client(UserClientSelector(Selector.SEND_ACL, hci.encode_h4(packet)))
        return DispatchStatus(struct.unpack("b", reply)[0])

    # -- user-client hop --------------------------------------------------

    def dispatch_user_client(self, selector: UserClientSelector) -> bytes:
        """Run a registered routine; returns a one-byte signed status buffer."""
        routine = self._routines.get(selector.selector)
        if routine is None:
            raise UnknownSelector(selector.selector)
        return struct.pack("b", routine(bytes(selector.payload)))

    def _decode_frame(self, frame: bytes, expected: type) -> HciPacket | None:
        try:
            packet, rest = hci.decode_h4(frame)
        except hci.HciError as exc:
            self.capture.error(f"UserClientRoutine Malformed Frame: {exc}")
            return None
        if rest or not isinstance(packet, expected):
            self.capture.error(f"UserClientRoutine Malformed Frame: expected one {expected.__name__} packet")
            return None
        return packet

    def _transmit(self, frame: bytes) -> bool:
        try:
            self.transport.send(frame)
        except TransportDown as exc:
            log.debug("transport down: %s", exc)
            return False
        return True

    def _route_command(self, frame: bytes) -> DispatchStatus:
        command = self._decode_frame(frame, Command)
        if command is None:
            return DispatchStatus.MALFORMED_BUFFER
        if not self.transport.is_up:
            self.capture.error(f"HCI Command 0x{command.opcode.value:04X} not sent - Transport Down")
            return DispatchStatus.TRANSPORT_DOWN
        self.capture.packet(RecordKind.COMMAND, command)
        if not self._transmit(frame):
            self.capture.error(f"HCI Command 0x{command.opcode.value:04X} not sent - Transport Down")
            return DispatchStatus.TRANSPORT_DOWN
        return DispatchStatus.SUCCESS

    def _route_acl(self, frame: bytes) -> DispatchStatus:
        packet = self._decode_frame(frame, AclData)
        if packet is None:
            return DispatchStatus.MALFORMED_BUFFER
        h = packet.handle
        with self._cond:
            live = h in self._handles
        if not live:
            # same order the driver logs it: complaint, the packet, then the drop notice
            self.capture.error(no_device_handle_message(h))
            self.capture.packet(RecordKind.ACL_SEND, packet)
            self.capture.error(not_sent_message(h))
            return DispatchStatus.NO_DEVICE_HANDLE
        if not self.transport.is_up:
            self.capture.error(f"ACLPacketToHw Transport Down Handle 0x{h:X}")
            return DispatchStatus.TRANSPORT_DOWN
        self.capture.packet(RecordKind.ACL_SEND, packet)
        if not self._transmit(frame):
            self.capture.error(not_sent_message(h))
            return DispatchStatus.TRANSPORT_DOWN
        return DispatchStatus.SUCCESS

    # -- inbound delivery ---------------------------------------------------

    def _deliver(self, frame: bytes) -> None:
        try:
            packet, _ = hci.decode_h4(frame)
        except hci.HciError as exc:
            self.capture.error(f"Dropped inbound frame: {exc}")
            return
        if isinstance(packet, Event):
            self.capture.packet(RecordKind.EVENT, packet)
            self._track(packet)
        elif isinstance(packet, AclData):
            self.capture.packet(RecordKind.ACL_RECV, packet)
        with self._cond:
            self.received.append(packet)
            self._cond.notify_all()
        if self.sink is not None:
            self.sink(packet)

    def _track(self, event: Event) -> None:
        status = hci.event_status(event)
        with self._cond:
            if event.code == EventCode.CONNECTION_COMPLETE and status == 0:
                self._handles.add(hci.connection_handle(event))
            elif event.code == EventCode.DISCONNECTION_COMPLETE and status == 0:
                self._handles.discard(hci.connection_handle(event))
            elif hci.event_opcode(event) == hci.RESET and event.code == EventCode.COMMAND_COMPLETE \
                    and status == 0:
                self._handles.clear()

    def _pull(self, timeout: float | None) -> bool:
        with self._receive_lock:
            frame = self.transport.receive(timeout)
            if frame is None:
                return False
            self._deliver(frame)
            return True

    def poll(self) -> list[HciPacket]:
        """Deliver every inbound packet already waiting; returns them."""
        mark = len(self.received)
        if self._delivery is None:
            while self._pull(0):
                pass
        return self.received[mark:]

    def wait_for(self, predicate: Callable[[HciPacket], bool], timeout: float = 2.0,
                 since: int | None = None) -> HciPacket:
        """Block until a delivered packet (at index ``since`` or later) satisfies ``predicate``."""
        cursor = len(self.received) if since is None else since
        deadline = time.monotonic() + timeout
        while True:
            with self._cond:
                while cursor < len(self.received):
                    packet = self.received[cursor]
                    cursor += 1
                    if predicate(packet):
                        return packet
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("no matching packet delivered")
            if self._delivery is not None:
                with self._cond:
                    if cursor >= len(self.received):
                        self._cond.wait(remaining)
            else:
                self._pull(remaining)

    def start_delivery(self) -> None:
        """Deliver events from a background thread instead of on ``poll``."""
        if self._delivery is not None:
            return
        self._stop.clear()
        self._delivery = threading.Thread(target=self._delivery_loop, name="event-delivery", daemon=True)
        self._delivery.start()

    def stop_delivery(self) -> None:
        if self._delivery is None:
            return
        self._stop.set()
        self._delivery.join(timeout=1.0)
        self._delivery = None

    def _delivery_loop(self) -> None:
        while not self._stop.is_set():
            self._pull(0.05)

    def close(self) -> None:
        self.stop_delivery()
        self.transport.close()

    # -- conveniences used by the CLI and tests -----------------------------

    def execute(self, opcode: Opcode, params: bytes = b"", request_id: int = 0,
                timeout: float = 2.0) -> tuple[int, list[HciPacket]]:
        """Send a command and wait for its completion.

        For Create_Connection the wait runs through Connection Complete.
        Returns the dispatch status and every packet delivered meanwhile.
        """
        mark = len(self.received)
        status = self.send_raw_command(request_id, hci.raw_command_buffer(opcode, params))
        if status != DispatchStatus.SUCCESS:
            return status, []
        reply = self.wait_for(lambda p: isinstance(p, Event) and hci.event_opcode(p) == opcode,
                              timeout, since=mark)
        if opcode == hci.CREATE_CONNECTION and reply.code == EventCode.COMMAND_STATUS \
                and hci.event_status(reply) == 0:
            self.wait_for(lambda p: isinstance(p, Event) and p.code == EventCode.CONNECTION_COMPLETE,
                          timeout, since=mark)
        return status, self.received[mark:]

    def connect(self, bd_addr: bytes, timeout: float = 2.0) -> int:
        """Create a connection to ``bd_addr`` (display order); returns the new handle."""
        params = bd_addr[::-1] + struct.pack("<HBBHB", 0xCC18, 0x01, 0x00, 0x0000, 0x01)
        status, packets = self.execute(hci.CREATE_CONNECTION, params, timeout=timeout)
        if status != DispatchStatus.SUCCESS:
            raise ConnectionError(f"Create_Connection not sent, status {status}")
        for packet in packets:
            if isinstance(packet, Event) and packet.code == EventCode.CONNECTION_COMPLETE:
                if hci.event_status(packet) != 0:
                    raise ConnectionError(f"Connection Complete status 0x{hci.event_status(packet):02X}")
                return hci.connection_handle(packet)
        raise ConnectionError(f"Create_Connection refused: {packets[-1] if packets else 'no reply'}")

    def wait_for_completion(self, handle: int, timeout: float = 2.0, since: int | None = None) -> Event:
        return self.wait_for(
            lambda p: isinstance(p, Event) and any(h == handle for h, _ in hci.completed_packets(p)),
            timeout, since=since)
