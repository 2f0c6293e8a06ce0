"""Byte transports carrying H4 frames between the dispatch layer and a controller.

Backends:

* ``sim``    - in-process, bound directly to a :class:`Controller`
* ``stream`` - TCP connection to ``host:port`` speaking raw H4 frames
* ``loop``   - ``stream`` against a private :class:`ControllerServer` started on localhost
* ``replay`` - replays the inbound packets of a capture file

Every backend hands out whole frames from ``receive``; the stream backend
reassembles whatever segmentation the socket produces.
"""

from __future__ import annotations

import dataclasses
import logging
import queue
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Union

from . import hci
from .capture import LogRecord, RecordKind, load_capture
from .controller import Controller, ControllerProfile
from .hci import AclData, Command, Event, EventCode, H4Decoder, HciPacket, Opcode

log = logging.getLogger(__name__)


class TransportError(Exception):
    pass


class TransportDown(TransportError):
    pass


class BackendUnavailable(TransportError):
    pass


class BadConfig(TransportError, ValueError):
    pass


class Transport:
    kind = "abstract"

    def __init__(self):
        self._inbox: queue.Queue[bytes] = queue.Queue()
        self._up = True

    @property
    def status(self) -> str:
        return "up" if self._up else "down"

    @property
    def is_up(self) -> bool:
        return self._up

    def send(self, frame: bytes) -> None:
        if not self._up:
            raise TransportDown(f"{self.kind} transport is down")
        self._send(frame)

    def _send(self, frame: bytes) -> None:
        raise NotImplementedError

    def receive(self, timeout: float | None = 0) -> bytes | None:
        """Next inbound frame, or None once ``timeout`` seconds pass (0 polls, None blocks)."""
        try:
            if timeout == 0:
                return self._inbox.get_nowait()
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self._up = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SimTransport(Transport):
    """In-process backend; each send runs the controller until idle unless ``autorun`` is off."""

    kind = "sim"

    def __init__(self, controller: Controller, autorun: bool = True):
        super().__init__()
        self.controller = controller
        self.autorun = autorun
        controller.attach(self._inbox.put)

    def _send(self, frame: bytes) -> None:
        self.controller.submit_frame(frame)
        if self.autorun:
            self.controller.run_until_idle()

    def close(self) -> None:
        self.controller.detach(self._inbox.put)
        super().close()


class StreamTransport(Transport):
    kind = "stream"

    def __init__(self, address: str, connect_timeout: float = 2.0):
        super().__init__()
        host, port = parse_address(address)
        try:
            self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as exc:
            raise BackendUnavailable(f"cannot reach {address}: {exc}") from exc
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._send_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, name=f"h4-reader-{address}", daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        decoder = H4Decoder()
        try:
            while True:
                chunk = self._sock.recv(4096)
                if not chunk:
                    break
                for packet in decoder.feed(chunk):
                    self._inbox.put(hci.encode_h4(packet))
        except (OSError, hci.HciError) as exc:
            if self._up:
                log.warning("stream transport reader stopped: %s", exc)
        self._up = False

    def _send(self, frame: bytes) -> None:
        try:
            with self._send_lock:
                self._sock.sendall(frame)
        except OSError as exc:
            self._up = False
            raise TransportDown(str(exc)) from exc

    def close(self) -> None:
        super().close()
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._reader.join(timeout=1.0)


class LoopTransport(StreamTransport):
    """Stream backend wired to its own localhost controller server."""

    kind = "loop"

    def __init__(self, controller: Controller):
        self.server = ControllerServer(controller)
        self.server.start()
        host, port = self.server.server_address[:2]
        try:
            super().__init__(f"{host}:{port}")
        except BackendUnavailable:
            self.server.stop()
            raise

    @property
    def controller(self) -> Controller:
        return self.server.controller

    def close(self) -> None:
        super().close()
        self.server.stop()


class ReplayTransport(Transport):
    """Feeds the Event and ACL-received packets of a capture back as inbound frames.

    ``pace="fast"`` queues everything at once; ``pace="recorded"`` keeps the
    recorded gaps, divided by ``speed``. Sends are accepted and kept in ``sent``.
    """

    kind = "replay"

    def __init__(self, records: Iterable[LogRecord], pace: str = "fast", speed: float = 1.0):
        super().__init__()
        if pace not in ("fast", "recorded"):
            raise BadConfig(f"unknown replay pace {pace!r}")
        if speed <= 0:
            raise BadConfig("replay speed must be positive")
        inbound = [r for r in records if r.kind in (RecordKind.EVENT, RecordKind.ACL_RECV)]
        self.sent: list[bytes] = []
        self._stop = threading.Event()
        if pace == "fast":
            for record in inbound:
                self._inbox.put(hci.encode_h4(record.packet))
            self._feeder = None
        else:
            self._feeder = threading.Thread(target=self._feed, args=(inbound, speed), daemon=True)
            self._feeder.start()

    def _feed(self, inbound: list[LogRecord], speed: float) -> None:
        previous = None
        for record in inbound:
            if previous is not None:
                gap = (record.timestamp - previous).total_seconds() / speed
                if self._stop.wait(max(gap, 0.0)):
                    return
            previous = record.timestamp
            self._inbox.put(hci.encode_h4(record.packet))

    def _send(self, frame: bytes) -> None:
        self.sent.append(frame)

    def close(self) -> None:
        self._stop.set()
        super().close()


# --- controller server -----------------------------------------------------

class _H4Handler(socketserver.BaseRequestHandler):
    def handle(self):
        controller: Controller = self.server.controller
        lock = threading.Lock()

        def forward(frame: bytes) -> None:
            with lock:
                try:
                    self.request.sendall(frame)
                except OSError:
                    pass

        controller.attach(forward)
        decoder = H4Decoder()
        try:
            while True:
                try:
                    chunk = self.request.recv(4096)
                except OSError:
                    break
                if not chunk:
                    break
                try:
                    packets = decoder.feed(chunk)
                except hci.HciError as exc:
                    log.warning("dropping desynchronised H4 client: %s", exc)
                    break
                for packet in packets:
                    controller.submit(packet)
                    controller.run_until_idle()
        finally:
            controller.detach(forward)


class ControllerServer(socketserver.ThreadingTCPServer):
    """Serves a controller over TCP with raw H4 framing."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, controller: Controller, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _H4Handler)
        self.controller = controller
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self.serve_forever, name="h4-server", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=1.0)


# --- configuration ---------------------------------------------------------

def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise BadConfig(f"address must be host:port, got {address!r}")
    return host, int(port)


def _controller_from(config: Mapping) -> Controller:
    if config.get("controller") is not None:
        return config["controller"]
    profile = config.get("profile")
    if isinstance(profile, (str, Path)):
        try:
            profile = ControllerProfile.from_file(profile)
        except OSError as exc:
            raise BackendUnavailable(f"cannot read profile: {exc}") from exc
        except ValueError as exc:
            raise BadConfig(f"bad profile: {exc}") from exc
    elif profile is None:
        profile = ControllerProfile()
    if config.get("seed") is not None:
        profile = dataclasses.replace(profile, seed=int(config["seed"]))
    return Controller(profile)


def open_transport(config: Mapping) -> Transport:
    """Open a backend from a mapping with a ``backend`` key.

    ``{"backend": "sim", "seed": 42}``, ``{"backend": "stream", "address": "host:port"}``,
    ``{"backend": "loop"}``, ``{"backend": "replay", "capture": path, "pace": "fast"}``.
    Sim and loop also take ``profile`` (path or ControllerProfile) or ``controller``.
    """
    backend = config.get("backend")
    if backend == "sim":
        return SimTransport(_controller_from(config), autorun=config.get("autorun", True))
    if backend == "loop":
        return LoopTransport(_controller_from(config))
    if backend == "stream":
        if "address" not in config:
            raise BadConfig("stream backend needs an address")
        return StreamTransport(config["address"], config.get("connect_timeout", 2.0))
    if backend == "replay":
        source = config.get("capture")
        if source is None:
            raise BadConfig("replay backend needs a capture")
        if isinstance(source, (str, Path)):
            try:
                records = load_capture(source)
            except OSError as exc:
                raise BackendUnavailable(f"cannot read capture: {exc}") from exc
        else:
            records = list(source)
        return ReplayTransport(records, config.get("pace", "fast"), config.get("speed", 1.0))
    raise BadConfig(f"unknown backend {backend!r}")


# --- cross-backend harness -------------------------------------------------

@dataclass(frozen=True)
class CommandStep:
    opcode: Opcode
    params: bytes = b""


@dataclass(frozen=True)
class AclStep:
    handle: int
    payload: bytes
    pb_flag: int = 0x3


Step = Union[CommandStep, AclStep]


def _await(transport: Transport, transcript: list[HciPacket], live: set[int], done, timeout: float) -> None:
    deadline = time.monotonic() + timeout
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise TimeoutError(f"{transport.kind} backend produced no completion in {timeout}s")
        frame = transport.receive(timeout=remaining)
        if frame is None:
            continue
        event, _ = hci.decode_h4(frame)
        transcript.append(event)
        if isinstance(event, Event):
            handle = hci.connection_handle(event)
            if event.code == EventCode.CONNECTION_COMPLETE and hci.event_status(event) == 0:
                live.add(handle)
            elif event.code == EventCode.DISCONNECTION_COMPLETE:
                live.discard(handle)
            elif hci.event_opcode(event) == hci.RESET:
                live.clear()
            if done(event):
                return


def run_scenario(transport: Transport, scenario: Iterable[Step], timeout: float = 5.0) -> list[HciPacket]:
    """Drive one transport through a script; return every inbound packet in order."""
    transcript: list[HciPacket] = []
    live: set[int] = set()
    for step in scenario:
        if isinstance(step, CommandStep):
            transport.send(hci.encode_h4(Command(step.opcode, step.params)))

            def answered(ev, op=step.opcode):
                return hci.event_opcode(ev) == op

            _await(transport, transcript, live, answered, timeout)
            status = hci.event_status(transcript[-1])
            if step.opcode == hci.CREATE_CONNECTION and transcript[-1].code == EventCode.COMMAND_STATUS \
                    and status == 0:
                _await(transport, transcript, live,
                       lambda ev: ev.code == EventCode.CONNECTION_COMPLETE, timeout)
        else:
            transport.send(hci.encode_h4(AclData(step.handle, step.pb_flag, 0, step.payload)))
            if step.handle in live:
                _await(transport, transcript, live,
                       lambda ev, h=step.handle: any(x == h for x, _ in hci.completed_packets(ev)),
                       timeout)
    return transcript


def transport_equivalence_harness(scenario: Iterable[Step], backends: Mapping[str, Mapping],
                                  timeout: float = 5.0) -> dict[str, list[HciPacket]]:
    """Run the same script over each backend config; return the per-backend transcripts."""
    scenario = list(scenario)
    transcripts = {}
    for name, config in backends.items():
        with open_transport(config) as transport:
            transcripts[name] = run_scenario(transport, scenario, timeout)
    return transcripts
