"""Interactive shell and batch runner for the raw HCI/ACL stack.

    rawblue [--transport T] [--profile FILE] [--capture FILE] [--seed N] [repl | batch SCRIPT | serve]

Transports: ``sim`` (default), ``loop``, ``stream:HOST:PORT``, ``replay:FILE``.
Exit codes: 0 success, 1 a command failed, 2 setup failed.
"""

from __future__ import annotations

import argparse
import cmd
import logging
import shlex
import sys
from pathlib import Path
from typing import TextIO

from . import hci
from .capture import CaptureLog, render_text
from .controller import Controller, ControllerProfile
from .dispatch import DispatchSession, DispatchStatus
from .hci import Event, Opcode
from .probe import Undecidable, hidden_acl_callable, infer_arg_order
from .transport import ControllerServer, TransportError, open_transport

EXIT_OK = 0
EXIT_COMMAND_FAILED = 1
EXIT_SETUP_FAILED = 2

DEMO_PEER = bytes.fromhex("0A1B2C3D4E5F")


class UsageError(ValueError):
    pass


def parse_hex(text: str) -> bytes:
    """Spaced or contiguous hex, tokens may carry 0x."""
    tokens = text.replace(",", " ").split()
    cleaned = "".join(t[2:] if t.lower().startswith("0x") else t for t in tokens)
    try:
        return bytes.fromhex(cleaned)
    except ValueError:
        raise UsageError(f"not hex: {text!r}") from None


def parse_int(text: str, base: int = 16) -> int:
    try:
        if text.lower().startswith("0x"):
            return int(text[2:], 16)
        return int(text, base)
    except ValueError:
        raise UsageError(f"not a number: {text!r}") from None


def parse_addr(text: str) -> bytes:
    addr = parse_int(text)
    if not 0 <= addr <= 0xFFFFFFFF:
        raise UsageError(f"address {text!r} does not fit in 32 bits")
    return addr.to_bytes(4, "little")


def parse_transport(text: str, seed: int | None = None, profile: str | None = None) -> dict:
    kind, _, rest = text.partition(":")
    if kind in ("sim", "loop"):
        return {"backend": kind, "seed": seed, "profile": profile}
    if kind == "stream":
        return {"backend": "stream", "address": rest}
    if kind == "replay":
        return {"backend": "replay", "capture": rest}
    raise UsageError(f"unknown transport {text!r}")


class Shell(cmd.Cmd):
    prompt = "rawblue> "
    intro = "raw HCI/ACL shell - 'help' lists commands"

    def __init__(self, session: DispatchSession, stdout: TextIO | None = None,
                 stdin: TextIO | None = None, timeout: float = 2.0):
        super().__init__(stdin=stdin, stdout=stdout)
        if stdin is not None:
            self.use_rawinput = False
        self.session = session
        self.timeout = timeout
        self.failed = False
        self.error: str | None = None
        self._shown = len(session.capture)
        self._request = 0

    # -- plumbing ---------------------------------------------------------

    def say(self, text: str = "") -> None:
        self.stdout.write(text + "\n")

    def _flush(self) -> None:
        self.session.poll()
        for record in self.session.capture.since(self._shown):
            self.say(render_text(record))
        self._shown = len(self.session.capture)

    def _fail(self, message: str) -> None:
        self.failed = True
        self.error = message
        self.say(f"error: {message}")

    def _next_request(self) -> int:
        self._request += 1
        return self._request

    def onecmd(self, line: str) -> bool:
        self.failed = False
        self.error = None
        try:
            return super().onecmd(line)
        except UsageError as exc:
            self._fail(str(exc))
        except TimeoutError:
            self._fail("timed out waiting for the controller")
        except TransportError as exc:
            self._fail(f"transport: {exc}")
        return False

    def postcmd(self, stop: bool, line: str) -> bool:
        self._flush()
        return stop

    def emptyline(self) -> bool:
        return False

    def default(self, line: str) -> None:
        self._fail(f"unknown command {line.split()[0]!r}; try 'help'")

    def _args(self, arg: str, low: int, high: int, usage: str) -> list[str]:
        args = shlex.split(arg)
        if not low <= len(args) <= high:
            raise UsageError(f"usage: {usage}")
        return args

    def _command(self, opcode: Opcode, params: bytes = b"") -> list[Event] | None:
        status, packets = self.session.execute(opcode, params, self._next_request(), self.timeout)
        if status != DispatchStatus.SUCCESS:
            self._fail(f"dispatch status {int(status)} ({DispatchStatus(status).name})")
            return None
        events = [p for p in packets if isinstance(p, Event)]
        bad = [hci.event_status(e) for e in events if hci.event_status(e) not in (None, 0)]
        if bad:
            self._fail(f"controller status 0x{bad[0]:02X}")
        return events

    # -- commands ---------------------------------------------------------

    def do_connect(self, arg: str) -> None:
        """connect <bdaddr>  - create a connection, print its handle"""
        (addr,) = self._args(arg, 1, 1, "connect <bdaddr>")
        try:
            peer = hci.parse_bdaddr(addr)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        try:
            handle = self.session.connect(peer, self.timeout)
        except ConnectionError as exc:
            self._flush()
            self._fail(str(exc))
            return
        self._flush()
        self.say(f"connected: handle 0x{handle:04X}")

    def do_sendhcicmd(self, arg: str) -> None:
        """sendhcicmd <ogf> <ocf> [hexparams]  - send a raw HCI command"""
        args = self._args(arg, 2, 3 + 255, "sendhcicmd <ogf> <ocf> [hexparams]")
        try:
            opcode = Opcode(parse_int(args[0]), parse_int(args[1]))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        params = parse_hex(" ".join(args[2:]))
        if len(params) > hci.MAX_PARAMS:
            raise UsageError(f"at most {hci.MAX_PARAMS} parameter bytes")
        events = self._command(opcode, params)
        complete = [e for e in events or [] if e.code == hci.EventCode.COMMAND_COMPLETE]
        if complete and not self.failed:
            ret = hci.return_parameters(complete[-1])[1:]
            self._flush()
            if opcode == hci.READ_LOCAL_NAME:
                name = ret.split(b"\0", 1)[0].decode("utf-8", "replace")
                self.say(f"local name: {name}")
            elif ret:
                self.say(f"return: {ret.hex(' ').upper()}")

    def do_sendaclcmd(self, arg: str) -> None:
        """sendaclcmd <handle> <hexpayload>  - send raw ACL data on a handle"""
        args = self._args(arg, 2, 2 + 65535, "sendaclcmd <handle> <hexpayload>")
        handle = parse_int(args[0])
        payload = parse_hex(" ".join(args[1:]))
        mark = len(self.session.received)
        status = self.session.send_raw_acl(payload, handle, self._next_request())
        if status != DispatchStatus.SUCCESS:
            self._flush()
            self._fail(f"dispatch status {int(status)} ({DispatchStatus(status).name})")
            return
        self.session.wait_for_completion(handle, self.timeout, since=mark)
        self._flush()
        self.say(f"status {int(status)} ({DispatchStatus(status).name})")

    def do_writeram(self, arg: str) -> None:
        """writeram <addr> <hex>  - vendor Write_RAM"""
        args = self._args(arg, 2, 2 + 251, "writeram <addr> <hex>")
        addr = parse_addr(args[0])
        data = parse_hex(" ".join(args[1:]))
        if len(data) > 251:
            raise UsageError("Write_RAM carries at most 251 bytes")
        self._command(hci.VENDOR_WRITE_RAM, addr + data)

    def do_readram(self, arg: str) -> None:
        """readram <addr> <len>  - vendor Read_RAM, prints the bytes"""
        addr_text, len_text = self._args(arg, 2, 2, "readram <addr> <len>")
        addr, length = parse_addr(addr_text), parse_int(len_text, 10)
        if not 0 <= length <= 251:
            raise UsageError("Read_RAM returns at most 251 bytes")
        events = self._command(hci.VENDOR_READ_RAM, addr + bytes([length]))
        if events and not self.failed:
            self._flush()
            self.say(hci.return_parameters(events[-1])[1:].hex(" ").upper())

    def do_launchram(self, arg: str) -> None:
        """launchram <addr>  - vendor Launch_RAM"""
        (addr_text,) = self._args(arg, 1, 1, "launchram <addr>")
        self._command(hci.VENDOR_LAUNCH_RAM, parse_addr(addr_text))

    def do_log(self, arg: str) -> None:
        """log [tail [n] | export <file>]  - show or save the capture"""
        args = shlex.split(arg)
        if not args or args[0] == "tail":
            n = parse_int(args[1], 10) if len(args) > 1 else 20
            for line in self.session.capture.render(tail=n):
                self.say(line)
        elif args[0] == "export" and len(args) == 2:
            try:
                self.session.capture.export(args[1])
            except OSError as exc:
                self._fail(f"cannot write {args[1]}: {exc}")
                return
            self.say(f"wrote {len(self.session.capture)} records to {args[1]}")
        else:
            raise UsageError("usage: log [tail [n] | export <file>]")

    def do_probe(self, arg: str) -> None:
        """probe demo  - recover a hidden handle/request swap from log feedback"""
        if shlex.split(arg) != ["demo"]:
            raise UsageError("usage: probe demo")
        live = self.session.live_handles
        if not live:
            self.do_connect(hci.format_bdaddr(DEMO_PEER))
            if self.failed:
                return
            live = self.session.live_handles
        if len(live) != 1:
            self._fail(f"probe demo needs exactly one live connection, found {len(live)}")
            return
        guess = ("data", "size", "handle", "request")
        hidden = ("data", "size", "request", "handle")
        target = hidden_acl_callable(self.session, hidden)
        try:
            verdict = infer_arg_order(target, guess, self.session, settle=self.timeout)
        except Undecidable as exc:
            self._fail(str(exc))
            return
        self._flush()
        self.say(verdict.table())

    def do_quit(self, arg: str) -> bool:
        """quit  - leave the shell"""
        return True

    do_exit = do_quit

    def do_EOF(self, arg: str) -> bool:
        self.say()
        return True


def run_batch(shell: Shell, lines, err: TextIO) -> int:
    for number, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        stop = shell.onecmd(line)
        shell.postcmd(stop, line)
        if shell.failed:
            err.write(f"line {number}: {line}: {shell.error}\n")
            return EXIT_COMMAND_FAILED
        if stop:
            break
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rawblue", description="Raw HCI/ACL access over a simulated controller")
    parser.add_argument("--transport", default="sim", help="sim | loop | stream:HOST:PORT | replay:FILE")
    parser.add_argument("--profile", help="controller profile (key = value file)")
    parser.add_argument("--capture", help="write the capture file here on exit")
    parser.add_argument("--seed", type=int, default=None, help="controller seed")
    parser.add_argument("--timeout", type=float, default=2.0, help="seconds to wait for controller replies")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="mode")
    sub.add_parser("repl", help="interactive shell (default)")
    batch = sub.add_parser("batch", help="run a script of shell commands")
    batch.add_argument("script")
    serve = sub.add_parser("serve", help="serve a simulated controller over TCP (H4 framing)")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8873)
    return parser


def _serve(args) -> int:
    try:
        profile = ControllerProfile.from_file(args.profile) if args.profile else ControllerProfile()
        if args.seed is not None:
            profile.seed = args.seed
        server = ControllerServer(Controller(profile), args.host, args.port)
    except (OSError, ValueError) as exc:
        print(f"setup failed: {exc}", file=sys.stderr)
        return EXIT_SETUP_FAILED
    print(f"serving simulated controller on {server.address}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def main(argv: list[str] | None = None, stdin: TextIO | None = None, stdout: TextIO | None = None,
         capture: CaptureLog | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    stdout = stdout or sys.stdout
    if args.mode == "serve":
        return _serve(args)

    script = None
    if args.mode == "batch":
        try:
            script = Path(args.script).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            print(f"setup failed: {exc}", file=sys.stderr)
            return EXIT_SETUP_FAILED
    try:
        transport = open_transport(parse_transport(args.transport, args.seed, args.profile))
    except (TransportError, UsageError) as exc:
        print(f"setup failed: {exc}", file=sys.stderr)
        return EXIT_SETUP_FAILED

    session = DispatchSession(transport, capture)
    shell = Shell(session, stdout=stdout, stdin=stdin, timeout=args.timeout)
    try:
        if script is not None:
            code = run_batch(shell, script, sys.stderr)
        else:
            shell.cmdloop()
            code = EXIT_OK
    finally:
        session.close()
        if args.capture:
            session.capture.export(args.capture)
    return code


if __name__ == "__main__":
    sys.exit(main())
