from datetime import datetime, timedelta, timezone

import pytest

from rawblue.capture import CaptureLog
from rawblue.controller import Controller, ControllerProfile
from rawblue.dispatch import DispatchSession
from rawblue.transport import SimTransport

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


class StepClock:
    """Deterministic clock: starts at a fixed instant, advances 1 ms per reading."""

    def __init__(self, start=datetime(2020, 4, 22, 23, 44, 30, 514000, tzinfo=timezone.utc)):
        self.now = start

    def __call__(self):
        current = self.now
        self.now += timedelta(milliseconds=1)
        return current


@pytest.fixture
def clock():
    return StepClock()


@pytest.fixture
def controller():
    return Controller(ControllerProfile(seed=42))


@pytest.fixture
def session(controller, clock):
    s = DispatchSession(SimTransport(controller), CaptureLog(clock))
    yield s
    s.close()


@pytest.fixture
def connected(session):
    """Session with one live connection on handle 0x000B."""
    handle = session.connect(bytes.fromhex("AABBCCDDEEFF"))
    assert handle == 0x000B
    return session


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        line = f"{'PASS' if ok else 'FAIL'}  {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture
def standard_scenario():
    """Reset, connect, one ACL send, a vendor RAM round trip and a local-name read."""
    import struct

    from rawblue import hci
    from rawblue.transport import AclStep, CommandStep

    peer = bytes.fromhex("AABBCCDDEEFF")[::-1] + struct.pack("<HBBHB", 0xCC18, 1, 0, 0, 1)
    return [
        CommandStep(hci.RESET),
        CommandStep(hci.CREATE_CONNECTION, peer),
        AclStep(0x000B, bytes(range(16))),
        CommandStep(hci.VENDOR_WRITE_RAM, struct.pack("<I", 0x00200400) + bytes.fromhex("DEADBEEF")),
        CommandStep(hci.VENDOR_READ_RAM, struct.pack("<IB", 0x00200400, 4)),
        CommandStep(hci.VENDOR_LAUNCH_RAM, struct.pack("<I", 0x00200400)),
        CommandStep(hci.READ_LOCAL_NAME),
    ]
