import inspect
import struct

import pytest
from hypothesis import given, settings, strategies as st

from rawblue import hci
from rawblue.capture import RecordKind, render_columns
from rawblue.controller import Controller
from rawblue.dispatch import (
    DispatchSession,
    DispatchStatus,
    Selector,
    UnknownSelector,
    UserClientSelector,
)
from rawblue.hci import AclData, Command, EventCode
from rawblue.transport import SimTransport

REFUSED_TRACE = [
    "Error                 ACLPacketToHw No Device Handle 0x172",
    "LEAS Send     0x0172  ▶ Data [Handle: 0x0172, Packet Boundary Flags: 0x3, Length: 0x0010 (16)]",
    "Error                 Above ACL Packet not sent Handle 0x172",
]
DELIVERED_TRACE = [
    "LEAS Send     0x000B  ▶ Data [Handle: 0x000B, Packet Boundary Flags: 0x3, Length: 0x0010 (16)]",
    "HCI Event     0x000B  ▶ Number of Completed Packets - Handle: 0x000B - Packets: 0x0001",
]


def lines(records):
    return [render_columns(r) for r in records]


class TestGoldenTraces:
    def test_swapped_handle_and_request(self, connected):
        mark = len(connected.capture)
        status = connected.send_raw_acl_data(bytes(16), 16, 0x0172, 0x000B)
        connected.poll()
        assert status == DispatchStatus.NO_DEVICE_HANDLE
        assert lines(connected.capture.since(mark)) == REFUSED_TRACE

    def test_correct_order(self, connected):
        mark = len(connected.capture)
        assert connected.send_raw_acl_data(bytes(16), 16, 0x000B, 0x0172) == DispatchStatus.SUCCESS
        connected.wait_for_completion(0x000B)
        assert lines(connected.capture.since(mark)) == DELIVERED_TRACE

    def test_delivery_thread_gives_same_trace(self, connected):
        connected.start_delivery()
        try:
            mark = len(connected.capture)
            connected.send_raw_acl(bytes(16), 0x000B, 0)
            connected.wait_for_completion(0x000B, since=0)
            assert lines(connected.capture.since(mark)) == DELIVERED_TRACE
        finally:
            connected.stop_delivery()


class TestCommands:
    def test_reset_status_and_record(self, session):
        status, packets = session.execute(hci.RESET)
        assert status == 0
        assert hci.event_status(packets[-1]) == 0
        kinds = [r.kind for r in session.capture.records]
        assert kinds == [RecordKind.COMMAND, RecordKind.EVENT]

    def test_empty_buffer(self, session):
        assert session.send_raw_command(0, b"") == DispatchStatus.MALFORMED_BUFFER
        assert session.capture.records[-1].kind == RecordKind.ERROR

    def test_length_mismatch(self, session):
        assert session.send_raw_command(0, bytes.fromhex("030c01")) == DispatchStatus.MALFORMED_BUFFER

    def test_not_a_buffer(self, session):
        assert session.send_raw_command(0, "030c00") == DispatchStatus.MALFORMED_BUFFER

    @pytest.mark.parametrize("request_id", [-1, 1 << 32, "x", True])
    def test_bad_request_id(self, session, request_id):
        assert session.send_raw_command(request_id, bytes.fromhex("030c00")) == DispatchStatus.INVALID_ARGUMENT

    def test_read_ram(self, session):
        session.execute(hci.VENDOR_WRITE_RAM, struct.pack("<I", 0x100) + b"\x11\x22")
        _, packets = session.execute(hci.VENDOR_READ_RAM, struct.pack("<IB", 0x100, 3))
        assert hci.return_parameters(packets[-1]) == b"\x00\x11\x22\x00"

    def test_request_id_kept_in_call_log(self, session):
        session.send_raw_command(0xDEADBEEF, bytes.fromhex("030c00"))
        assert session.calls[-1].request_id == 0xDEADBEEF
        assert session.calls[-1].api == "command"


class TestAcl:
    def test_handle_out_of_range(self, connected):
        assert connected.send_raw_acl_data(b"x", 1, 0xFFFF, 0) == DispatchStatus.HANDLE_OUT_OF_RANGE
        assert connected.capture.records[-1].kind == RecordKind.ERROR

    @pytest.mark.parametrize("data,size", [(b"", 0), (b"abc", 2), (b"abc", "3"), ("abc", 3)])
    def test_malformed(self, connected, data, size):
        assert connected.send_raw_acl_data(data, size, 0x000B, 0) == DispatchStatus.MALFORMED_BUFFER

    def test_oversized(self, connected):
        data = bytes(hci.MAX_ACL_PAYLOAD + 1)
        assert connected.send_raw_acl_data(data, len(data), 0x000B, 0) == DispatchStatus.MALFORMED_BUFFER

    def test_negative_handle(self, connected):
        assert connected.send_raw_acl_data(b"x", 1, -1, 0) == DispatchStatus.INVALID_ARGUMENT

    def test_disconnect_forgets_handle(self, connected):
        connected.execute(hci.DISCONNECT, struct.pack("<HB", 0x000B, 0x13))
        connected.wait_for(lambda p: p.code == EventCode.DISCONNECTION_COMPLETE, since=0)
        assert connected.live_handles == []
        assert connected.send_raw_acl(b"x", 0x000B, 0) == DispatchStatus.NO_DEVICE_HANDLE

    def test_reset_forgets_handles(self, connected):
        connected.execute(hci.RESET)
        assert connected.live_handles == []


class TestUserClient:
    def test_unknown_selector(self, session):
        with pytest.raises(UnknownSelector) as info:
            session.dispatch_user_client(UserClientSelector(0x99, b""))
        assert info.value.selector == 0x99

    def test_send_hci_returns_status_byte(self, session):
        frame = hci.encode_h4(Command(hci.RESET))
        assert session.dispatch_user_client(UserClientSelector(Selector.SEND_HCI, frame)) == b"\x00"

    def test_send_acl_returns_status_byte(self, connected):
        frame = hci.encode_h4(AclData(0x000B, 3, 0, b"hi"))
        assert connected.dispatch_user_client(UserClientSelector(Selector.SEND_ACL, frame)) == b"\x00"

    def test_wrong_packet_type_for_selector(self, session):
        frame = hci.encode_h4(Command(hci.RESET))
        reply = session.dispatch_user_client(UserClientSelector(Selector.SEND_ACL, frame))
        assert struct.unpack("b", reply)[0] == DispatchStatus.MALFORMED_BUFFER

    def test_signed_status(self, session):
        reply = session.dispatch_user_client(UserClientSelector(Selector.SEND_HCI, b"\x01"))
        assert reply == b"\xff"


class TestInvariants:
    @settings(max_examples=100, deadline=None)
    @given(st.one_of(st.binary(max_size=8), st.integers(-2, 0x1000)), st.integers(0, 20),
           st.integers(-1, 0x1000), st.integers(-1, 5))
    def test_every_call_logs_and_status_matches_errors(self, data, size, handle, request):
        session = DispatchSession(SimTransport(Controller()))
        session.connect(bytes(6))
        mark = len(session.capture)
        status = session.send_raw_acl_data(data, size, handle, request)
        new = session.capture.since(mark)
        assert new, "every call leaves at least one record"
        assert (status != 0) == any(r.kind == RecordKind.ERROR for r in new)

    def test_transport_down(self, connected):
        connected.transport.close()
        assert connected.send_raw_command(0, bytes.fromhex("030c00")) == DispatchStatus.TRANSPORT_DOWN
        assert connected.send_raw_acl(b"x", 0x000B, 0) == DispatchStatus.TRANSPORT_DOWN
        assert [r.kind for r in connected.capture.records[-2:]] == [RecordKind.ERROR] * 2

    def test_no_identity_parameters(self):
        for fn in (DispatchSession.send_raw_command, DispatchSession.send_raw_acl_data,
                   DispatchSession.send_raw_acl, DispatchSession.dispatch_user_client,
                   DispatchSession.__init__):
            names = set(inspect.signature(fn).parameters)
            assert not names & {"uid", "gid", "user", "credentials", "entitlement", "token", "pid"}
