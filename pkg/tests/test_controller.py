import struct

import pytest
from hypothesis import given, settings, strategies as st

from rawblue import hci
from rawblue.controller import AclResult, Controller, ControllerProfile, MAX_RAM_CHUNK
from rawblue.hci import AclData, Command, EventCode, Opcode

PEER = bytes.fromhex("AABBCCDDEEFF")


class Recorder:
    def __init__(self, controller):
        self.events = []
        controller.attach(self)

    def __call__(self, frame):
        self.events.append(hci.decode_h4(frame)[0])


def connect(ctrl, peer=PEER):
    params = peer[::-1] + struct.pack("<HBBHB", 0xCC18, 1, 0, 0, 1)
    events = ctrl.handle_command(Command(hci.CREATE_CONNECTION, params))
    done = [e for e in events if e.code == EventCode.CONNECTION_COMPLETE]
    assert hci.event_status(done[0]) == 0
    return hci.connection_handle(done[0])


def nocp_total(events):
    return sum(c for e in events if e.code == EventCode.NUMBER_OF_COMPLETED_PACKETS
               for _, c in hci.completed_packets(e))


class TestCommands:
    def test_reset_completes(self, controller):
        [ev] = controller.handle_command(Command(hci.RESET))
        assert ev.code == EventCode.COMMAND_COMPLETE
        assert hci.event_opcode(ev) == hci.RESET and hci.event_status(ev) == 0

    def test_unknown_opcode_gets_status_01(self, controller):
        op = Opcode(0x3F, 0x123)
        [ev] = controller.handle_command(Command(op))
        assert ev.code == EventCode.COMMAND_STATUS
        assert hci.event_status(ev) == 0x01 and hci.event_opcode(ev) == op

    def test_handles_allocated_in_order(self, controller):
        assert connect(controller, PEER) == 0x000B
        assert connect(controller, bytes(6)) == 0x000C

    def test_lowest_free_handle_reused(self, controller):
        connect(controller, PEER)
        second = connect(controller, bytes(6))
        controller.handle_command(Command(hci.DISCONNECT, struct.pack("<HB", 0x000B, 0x13)))
        assert connect(controller, bytes.fromhex("010203040506")) == 0x000B
        assert second == 0x000C

    def test_duplicate_peer_refused(self, controller):
        connect(controller)
        params = PEER[::-1] + bytes(7)
        events = controller.handle_command(Command(hci.CREATE_CONNECTION, params))
        assert hci.event_status(events[-1]) == 0x0B

    def test_reset_clears_state_keeps_identity(self, controller):
        addr = controller.state.bd_addr
        connect(controller)
        controller.vendor_write_ram(0x1000, b"\x01\x02")
        controller.vendor_launch_ram(controller.profile.patch_entry)
        controller.handle_command(Command(hci.RESET))
        assert controller.state.connections == {}
        assert controller.read_ram(0x1000, 2) == b"\0\0"
        assert controller.state.local_name == controller.profile.local_name
        assert controller.state.bd_addr == addr

    def test_read_buffer_size(self, controller):
        [ev] = controller.handle_command(Command(hci.READ_BUFFER_SIZE))
        status, acl_len, _, acl_num, _ = struct.unpack("<BHBHH", hci.return_parameters(ev))
        assert (status, acl_len, acl_num) == (0, 1021, 8)

    def test_seed_determines_address(self):
        a = Controller(ControllerProfile(seed=7)).state.bd_addr
        assert a == Controller(ControllerProfile(seed=7)).state.bd_addr
        assert a != Controller(ControllerProfile(seed=8)).state.bd_addr

    def test_read_bd_addr_little_endian(self, controller):
        [ev] = controller.handle_command(Command(hci.READ_BD_ADDR))
        assert hci.return_parameters(ev)[1:][::-1] == controller.state.bd_addr

    def test_disconnect_unknown(self, controller):
        [ev] = controller.handle_command(Command(hci.DISCONNECT, struct.pack("<HB", 0x0100, 0x13)))
        assert hci.event_status(ev) == 0x02


class TestFlowControl:
    def test_nine_sends_eight_credits(self, controller):
        rec = Recorder(controller)
        h = connect(controller)
        results = [controller.handle_acl(AclData(h, 3, 0, bytes([i]))) for i in range(9)]
        assert results.count(AclResult.ACCEPTED) == 8
        assert results[-1] is AclResult.QUEUED
        assert controller.state.outstanding == 8
        controller.run_until_idle()
        assert nocp_total(rec.events) == 9
        assert controller.max_outstanding == 8
        assert [p for _, p in controller.peer_deliveries] == [bytes([i]) for i in range(9)]

    def test_unknown_handle_dropped(self, controller):
        assert controller.handle_acl(AclData(0x0172, 3, 0, b"x")) is AclResult.HANDLE_UNKNOWN
        assert controller.idle

    def test_disconnect_completes_flushed(self, controller):
        rec = Recorder(controller)
        h = connect(controller)
        for _ in range(3):
            controller.handle_acl(AclData(h, 3, 0, b"x"))
        controller.submit(Command(hci.DISCONNECT, struct.pack("<HB", h, 0x13)))
        controller.process()
        assert nocp_total(rec.events) == 3
        assert controller.state.outstanding == 0 and controller.idle

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 2), st.booleans()), max_size=60))
    def test_credits_never_exceeded(self, plan):
        ctrl = Controller(ControllerProfile(acl_buffers=4))
        rec = Recorder(ctrl)
        handles = [connect(ctrl, bytes([i]) * 6) for i in range(3)]
        for idx, drain in plan:
            ctrl.handle_acl(AclData(handles[idx], 3, 0, b"p"))
            assert ctrl.state.outstanding <= 4
            if drain:
                ctrl.transmit(1)
        ctrl.run_until_idle()
        assert nocp_total(rec.events) == len(plan)
        assert ctrl.max_outstanding <= 4


class TestVendorRam:
    def test_write_then_read(self, controller):
        controller.vendor_write_ram(0x00200400, bytes.fromhex("DEADBEEF"))
        [ev] = controller.vendor_read_ram(0x00200400, 6)
        assert hci.return_parameters(ev) == bytes.fromhex("00DEADBEEF0000")

    def test_over_the_wire(self, controller):
        rec = Recorder(controller)
        controller.submit(Command(hci.VENDOR_WRITE_RAM, struct.pack("<I", 0x10) + b"\xAA\xBB"))
        controller.submit(Command(hci.VENDOR_READ_RAM, struct.pack("<IB", 0x0F, 4)))
        controller.process()
        assert hci.return_parameters(rec.events[1]) == b"\x00\x00\xAA\xBB\x00"

    def test_chunk_limit(self, controller):
        with pytest.raises(hci.LengthOverflow):
            controller.vendor_write_ram(0, bytes(MAX_RAM_CHUNK + 1))
        [ev] = controller.handle_command(Command(hci.VENDOR_READ_RAM, struct.pack("<IB", 0, 252)))
        assert hci.event_status(ev) == 0x12

    def test_short_params(self, controller):
        [ev] = controller.handle_command(Command(hci.VENDOR_LAUNCH_RAM, b"\x00"))
        assert hci.event_status(ev) == 0x12

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 0xFFFF), st.binary(min_size=1, max_size=MAX_RAM_CHUNK)),
                    max_size=20),
           st.integers(0, 0xFFFF - MAX_RAM_CHUNK))
    def test_matches_flat_array(self, writes, probe):
        ctrl = Controller()
        oracle = bytearray(0x10000 + MAX_RAM_CHUNK)
        for addr, data in writes:
            ctrl.vendor_write_ram(addr, data)
            oracle[addr:addr + len(data)] = data
        assert ctrl.read_ram(probe, MAX_RAM_CHUNK) == bytes(oracle[probe:probe + MAX_RAM_CHUNK])

    def test_launch_marks_name_once(self, controller):
        entry = controller.profile.patch_entry
        controller.vendor_launch_ram(0x1234)
        assert controller.state.local_name == controller.profile.local_name
        controller.vendor_launch_ram(entry)
        controller.vendor_launch_ram(entry)
        assert controller.state.local_name == controller.profile.local_name + " [patched]"


class TestProfile:
    def test_from_text(self):
        p = ControllerProfile.from_text(
            "bd_addr = 00:11:22:33:44:55\nacl_buffers = 4  # small\npatch_entry = 0x1000\n"
            "read_ram_opcode = 0xFC99\n")
        assert p.bd_addr == bytes.fromhex("001122334455")
        assert p.acl_buffers == 4 and p.patch_entry == 0x1000
        assert p.read_ram_opcode == Opcode.from_value(0xFC99)

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            ControllerProfile.from_text("colour = blue\n")

    def test_from_file(self, tmp_path):
        path = tmp_path / "chip.ini"
        path.write_text("local_name = Test Chip\nseed = 3\n")
        ctrl = Controller(ControllerProfile.from_file(path))
        assert ctrl.state.local_name == "Test Chip" and ctrl.state.rng_seed == 3

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            ControllerProfile(acl_buffers=0)
        with pytest.raises(ValueError):
            ControllerProfile(bd_addr=b"\x00")
