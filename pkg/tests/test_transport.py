import socket

import pytest

from rawblue import hci
from rawblue.capture import CaptureLog, LogRecord, RecordKind
from rawblue.controller import Controller, ControllerProfile
from rawblue.dispatch import DispatchSession
from rawblue.hci import AclData, Command, EventCode
from rawblue.transport import (
    BackendUnavailable,
    BadConfig,
    ControllerServer,
    ReplayTransport,
    StreamTransport,
    TransportDown,
    open_transport,
    parse_address,
    run_scenario,
    transport_equivalence_harness,
)


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class TestConfig:
    def test_parse_address(self):
        assert parse_address("localhost:9000") == ("localhost", 9000)
        with pytest.raises(BadConfig):
            parse_address("localhost")

    @pytest.mark.parametrize("config", [{}, {"backend": "usb"}, {"backend": "stream"},
                                        {"backend": "replay"},
                                        {"backend": "replay", "capture": [], "pace": "slow"}])
    def test_bad_config(self, config):
        with pytest.raises(BadConfig):
            open_transport(config)

    def test_unreachable_stream(self):
        with pytest.raises(BackendUnavailable):
            open_transport({"backend": "stream", "address": f"127.0.0.1:{free_port()}",
                            "connect_timeout": 0.5})

    def test_missing_profile(self, tmp_path):
        with pytest.raises(BackendUnavailable):
            open_transport({"backend": "sim", "profile": tmp_path / "absent.ini"})

    def test_seed_overrides_profile(self, tmp_path):
        path = tmp_path / "p.ini"
        path.write_text("seed = 1\n")
        with open_transport({"backend": "sim", "profile": path, "seed": 9}) as t:
            assert t.controller.state.rng_seed == 9


class TestSim:
    def test_same_seed_same_transcript(self, standard_scenario):
        runs = [run_scenario(open_transport({"backend": "sim", "seed": 5}), standard_scenario)
                for _ in range(2)]
        assert runs[0] == runs[1]

    def test_closed_transport_is_down(self):
        t = open_transport({"backend": "sim"})
        t.close()
        assert not t.is_up
        with pytest.raises(TransportDown):
            t.send(hci.encode_h4(Command(hci.RESET)))

    def test_empty_script(self):
        with open_transport({"backend": "sim"}) as t:
            assert run_scenario(t, []) == []


class TestStream:
    def test_external_server(self):
        server = ControllerServer(Controller(ControllerProfile(seed=1)))
        server.start()
        try:
            with StreamTransport(server.address) as t:
                t.send(hci.encode_h4(Command(hci.RESET)))
                frame = t.receive(timeout=2)
                ev, _ = hci.decode_h4(frame)
                assert hci.event_opcode(ev) == hci.RESET
        finally:
            server.stop()

    def test_server_gone_reports_down(self):
        server = ControllerServer(Controller())
        server.start()
        t = StreamTransport(server.address)
        server.stop()
        t.close()
        with pytest.raises(TransportDown):
            t.send(hci.encode_h4(Command(hci.RESET)))


class TestEquivalence:
    def test_sim_and_loop_agree(self, standard_scenario):
        out = transport_equivalence_harness(standard_scenario, {
            "sim": {"backend": "sim", "seed": 42},
            "loop": {"backend": "loop", "seed": 42},
        })
        assert out["sim"] == out["loop"]
        assert [hci.encode_h4(p) for p in out["sim"]] == [hci.encode_h4(p) for p in out["loop"]]
        name = hci.return_parameters(out["sim"][-1])[1:].rstrip(b"\0").decode()
        assert name.endswith(" [patched]")


class TestReplay:
    def delivered_capture(self, clock):
        log = CaptureLog(clock)
        log.packet(RecordKind.ACL_SEND, AclData(0x000B, 3, 0, bytes(16)))
        log.packet(RecordKind.EVENT, hci.number_of_completed_packets([(0x000B, 1)]))
        return log.records

    def test_replays_events_only(self, clock):
        t = ReplayTransport(self.delivered_capture(clock))
        ev, _ = hci.decode_h4(t.receive(timeout=1))
        assert ev.code == EventCode.NUMBER_OF_COMPLETED_PACKETS
        assert t.receive(timeout=0) is None

    def test_session_over_replay(self, clock, tmp_path):
        from rawblue.capture import save_capture
        path = tmp_path / "delivered.bin"
        save_capture(path, self.delivered_capture(clock))
        session = DispatchSession(open_transport({"backend": "replay", "capture": path}), CaptureLog(clock))
        ev = session.wait_for_completion(0x000B, timeout=1)
        assert hci.completed_packets(ev) == [(0x000B, 1)]

    def test_recorded_pace(self, clock):
        records = self.delivered_capture(clock) + [LogRecord.for_packet(
            RecordKind.EVENT, hci.command_complete(hci.RESET, b"\0"), clock())]
        t = ReplayTransport(records, pace="recorded", speed=10)
        frames = [t.receive(timeout=1) for _ in range(2)]
        assert all(frames)
        t.close()
