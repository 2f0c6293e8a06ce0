"""Infer the argument order of a black-box raw ACL send from log feedback.

Each probe places one distinguishable sentinel per parameter role (the one
live handle, a request value that is never a live handle, a tagged payload,
its size), invokes the callable, and classifies the capture records the call
produced. A sentinel that lands in the handle slot is named back by the
driver's "No Device Handle" error, which is what makes a wrong guess
informative.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

from . import hci
from .capture import LogRecord, RecordKind
from .dispatch import DispatchSession, DispatchStatus
from .hci import EventCode

ROLES = ("data", "size", "handle", "request")
DEFAULT_REQUEST_SENTINEL = 0x0172
DEFAULT_DATA_SENTINEL = b"PROBE_SENTINEL_0"

_NO_DEVICE = re.compile(r"ACLPacketToHw No Device Handle 0x([0-9A-Fa-f]+)")


class Feedback(Enum):
    SUCCESS = "Success"
    NO_DEVICE_HANDLE = "NoDeviceHandle"
    MALFORMED = "Malformed"
    SILENT = "Silent"


class Undecidable(Exception):
    def __init__(self, evidence: list[ProbeAttempt]):
        super().__init__(f"no argument order succeeded after {len(evidence)} probes")
        self.evidence = evidence


def classify_feedback(records: Sequence[LogRecord]) -> Feedback:
    if any(r.kind == RecordKind.ERROR and _NO_DEVICE.search(r.message) for r in records):
        return Feedback.NO_DEVICE_HANDLE
    pending: set[int] = set()
    for r in records:
        if r.kind == RecordKind.ACL_SEND:
            pending.add(r.handle)
        elif r.kind == RecordKind.EVENT and r.packet.code == EventCode.NUMBER_OF_COMPLETED_PACKETS:
            if any(h in pending for h, _ in hci.completed_packets(r.packet)):
                return Feedback.SUCCESS
    if any(r.kind == RecordKind.ERROR for r in records):
        return Feedback.MALFORMED
    return Feedback.SILENT


def reported_handle(records: Sequence[LogRecord]) -> int | None:
    """Handle value named by the first No Device Handle error, if any."""
    for r in records:
        if r.kind == RecordKind.ERROR:
            m = _NO_DEVICE.search(r.message)
            if m:
                return int(m.group(1), 16)
    return None


@dataclass
class BlackBoxCallable:
    """A raw-send entry point whose parameter order is hidden from the caller.

    ``hidden[i]`` is the role that caller position ``i`` really feeds;
    roles not probed are bound in ``fixed``.
    """

    target: Callable[..., int]
    hidden: tuple[str, ...]
    fixed: Mapping[str, object] = field(default_factory=dict)

    @property
    def arity(self) -> int:
        return len(self.hidden)

    def invoke(self, values: Sequence[object]) -> int:
        if len(values) != self.arity:
            raise TypeError(f"expected {self.arity} arguments, got {len(values)}")
        kwargs = dict(self.fixed)
        kwargs.update(zip(self.hidden, values))
        return self.target(**kwargs)


def raw_acl_target(session: DispatchSession) -> Callable[..., int]:
    def send(data, size, handle, request):
        return session.send_raw_acl_data(data, size, handle, request)
    return send


def hidden_acl_callable(session: DispatchSession, hidden: Sequence[str],
                        data: bytes = DEFAULT_DATA_SENTINEL) -> BlackBoxCallable:
    """Raw ACL send with ``hidden`` roles permuted and the rest bound to consistent values."""
    fixed = {}
    if "data" not in hidden:
        fixed["data"] = data
    if "size" not in hidden:
        fixed["size"] = len(fixed.get("data", data))
    if "request" not in hidden:
        fixed["request"] = 0
    if "handle" not in hidden:
        raise ValueError("the handle role must be probed")
    return BlackBoxCallable(raw_acl_target(session), tuple(hidden), fixed)


@dataclass(frozen=True)
class ProbeAttempt:
    candidate: tuple[str, ...]
    feedback: Feedback
    status: int
    misplaced: str | None = None  # role whose sentinel reached the handle slot


@dataclass
class ProbeVerdict:
    permutation: tuple[str, ...]  # caller position -> role
    probes_used: int
    evidence: list[ProbeAttempt]

    def table(self) -> str:
        rows = [f"{'#':>2}  {'argument order tried':<34}  {'feedback':<15}  status  misplaced"]
        for i, a in enumerate(self.evidence, 1):
            rows.append(f"{i:>2}  {', '.join(a.candidate):<34}  {a.feedback.value:<15}  "
                        f"{a.status:>6}  {a.misplaced or '-'}")
        rows.append(f"verdict: ({', '.join(self.permutation)}) after {self.probes_used} probes")
        return "\n".join(rows)


def choose_sentinels(live_handle: int, fixed: Mapping[str, object] | None = None) -> dict[str, object]:
    """Pairwise-distinct values, one per role; the request never names a live handle."""
    fixed = dict(fixed or {})
    data = fixed.get("data", DEFAULT_DATA_SENTINEL)
    size = fixed.get("size", len(data))
    taken = {live_handle, size}
    request = fixed.get("request", DEFAULT_REQUEST_SENTINEL)
    if "request" not in fixed:
        while request in taken:
            request += 1
    values = {"data": data, "size": size, "handle": live_handle, "request": request}
    ints = [values[r] for r in ("size", "handle", "request")]
    if len(set(ints)) != 3:
        raise ValueError(f"sentinels collide: {values}")
    return values


def _observe(session: DispatchSession, invoke: Callable[[], int], handle: int,
             settle: float) -> tuple[int, list[LogRecord]]:
    session.poll()
    mark = len(session.capture)
    received = len(session.received)
    status = invoke()
    if status == DispatchStatus.SUCCESS:
        try:
            session.wait_for_completion(handle, timeout=settle, since=received)
        except TimeoutError:
            pass
    else:
        session.poll()
    return status, session.capture.since(mark)


def infer_arg_order(callable_: BlackBoxCallable, roles: Sequence[str], session: DispatchSession,
                    *, settle: float = 0.1, adaptive: bool = False,
                    sentinels: Mapping[str, object] | None = None) -> ProbeVerdict:
    """Try argument orders in lexicographic order until the log shows a completed send.

    ``roles`` is the caller's initial guess, tried first. With ``adaptive``,
    a No Device Handle verdict pins the handle position and skips candidates
    that contradict it.
    """
    roles = tuple(roles)
    if sorted(roles) != sorted(callable_.hidden):
        raise ValueError(f"roles {roles} do not match the callable's parameters")
    live = session.live_handles
    if len(live) != 1:
        raise ValueError(f"probing needs exactly one live connection, session has {len(live)}")
    values = dict(sentinels) if sentinels else choose_sentinels(live[0], callable_.fixed)
    h_star = values["handle"]

    evidence: list[ProbeAttempt] = []
    pinned: dict[int, str] = {}
    for candidate in itertools.permutations(roles):
        if any(candidate[i] != r for i, r in pinned.items()):
            continue
        args = [values[r] for r in candidate]
        status, records = _observe(session, lambda: callable_.invoke(args), h_star, settle)
        feedback = classify_feedback(records)
        misplaced = None
        if feedback is Feedback.NO_DEVICE_HANDLE:
            named = reported_handle(records)
            misplaced = next((r for r in candidate
                              if isinstance(values[r], int) and values[r] == named), None)
            if adaptive and misplaced is not None:
                pinned[candidate.index(misplaced)] = "handle"
        attempt = ProbeAttempt(candidate, feedback, int(status), misplaced)
        evidence.append(attempt)
        session.capture.note(f"probe {len(evidence)}: ({', '.join(candidate)}) -> {feedback.value}"
                             + (f" [{misplaced} in handle slot]" if misplaced else ""))
        if feedback is Feedback.SUCCESS:
            verdict = ProbeVerdict(candidate, len(evidence), evidence)
            session.capture.note(f"probe verdict: ({', '.join(candidate)}) after {len(evidence)} probes")
            return verdict
    raise Undecidable(evidence)
