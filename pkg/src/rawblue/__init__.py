"""Raw HCI/ACL access path over a simulated, vendor-patchable Bluetooth controller."""

from .capture import CaptureLog, CorruptRecord, LogRecord, RecordKind, read_capture, render_text, write_capture
from .controller import Controller, ControllerProfile
from .dispatch import DispatchSession, DispatchStatus, Selector, UnknownSelector, UserClientSelector
from .hci import (
    AclData,
    Command,
    Event,
    H4Decoder,
    Opcode,
    ScoData,
    decode_h4,
    encode_h4,
    raw_command_buffer,
)
from .probe import BlackBoxCallable, Feedback, classify_feedback, infer_arg_order
from .transport import open_transport, transport_equivalence_harness

__version__ = "0.1.0"
