"""Wire format for probe datagrams.

Every data-plane packet carries a fixed 48-byte big-endian header followed by
zero padding up to the flow's configured datagram size.  The header is
position-stable so that independent implementations produce identical bytes
for identical field values:

    offset  size  field
    0       4     magic ``0x53 0x54 0x4E 0x47`` (``STNG``)
    4       1     version (1)
    5       1     packet type: 0=Data, 1=EchoRequest, 2=EchoReply
    6       2     flow_id (u16)
    8       8     seq (u64)
    16      8     tx_timestamp_ns (u64, sender clock)
    24      8     responder_rx_ns (u64, EchoReply only, else 0)
    32      8     responder_tx_ns (u64, EchoReply only, else 0)
    40      4     frame_id (u32)
    44      2     fragment_index (u16)
    46      2     fragment_count (u16, >= 1)

Echo replies subtract responder processing time from the round trip:
``rtt = (receive - tx_timestamp) - (responder_tx - responder_rx)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"STNG"
VERSION = 1
HEADER_LEN = 48
MAX_DATAGRAM = 65507  # UDP payload limit over IPv4

TYPE_DATA = 0
TYPE_ECHO_REQUEST = 1
TYPE_ECHO_REPLY = 2

_HEADER = struct.Struct(">4sBBHQQQQIHH")
assert _HEADER.size == HEADER_LEN

_U16 = 1 << 16
_U32 = 1 << 32
_U64 = 1 << 64


class ProbeError(ValueError):
    """Base class for probe codec failures."""


class SizeTooSmall(ProbeError):
    """Requested datagram size cannot hold the header."""


class BadMagic(ProbeError):
    """Datagram does not start with the probe magic."""


class BadVersion(ProbeError):
    """Header version is not supported."""


class Truncated(ProbeError):
    """Datagram is shorter than the fixed header."""


class NotEchoRequest(ProbeError):
    """Echo reply requested for a packet that is not an echo request."""


@dataclass(frozen=True)
class ProbePacket:
    packet_type: int
    flow_id: int
    seq: int
    tx_timestamp_ns: int
    responder_rx_ns: int = 0
    responder_tx_ns: int = 0
    frame_id: int = 0
    fragment_index: int = 0
    fragment_count: int = 1


def _check_fields(packet: ProbePacket) -> None:
    if packet.packet_type not in (TYPE_DATA, TYPE_ECHO_REQUEST, TYPE_ECHO_REPLY):
        raise ProbeError(f"unknown packet type {packet.packet_type}")
    if not 0 <= packet.flow_id < _U16:
        raise ProbeError(f"flow_id {packet.flow_id} out of u16 range")
    for name in ("seq", "tx_timestamp_ns", "responder_rx_ns", "responder_tx_ns"):
        value = getattr(packet, name)
        if not 0 <= value < _U64:
            raise ProbeError(f"{name} {value} out of u64 range")
    if not 0 <= packet.frame_id < _U32:
        raise ProbeError(f"frame_id {packet.frame_id} out of u32 range")
    if not 0 <= packet.fragment_index < _U16:
        raise ProbeError(f"fragment_index {packet.fragment_index} out of u16 range")
    if not 1 <= packet.fragment_count < _U16:
        raise ProbeError(f"fragment_count {packet.fragment_count} out of u16 range")
    if packet.fragment_index >= packet.fragment_count:
        raise ProbeError(
            f"fragment_index {packet.fragment_index} >= fragment_count {packet.fragment_count}"
        )


def encode(packet: ProbePacket, payload_bytes: int = HEADER_LEN) -> bytes:
    """Serialize ``packet`` into a datagram of exactly ``payload_bytes`` bytes.

    Bytes past the header are zero padding.  Raises :class:`SizeTooSmall` if
    ``payload_bytes`` cannot hold the header.
    """
    if payload_bytes < HEADER_LEN:
        raise SizeTooSmall(f"payload_bytes {payload_bytes} < header size {HEADER_LEN}")
    if payload_bytes > MAX_DATAGRAM:
        raise ProbeError(f"payload_bytes {payload_bytes} exceeds UDP limit {MAX_DATAGRAM}")
    _check_fields(packet)
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        packet.packet_type,
        packet.flow_id,
        packet.seq,
        packet.tx_timestamp_ns,
        packet.responder_rx_ns,
        packet.responder_tx_ns,
        packet.frame_id,
        packet.fragment_index,
        packet.fragment_count,
    )
    if payload_bytes == HEADER_LEN:
        return header
    return header + bytes(payload_bytes - HEADER_LEN)


def decode(data: bytes) -> ProbePacket:
    """Parse the header of a received datagram.

    Padding beyond the header is ignored.  Raises :class:`Truncated`,
    :class:`BadMagic` or :class:`BadVersion` on malformed input.
    """
    if len(data) < HEADER_LEN:
        raise Truncated(f"datagram of {len(data)} bytes, need {HEADER_LEN}")
    (
        magic,
        version,
        packet_type,
        flow_id,
        seq,
        tx_timestamp_ns,
        responder_rx_ns,
        responder_tx_ns,
        frame_id,
        fragment_index,
        fragment_count,
    ) = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"version {version}")
    return ProbePacket(
        packet_type=packet_type,
        flow_id=flow_id,
        seq=seq,
        tx_timestamp_ns=tx_timestamp_ns,
        responder_rx_ns=responder_rx_ns,
        responder_tx_ns=responder_tx_ns,
        frame_id=frame_id,
        fragment_index=fragment_index,
        fragment_count=fragment_count,
    )


def make_echo_reply(request: ProbePacket, rx_ns: int, tx_ns: int) -> ProbePacket:
    """Build the reply for an echo request.

    seq, flow_id and the original tx timestamp are copied from the request so
    the requester can match and time the exchange; ``rx_ns``/``tx_ns`` are the
    responder's receive and send clocks.
    """
    if request.packet_type != TYPE_ECHO_REQUEST:
        raise NotEchoRequest(f"packet type {request.packet_type} is not an echo request")
    return ProbePacket(
        packet_type=TYPE_ECHO_REPLY,
        flow_id=request.flow_id,
        seq=request.seq,
        tx_timestamp_ns=request.tx_timestamp_ns,
        responder_rx_ns=rx_ns,
        responder_tx_ns=tx_ns,
        frame_id=request.frame_id,
        fragment_index=request.fragment_index,
        fragment_count=request.fragment_count,
    )


def rtt_ns(reply: ProbePacket, receive_ns: int) -> int:
    """Round trip time for an echo reply received at ``receive_ns``.

    Responder processing time is subtracted, so only network time remains.
    Requires only the requester's clock to be self-consistent.
    """
    return (receive_ns - reply.tx_timestamp_ns) - (reply.responder_tx_ns - reply.responder_rx_ns)
