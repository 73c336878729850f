import pytest
from hypothesis import given
from hypothesis import strategies as st

from sting import probes
from sting.probes import (
    BadMagic,
    BadVersion,
    NotEchoRequest,
    ProbePacket,
    SizeTooSmall,
    Truncated,
    decode,
    encode,
    make_echo_reply,
    rtt_ns,
)


def test_golden_header_zero_case():
    packet = ProbePacket(packet_type=probes.TYPE_DATA, flow_id=1, seq=0, tx_timestamp_ns=0)
    data = encode(packet, 48)
    assert len(data) == 48
    assert data[:8] == bytes([0x53, 0x54, 0x4E, 0x47, 0x01, 0x00, 0x00, 0x01])
    # all remaining numeric fields zero except fragment_count
    assert data[8:46] == bytes(38)
    assert data[46:48] == bytes([0x00, 0x01])


def test_golden_header_full_fields():
    packet = ProbePacket(
        packet_type=probes.TYPE_ECHO_REPLY,
        flow_id=0xBEEF,
        seq=0x0102030405060708,
        tx_timestamp_ns=1,
        responder_rx_ns=2,
        responder_tx_ns=3,
        frame_id=0xCAFE0001,
        fragment_index=4,
        fragment_count=9,
    )
    data = encode(packet, 48)
    assert data[4] == 1 and data[5] == 2
    assert data[6:8] == b"\xbe\xef"
    assert data[8:16] == bytes([1, 2, 3, 4, 5, 6, 7, 8])
    assert data[40:44] == b"\xca\xfe\x00\x01"
    assert data[44:46] == b"\x00\x04"
    assert data[46:48] == b"\x00\x09"


def test_padding_is_zero():
    packet = ProbePacket(packet_type=0, flow_id=7, seq=3, tx_timestamp_ns=5)
    data = encode(packet, 200)
    assert len(data) == 200
    assert data[48:] == bytes(152)


def test_encode_too_small():
    packet = ProbePacket(packet_type=0, flow_id=1, seq=0, tx_timestamp_ns=0)
    with pytest.raises(SizeTooSmall):
        encode(packet, 47)


def test_decode_bad_magic():
    packet = ProbePacket(packet_type=0, flow_id=1, seq=0, tx_timestamp_ns=0)
    data = bytearray(encode(packet, 48))
    data[0] = 0x54
    with pytest.raises(BadMagic):
        decode(bytes(data))


def test_decode_truncated():
    with pytest.raises(Truncated):
        decode(bytes(20))


def test_decode_bad_version():
    packet = ProbePacket(packet_type=0, flow_id=1, seq=0, tx_timestamp_ns=0)
    data = bytearray(encode(packet, 48))
    data[4] = 2
    with pytest.raises(BadVersion):
        decode(bytes(data))


def test_decode_ignores_padding():
    packet = ProbePacket(
        packet_type=probes.TYPE_ECHO_REQUEST,
        flow_id=9,
        seq=1234,
        tx_timestamp_ns=987654321,
        frame_id=17,
        fragment_index=2,
        fragment_count=3,
    )
    assert decode(encode(packet, 1500)) == packet


packet_strategy = st.builds(
    lambda ptype, flow, seq, ts, rrx, rtx, fid, fcount, fidx: ProbePacket(
        packet_type=ptype,
        flow_id=flow,
        seq=seq,
        tx_timestamp_ns=ts,
        responder_rx_ns=rrx,
        responder_tx_ns=rtx,
        frame_id=fid,
        fragment_index=min(fidx, fcount - 1),
        fragment_count=fcount,
    ),
    st.sampled_from([0, 1, 2]),
    st.integers(0, 2**16 - 1),
    st.integers(0, 2**64 - 1),
    st.integers(0, 2**64 - 1),
    st.integers(0, 2**64 - 1),
    st.integers(0, 2**64 - 1),
    st.integers(0, 2**32 - 1),
    st.integers(1, 2**16 - 1),
    st.integers(0, 2**16 - 1),
)


@given(packet_strategy, st.integers(48, 2000))
def test_roundtrip_property(packet, size):
    assert decode(encode(packet, size)) == packet


def test_echo_reply_copies_request_fields():
    request = ProbePacket(
        packet_type=probes.TYPE_ECHO_REQUEST, flow_id=3, seq=5, tx_timestamp_ns=100
    )
    reply = make_echo_reply(request, rx_ns=150, tx_ns=160)
    assert reply.packet_type == probes.TYPE_ECHO_REPLY
    assert reply.seq == 5
    assert reply.flow_id == 3
    assert reply.tx_timestamp_ns == 100
    assert reply.responder_rx_ns == 150
    assert reply.responder_tx_ns == 160


def test_rtt_subtracts_responder_time():
    request = ProbePacket(
        packet_type=probes.TYPE_ECHO_REQUEST, flow_id=3, seq=5, tx_timestamp_ns=100
    )
    reply = make_echo_reply(request, rx_ns=150, tx_ns=160)
    assert rtt_ns(reply, receive_ns=300) == 190


def test_echo_reply_rejects_data_packet():
    data = ProbePacket(packet_type=probes.TYPE_DATA, flow_id=1, seq=0, tx_timestamp_ns=0)
    with pytest.raises(NotEchoRequest):
        make_echo_reply(data, rx_ns=1, tx_ns=2)


def test_fragment_index_must_be_below_count():
    bad = ProbePacket(
        packet_type=0, flow_id=1, seq=0, tx_timestamp_ns=0, fragment_index=3, fragment_count=3
    )
    with pytest.raises(probes.ProbeError):
        encode(bad, 64)
