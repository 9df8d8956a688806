"""Tests for the shadow TCP/UDP flow engine."""

import ipaddress
import random

import pytest

from src.flow_engine import (
    CLOSED_LINGER,
    Classification,
    CloseSocket,
    DivertToProxy,
    Drop,
    DropReason,
    FlowEngine,
    FlowGone,
    MirrorToAnalyzer,
    OpenSocket,
    ReleaseFlow,
    SocketErrorKind,
    StreamVerdict,
    TcpPhase,
    WriteProxy,
    WriteSocket,
    WriteTun,
    seq_add,
    seq_diff,
)
from src.packet_codec import (
    PROTO_TCP,
    PROTO_UDP,
    FlowKey,
    TcpFlags,
    build_mss_option,
    make_tcp,
    make_udp,
    mss_option_value,
)

APP = ipaddress.ip_address("10.7.0.2")
REMOTE = ipaddress.ip_address("198.51.100.7")
APP_ISN = 1_000_000
KEY = FlowKey(PROTO_TCP, APP, 40000, REMOTE, 443)


def of_type(actions, cls):
    return [a for a in actions if isinstance(a, cls)]


def app_segment(seq, ack, flags=TcpFlags.ACK, payload=b"", window=0xFFFF):
    return make_tcp(APP, 40000, REMOTE, 443, seq, ack, flags, payload=payload, window=window)


def established(engine=None):
    """Run the three-way handshake; returns (engine, gateway ISN)."""
    engine = engine if engine is not None else FlowEngine(rng=random.Random(7))
    actions = engine.on_tun_packet(app_segment(APP_ISN, 0, TcpFlags.SYN), now=0.0)
    assert actions == [OpenSocket(KEY, 1)]
    engine.attach_socket(KEY, "sock")
    synack = engine.on_socket_connected(KEY)[0].packet
    isn = synack.seq
    engine.on_tun_packet(app_segment(APP_ISN + 1, seq_add(isn, 1)), now=0.0)
    return engine, isn


# ---------------------------------------------------------------------------
# Sequence arithmetic
# ---------------------------------------------------------------------------


def test_seq_arithmetic_wraps():
    assert seq_add(0xFFFFFFFF, 2) == 1
    assert seq_diff(1, 0xFFFFFFFF) == 2
    assert seq_diff(0xFFFFFFFF, 1) == -2


# ---------------------------------------------------------------------------
# Handshake
# ---------------------------------------------------------------------------


def test_syn_opens_socket_and_synack_waits_for_connect():
    engine = FlowEngine(rng=random.Random(1))
    syn = make_tcp(
        APP, 40000, REMOTE, 443, APP_ISN, 0, TcpFlags.SYN, options=build_mss_option(1200)
    )

    assert engine.on_tun_packet(syn, now=0.0) == [OpenSocket(KEY, 1)]
    assert engine.get(KEY).tcp.phase is TcpPhase.SYN_RECEIVED

    engine.attach_socket(KEY, "sock")
    assert engine.get(KEY).tcp.phase is TcpPhase.CONNECTING

    [write] = engine.on_socket_connected(KEY)
    synack = write.packet
    assert synack.has(TcpFlags.SYN) and synack.has(TcpFlags.ACK)
    assert synack.ack == APP_ISN + 1
    assert (synack.src_addr, synack.dst_addr) == (REMOTE, APP)
    # clamped to the app's own MSS option
    assert mss_option_value(synack.options) == 1200
    assert engine.get(KEY).tcp.phase is TcpPhase.ESTABLISHED


def test_segments_before_connect_are_dropped():
    engine = FlowEngine(rng=random.Random(1))
    engine.on_tun_packet(app_segment(APP_ISN, 0, TcpFlags.SYN), now=0.0)
    engine.attach_socket(KEY, "sock")
    actions = engine.on_tun_packet(app_segment(APP_ISN + 1, 0, payload=b"early"), now=0.0)
    assert actions == [Drop(DropReason.OUT_OF_WINDOW, KEY)]


def test_retransmitted_syn_repeats_synack():
    engine = FlowEngine(rng=random.Random(1))
    engine.on_tun_packet(app_segment(APP_ISN, 0, TcpFlags.SYN), now=0.0)
    engine.attach_socket(KEY, "sock")
    first = engine.on_socket_connected(KEY)[0].packet

    [again] = engine.on_tun_packet(app_segment(APP_ISN, 0, TcpFlags.SYN), now=0.1)
    assert isinstance(again, WriteTun)
    assert again.packet.seq == first.seq
    assert again.packet.has(TcpFlags.SYN)


def test_non_syn_for_unknown_flow_gets_rst():
    engine = FlowEngine()
    actions = engine.on_tun_packet(app_segment(5, 77, payload=b"x"), now=0.0)
    [rst] = of_type(actions, WriteTun)
    assert rst.packet.has(TcpFlags.RST)
    assert rst.packet.seq == 77
    assert Drop(DropReason.UNKNOWN_FLOW, KEY) in actions


def test_table_full_refuses_with_rst():
    engine = FlowEngine(max_flows=1)
    engine.on_tun_packet(make_udp(APP, 5000, REMOTE, 9, b"x"), now=0.0)
    actions = engine.on_tun_packet(app_segment(APP_ISN, 0, TcpFlags.SYN), now=0.0)
    assert Drop(DropReason.TABLE_FULL, KEY) in actions
    assert of_type(actions, WriteTun)[0].packet.has(TcpFlags.RST)
    assert KEY not in engine


# ---------------------------------------------------------------------------
# App -> remote
# ---------------------------------------------------------------------------


def test_pure_acks_never_reach_the_socket():
    engine, isn = established()
    actions = []
    for _ in range(50):
        actions += engine.on_tun_packet(app_segment(APP_ISN + 1, seq_add(isn, 1)), now=1.0)
    assert not of_type(actions, WriteSocket)
    assert all(a == Drop(DropReason.PURE_ACK, KEY) for a in actions)


def test_in_order_data_is_written_mirrored_and_acked():
    engine, isn = established()
    actions = engine.on_tun_packet(
        app_segment(APP_ISN + 1, seq_add(isn, 1), TcpFlags.PSH | TcpFlags.ACK, b"GET /"), now=1.0
    )
    assert WriteSocket(KEY, b"GET /") in actions
    [mirror] = of_type(actions, MirrorToAnalyzer)
    assert mirror.data == b"GET /"
    [ack] = of_type(actions, WriteTun)
    assert ack.packet.ack == APP_ISN + 1 + 5
    assert engine.get(KEY).bytes_up == 5


def test_retransmission_is_dropped_and_reacked():
    engine, isn = established()
    seg = app_segment(APP_ISN + 1, seq_add(isn, 1), payload=b"abc")
    engine.on_tun_packet(seg, now=1.0)
    actions = engine.on_tun_packet(seg, now=1.1)
    assert Drop(DropReason.RETRANSMIT, KEY) in actions
    assert not of_type(actions, WriteSocket)
    assert of_type(actions, WriteTun)[0].packet.ack == APP_ISN + 4


def test_partial_overlap_delivers_only_new_bytes():
    engine, isn = established()
    engine.on_tun_packet(app_segment(APP_ISN + 1, seq_add(isn, 1), payload=b"abc"), now=1.0)
    actions = engine.on_tun_packet(
        app_segment(APP_ISN + 2, seq_add(isn, 1), payload=b"bcdef"), now=1.1
    )
    assert of_type(actions, WriteSocket) == [WriteSocket(KEY, b"def")]


def test_out_of_order_segment_waits_for_the_gap():
    engine, isn = established()
    ack = seq_add(isn, 1)
    later = engine.on_tun_packet(app_segment(APP_ISN + 4, ack, payload=b"def"), now=1.0)
    assert not of_type(later, WriteSocket)
    assert of_type(later, WriteTun)[0].packet.ack == APP_ISN + 1

    filled = engine.on_tun_packet(app_segment(APP_ISN + 1, ack, payload=b"abc"), now=1.1)
    assert of_type(filled, WriteSocket) == [WriteSocket(KEY, b"abcdef")]


def test_random_segmentation_reordering_and_duplicates_preserve_stream():
    rng = random.Random(2024)
    for trial in range(100):
        engine, isn = established(FlowEngine(rng=random.Random(trial)))
        payload = rng.randbytes(rng.randint(1, 64 * 1024))
        segments = []
        pos = 0
        while pos < len(payload):
            size = rng.randint(1, 1460)
            segments.append((pos, payload[pos : pos + size]))
            pos += size
        # local reordering within windows of four, plus some duplicates
        shuffled = []
        for i in range(0, len(segments), 4):
            window = segments[i : i + 4]
            rng.shuffle(window)
            shuffled.extend(window)
        shuffled += rng.sample(segments, k=min(3, len(segments)))
        written = []
        for offset, chunk in shuffled:
            seg = app_segment(APP_ISN + 1 + offset, seq_add(isn, 1), payload=chunk)
            written += [a.data for a in of_type(engine.on_tun_packet(seg, now=1.0), WriteSocket)]
        assert b"".join(written) == payload


def test_one_megabyte_upload_in_order():
    engine, isn = established()
    payload = random.Random(5).randbytes(1024 * 1024)
    written = []
    for offset in range(0, len(payload), 1460):
        chunk = payload[offset : offset + 1460]
        seg = app_segment(APP_ISN + 1 + offset, seq_add(isn, 1), payload=chunk)
        written += [a.data for a in of_type(engine.on_tun_packet(seg, now=1.0), WriteSocket)]
    assert b"".join(written) == payload


# ---------------------------------------------------------------------------
# Remote -> app
# ---------------------------------------------------------------------------


def test_socket_data_is_split_at_mss():
    engine, isn = established()
    data = bytes(range(256)) * 20
    actions = engine.on_socket_data(KEY, data, now=2.0)
    packets = [a.packet for a in of_type(actions, WriteTun)]
    mss = engine.get(KEY).tcp.mss

    assert all(len(p.payload) <= mss for p in packets)
    assert b"".join(p.payload for p in packets) == data
    assert packets[0].seq == seq_add(isn, 1)
    assert packets[1].seq == seq_add(isn, 1 + mss)
    assert packets[-1].has(TcpFlags.PSH)
    assert not packets[0].has(TcpFlags.PSH)
    [mirror] = of_type(actions, MirrorToAnalyzer)
    assert mirror.data == data


def test_send_capacity_tracks_app_window_and_acks():
    engine, isn = established()
    assert engine.send_capacity(KEY) == 0xFFFF
    engine.on_socket_data(KEY, b"x" * 3000, now=2.0)
    assert engine.send_capacity(KEY) == 0xFFFF - 3000

    # a pure ACK still updates what the app has acknowledged
    engine.on_tun_packet(app_segment(APP_ISN + 1, seq_add(isn, 1 + 3000)), now=2.1)
    assert engine.send_capacity(KEY) == 0xFFFF

    engine.on_tun_packet(
        app_segment(APP_ISN + 1, seq_add(isn, 1 + 3000), window=1000), now=2.2
    )
    assert engine.send_capacity(KEY) == 1000


def test_send_capacity_is_zero_before_establishment():
    engine = FlowEngine()
    engine.on_tun_packet(app_segment(APP_ISN, 0, TcpFlags.SYN), now=0.0)
    assert engine.send_capacity(KEY) == 0


def test_socket_data_for_unknown_flow_raises():
    with pytest.raises(FlowGone):
        FlowEngine().on_socket_data(KEY, b"late")


# ---------------------------------------------------------------------------
# Teardown
# ---------------------------------------------------------------------------


def test_app_fin_then_remote_eof_closes_and_lingers():
    engine, isn = established()
    fin = app_segment(APP_ISN + 1, seq_add(isn, 1), TcpFlags.FIN | TcpFlags.ACK)
    actions = engine.on_tun_packet(fin, now=3.0)
    assert CloseSocket(KEY, half_close=True) in actions
    assert of_type(actions, WriteTun)[-1].packet.ack == APP_ISN + 2
    assert engine.get(KEY).tcp.phase is TcpPhase.APP_FIN_SENT

    eof = engine.on_socket_data(KEY, b"", now=3.5)
    assert of_type(eof, WriteTun)[0].packet.has(TcpFlags.FIN)
    assert CloseSocket(KEY) in eof
    assert engine.get(KEY).tcp.phase is TcpPhase.CLOSED

    # still answering late segments while lingering
    assert engine.gc(3.5 + CLOSED_LINGER / 2) == []
    [release] = engine.gc(3.5 + CLOSED_LINGER + 0.1)
    assert isinstance(release, ReleaseFlow)
    assert KEY not in engine


def test_remote_eof_first_then_app_fin():
    engine, isn = established()
    engine.on_socket_data(KEY, b"", now=3.0)
    assert engine.get(KEY).tcp.phase is TcpPhase.REMOTE_CLOSED
    fin = app_segment(APP_ISN + 1, seq_add(isn, 2), TcpFlags.FIN | TcpFlags.ACK)
    actions = engine.on_tun_packet(fin, now=3.1)
    assert CloseSocket(KEY, half_close=False) in actions
    assert engine.get(KEY).tcp.phase is TcpPhase.CLOSED


def test_app_rst_closes_without_reply():
    engine, isn = established()
    actions = engine.on_tun_packet(app_segment(APP_ISN + 1, 0, TcpFlags.RST), now=4.0)
    assert actions == [CloseSocket(KEY)]
    assert engine.get(KEY).tcp.phase is TcpPhase.CLOSED


def test_refused_connect_resets_the_app():
    engine = FlowEngine()
    engine.on_tun_packet(app_segment(APP_ISN, 0, TcpFlags.SYN), now=0.0)
    engine.attach_socket(KEY, "sock")
    actions = engine.on_socket_error(KEY, SocketErrorKind.REFUSED, now=0.5)
    [rst] = of_type(actions, WriteTun)
    assert rst.packet.has(TcpFlags.RST)
    assert rst.packet.ack == APP_ISN + 1
    assert CloseSocket(KEY) in actions


def test_shutdown_resets_every_live_flow():
    engine, _ = established()
    actions = engine.shutdown()
    assert of_type(actions, WriteTun)[0].packet.has(TcpFlags.RST)
    assert CloseSocket(KEY) in actions
    assert of_type(actions, ReleaseFlow)[0].flow_id == 1
    assert len(engine) == 0


def test_idle_tcp_flow_expires():
    engine, _ = established(FlowEngine(tcp_idle_ttl=5.0, rng=random.Random(3)))
    assert engine.gc(4.0) == []
    actions = engine.gc(10.0)
    assert CloseSocket(KEY) in actions
    assert of_type(actions, ReleaseFlow)


# ---------------------------------------------------------------------------
# UDP
# ---------------------------------------------------------------------------


def test_udp_mapping_and_reply():
    engine = FlowEngine()
    key = FlowKey(PROTO_UDP, APP, 5353, REMOTE, 53)
    actions = engine.on_tun_packet(make_udp(APP, 5353, REMOTE, 53, b"query"), now=0.0)
    assert actions[0] == OpenSocket(key, 1)
    assert WriteSocket(key, b"query") in actions

    # a second datagram reuses the mapping
    again = engine.on_tun_packet(make_udp(APP, 5353, REMOTE, 53, b"query2"), now=0.1)
    assert not of_type(again, OpenSocket)

    reply = engine.on_socket_data(key, b"answer", now=0.2)
    [write] = of_type(reply, WriteTun)
    assert write.packet.is_udp
    assert (write.packet.src_port, write.packet.dst_port) == (53, 5353)
    assert write.packet.payload == b"answer"


def test_dns_mapping_expires_sooner_than_other_udp():
    engine = FlowEngine(dns_idle_ttl=10.0, udp_idle_ttl=60.0)
    engine.on_tun_packet(make_udp(APP, 5353, REMOTE, 53, b"q"), now=0.0)
    engine.on_tun_packet(make_udp(APP, 6000, REMOTE, 9000, b"d"), now=0.0)
    released = of_type(engine.gc(11.0), ReleaseFlow)
    assert [r.key.remote_port for r in released] == [53]
    assert len(engine) == 1


# ---------------------------------------------------------------------------
# Stream classification
# ---------------------------------------------------------------------------


def test_classifier_holds_bytes_then_diverts():
    seen = []

    def classify(key, data):
        seen.append(data)
        if len(data) < 6:
            return Classification(StreamVerdict.NEED_MORE)
        return Classification(StreamVerdict.DIVERT, meta="hello")

    engine, isn = established(FlowEngine(classifier=classify, rng=random.Random(9)))
    ack = seq_add(isn, 1)
    first = engine.on_tun_packet(app_segment(APP_ISN + 1, ack, payload=b"\x16\x03"), now=1.0)
    assert not of_type(first, WriteSocket)

    second = engine.on_tun_packet(app_segment(APP_ISN + 3, ack, payload=b"\x01rest"), now=1.0)
    assert of_type(second, DivertToProxy) == [DivertToProxy(KEY, "hello", b"\x16\x03\x01rest")]
    assert not of_type(second, MirrorToAnalyzer)

    third = engine.on_tun_packet(app_segment(APP_ISN + 8, ack, payload=b"more"), now=1.0)
    assert of_type(third, WriteProxy) == [WriteProxy(KEY, b"more")]
    assert seen == [b"\x16\x03", b"\x16\x03\x01rest"]


def test_stream_ending_before_classification_is_flushed():
    def classify(key, data):
        return Classification(StreamVerdict.NEED_MORE)

    engine, isn = established(FlowEngine(classifier=classify, rng=random.Random(9)))
    ack = seq_add(isn, 1)
    engine.on_tun_packet(app_segment(APP_ISN + 1, ack, payload=b"hi"), now=1.0)
    actions = engine.on_tun_packet(
        app_segment(APP_ISN + 3, ack, TcpFlags.FIN | TcpFlags.ACK), now=1.1
    )
    assert WriteSocket(KEY, b"hi") in actions
    assert CloseSocket(KEY, half_close=True) in actions
