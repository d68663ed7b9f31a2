"""Loopback and TCP transports: framing across the stream, audit trail,
timeouts, and close semantics."""

import threading

import pytest

from vfseg.errors import TransportError
from vfseg.protocol import MsgType, encode_frame
from vfseg.transport import LoopbackPair, TcpListener, tcp_connect


def test_loopback_roundtrip_and_audit():
    pair = LoopbackPair(timeout=5.0)
    up = encode_frame(MsgType.ALIGN_REQUEST, b"ids")
    down = encode_frame(MsgType.ALIGN_RESPONSE, b"common")
    pair.bottom.send_frame(up)
    frame = pair.top.recv_frame()
    assert frame.msg_type == MsgType.ALIGN_REQUEST
    assert frame.payload == b"ids"
    pair.top.send_frame(down)
    frame = pair.bottom.recv_frame()
    assert frame.msg_type == MsgType.ALIGN_RESPONSE

    assert [(r.direction, r.msg_type) for r in pair.audit] == [
        ("bottom->top", MsgType.ALIGN_REQUEST),
        ("top->bottom", MsgType.ALIGN_RESPONSE),
    ]
    assert pair.audit[0].payload_len == 3
    assert pair.bottom.stats.frames_sent == 1
    assert pair.top.stats.bytes_received == len(up)


def test_loopback_timeout():
    pair = LoopbackPair(timeout=0.05)
    with pytest.raises(TransportError, match="timed out"):
        pair.top.recv_frame()


def test_loopback_close_unblocks_reader():
    pair = LoopbackPair(timeout=5.0)
    pair.bottom.close()
    with pytest.raises(TransportError, match="closed"):
        pair.top.recv_frame()
    with pytest.raises(TransportError):
        pair.bottom.send_frame(encode_frame(MsgType.SHUTDOWN, b""))


def test_loopback_send_must_be_one_frame():
    pair = LoopbackPair(timeout=1.0)
    frame = encode_frame(MsgType.HELLO, b"x")
    with pytest.raises(TransportError):
        pair.bottom.send_frame(frame + frame)
    with pytest.raises(TransportError):
        pair.bottom.send_frame(frame[:-1])


def test_tcp_roundtrip_across_threads():
    listener = TcpListener("127.0.0.1", 0)
    got = {}

    def serve():
        server = listener.accept(timeout=10.0)
        got["frame"] = server.recv_frame()
        server.send_frame(encode_frame(MsgType.SHUTDOWN, b"bye"))
        server.close()

    thread = threading.Thread(target=serve)
    thread.start()
    client = tcp_connect("127.0.0.1", listener.port, timeout=10.0)
    payload = bytes(range(256)) * 1024  # big enough to span recv chunks
    client.send_frame(encode_frame(MsgType.BATCH_ACTIVATIONS, payload))
    reply = client.recv_frame()
    thread.join(timeout=10.0)
    listener.close()
    client.close()

    assert got["frame"].msg_type == MsgType.BATCH_ACTIVATIONS
    assert got["frame"].payload == payload
    assert reply.payload == b"bye"


def test_tcp_receive_timeout():
    listener = TcpListener("127.0.0.1", 0)
    done = threading.Event()

    def serve():
        server = listener.accept(timeout=10.0)
        done.wait(timeout=10.0)  # keep the silent connection open
        server.close()

    thread = threading.Thread(target=serve)
    thread.start()
    client = tcp_connect("127.0.0.1", listener.port, timeout=0.1)
    with pytest.raises(TransportError, match="timed out"):
        client.recv_frame()
    done.set()
    client.close()
    thread.join(timeout=10.0)
    listener.close()


def test_tcp_peer_close_raises():
    listener = TcpListener("127.0.0.1", 0)

    def serve():
        server = listener.accept(timeout=10.0)
        server.close()

    thread = threading.Thread(target=serve)
    thread.start()
    client = tcp_connect("127.0.0.1", listener.port, timeout=10.0)
    thread.join(timeout=10.0)
    with pytest.raises(TransportError):
        client.recv_frame()
    client.close()
    listener.close()


def test_tcp_connect_gives_up():
    with pytest.raises(TransportError, match="could not connect"):
        tcp_connect("127.0.0.1", 1, timeout=1.0, attempts=2, retry_delay=0.01)
