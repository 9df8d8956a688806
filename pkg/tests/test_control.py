"""Tests for the local control socket."""

import logging
import socket
import struct

import pytest

from src.control import (
    MAX_MESSAGE,
    ControlClient,
    ControlError,
    ControlServer,
    DaemonUnreachable,
    recv_message,
    send_message,
)


@pytest.fixture
def server(tmp_path):
    handlers = {
        "status": lambda args: {"flows": 3},
        "echo": lambda args: args,
        "reject": lambda args: (_ for _ in ()).throw(ValueError("bad rate")),
        "crash": lambda args: 1 / 0,
    }
    with ControlServer(str(tmp_path / "ctl.sock"), handlers) as srv:
        yield srv


def client(srv):
    return ControlClient(str(srv.path), timeout=2.0)


def test_round_trip(server):
    assert client(server).call("status") == {"flows": 3}
    assert client(server).call("echo", rate=0.5, mode="lowpower") == {
        "rate": 0.5,
        "mode": "lowpower",
    }


def test_socket_is_private(server):
    assert server.path.stat().st_mode & 0o777 == 0o600


def test_malformed_request_is_logged_and_server_keeps_serving(server, caplog):
    with caplog.at_level(logging.WARNING, logger="flowtap.control"):
        with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as s:
            s.connect(str(server.path))
            s.sendall(struct.pack("!I", 5) + b"{nope")
        # connections are served one at a time, so this reply orders after the warning
        assert client(server).call("status") == {"flows": 3}
    assert "Bad control request: malformed control message" in caplog.text


def test_handler_errors_come_back_as_control_errors(server):
    with pytest.raises(ControlError, match="bad rate"):
        client(server).call("reject")
    with pytest.raises(ControlError, match="internal error"):
        client(server).call("crash")
    with pytest.raises(ControlError, match="unknown command"):
        client(server).call("reboot")
    # the server keeps serving afterwards
    assert client(server).call("status") == {"flows": 3}


def test_registered_later(server):
    server.register("ping", lambda args: "pong")
    assert client(server).call("ping") == "pong"


def test_unreachable_daemon(tmp_path):
    with pytest.raises(DaemonUnreachable):
        ControlClient(str(tmp_path / "nobody.sock"), timeout=0.5).call("status")


def test_second_server_refused_while_first_listens(server):
    with pytest.raises(ControlError, match="another daemon"):
        ControlServer(str(server.path)).start()


def test_stale_socket_file_is_replaced(tmp_path):
    path = tmp_path / "stale.sock"
    stale = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    stale.bind(str(path))
    stale.close()
    with ControlServer(str(path), {"status": lambda args: "up"}) as srv:
        assert client(srv).call("status") == "up"
    assert not path.exists()


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------


def test_framing_over_socketpair():
    a, b = socket.socketpair()
    with a, b:
        send_message(a, {"command": "status"})
        assert recv_message(b) == {"command": "status"}


def test_oversized_length_refused():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(struct.pack("!I", MAX_MESSAGE + 1))
        with pytest.raises(ControlError, match="exceeds"):
            recv_message(b)


def test_non_object_and_truncated_messages():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(struct.pack("!I", 2) + b"[]")
        with pytest.raises(ControlError, match="JSON object"):
            recv_message(b)
        a.sendall(struct.pack("!I", 10) + b"{}")
        a.shutdown(socket.SHUT_WR)
        with pytest.raises(ControlError, match="closed mid-message"):
            recv_message(b)
