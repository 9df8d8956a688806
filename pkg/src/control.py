"""Local control socket: length-prefixed JSON between the CLI and the daemon."""

import json
import logging
import os
import socket
import socketserver
import struct
import threading
from pathlib import Path
from typing import Any, Callable, Dict, Optional

logger = logging.getLogger("flowtap.control")

_LENGTH = struct.Struct("!I")
MAX_MESSAGE = 1 << 20

Handler = Callable[[Dict[str, Any]], Any]


class ControlError(RuntimeError):
    """The daemon rejected a command or the exchange broke down."""


class DaemonUnreachable(ControlError):
    """Nothing is listening on the control socket."""


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ControlError("control connection closed mid-message")
        buf += chunk
    return buf


def send_message(sock: socket.socket, payload: Dict[str, Any]) -> None:
    """Write one length-prefixed JSON message.

    Args:
        sock: Connected stream socket
        payload: JSON-serialisable object; non-JSON values go through str()

    Raises:
        ControlError: The encoded message is larger than ``MAX_MESSAGE``
    """
    data = json.dumps(payload, default=str).encode("utf-8")
    if len(data) > MAX_MESSAGE:
        raise ControlError(f"message of {len(data)} bytes exceeds {MAX_MESSAGE}")
    sock.sendall(_LENGTH.pack(len(data)) + data)


def recv_message(sock: socket.socket) -> Dict[str, Any]:
    """Read one length-prefixed JSON message.

    Args:
        sock: Connected stream socket

    Returns:
        The decoded JSON object

    Raises:
        ControlError: Oversize, truncated, malformed or non-object message
    """
    (length,) = _LENGTH.unpack(_recv_exact(sock, _LENGTH.size))
    if length > MAX_MESSAGE:
        raise ControlError(f"message of {length} bytes exceeds {MAX_MESSAGE}")
    try:
        message = json.loads(_recv_exact(sock, length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ControlError(f"malformed control message: {e}") from e
    if not isinstance(message, dict):
        raise ControlError("control message must be a JSON object")
    return message


class _RequestHandler(socketserver.BaseRequestHandler):
    server: "_UnixServer"

    def handle(self) -> None:
        try:
            request = recv_message(self.request)
        except ControlError as e:
            logger.warning(f"Bad control request: {e}")
            return
        command = request.get("command")
        args = request.get("args") or {}
        handler = self.server.handlers.get(command)
        if handler is None:
            reply = {"ok": False, "error": f"unknown command {command!r}"}
        else:
            try:
                reply = {"ok": True, "result": handler(args)}
            except (ValueError, ControlError) as e:
                reply = {"ok": False, "error": str(e)}
            except Exception as e:
                logger.exception(f"Control command {command} failed: {e}")
                reply = {"ok": False, "error": f"internal error: {e}"}
        try:
            send_message(self.request, reply)
        except OSError as e:
            logger.debug(f"Control reply not delivered: {e}")


class _UnixServer(socketserver.UnixStreamServer):
    handlers: Dict[str, Handler]


class ControlServer:
    """Serves registered command handlers, one connection at a time."""

    def __init__(self, path: str, handlers: Optional[Dict[str, Handler]] = None):
        self.path = Path(path).expanduser()
        self.handlers: Dict[str, Handler] = dict(handlers or {})
        self._server: Optional[_UnixServer] = None
        self._thread: Optional[threading.Thread] = None

    def register(self, command: str, handler: Handler) -> None:
        self.handlers[command] = handler

    def start(self) -> "ControlServer":
        """Bind the socket (mode 0600) and serve from a daemon thread.

        A stale socket file left by a dead daemon is removed first.

        Returns:
            self

        Raises:
            ControlError: Another daemon is listening on the same path
        """
        if self.path.exists():
            if _is_listening(self.path):
                raise ControlError(f"another daemon is listening on {self.path}")
            self.path.unlink()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._server = _UnixServer(str(self.path), _RequestHandler)
        self._server.handlers = self.handlers
        os.chmod(self.path, 0o600)
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="control", daemon=True
        )
        self._thread.start()
        logger.info(f"Control socket listening on {self.path}")
        return self

    def stop(self) -> None:
        if self._server is None:
            return
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(2.0)
        self._server = None
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass

    def __enter__(self) -> "ControlServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def _is_listening(path: Path) -> bool:
    with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as s:
        try:
            s.connect(str(path))
            return True
        except OSError:
            return False


class ControlClient:
    """One connection per call to a running daemon's control socket."""

    def __init__(self, path: str, timeout: float = 5.0):
        self.path = str(Path(path).expanduser())
        self.timeout = timeout

    def call(self, command: str, **args: Any) -> Any:
        """Send one command and wait for the reply.

        Args:
            command: Registered command name, e.g. ``status`` or ``mode``
            **args: Command arguments, sent as the ``args`` object

        Returns:
            The handler's result

        Raises:
            DaemonUnreachable: Nothing is listening on the socket
            ControlError: The daemon rejected the command or the exchange failed
        """
        with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as s:
            s.settimeout(self.timeout)
            try:
                s.connect(self.path)
            except OSError as e:
                raise DaemonUnreachable(f"no daemon at {self.path}: {e}") from e
            try:
                send_message(s, {"command": command, "args": args})
                reply = recv_message(s)
            except OSError as e:
                raise ControlError(f"control exchange failed: {e}") from e
        if not reply.get("ok"):
            raise ControlError(reply.get("error") or "command failed")
        return reply.get("result")
