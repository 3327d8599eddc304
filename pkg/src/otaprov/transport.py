"""Framing and connections: TCP sockets for real services, an in-process
link for harnesses.

Frames are length-prefixed (4-byte big-endian) and the flows are strict
request/reply, so a connection exposes one ``roundtrip`` call.  The
in-process link accepts an interceptor, the hook point where the
adversary harness tampers with frames and the fault sweep cuts power.
"""

from __future__ import annotations

import socket
import struct
import threading

from .errors import LinkTimeout, PowerLost
from .messages import Frame

MAX_FRAME = 1 << 20
_LEN = struct.Struct(">I")


def send_frame(sock: socket.socket, frame: Frame):
    payload = frame.encode()
    sock.sendall(_LEN.pack(len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        part = sock.recv(n - got)
        if not part:
            raise ConnectionError("peer closed the connection")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> Frame:
    (length,) = _LEN.unpack(_recv_exact(sock, 4))
    if length > MAX_FRAME:
        raise ConnectionError(f"oversized frame of {length} bytes")
    return Frame.decode(_recv_exact(sock, length))


class SocketConn:
    def __init__(self, sock: socket.socket):
        self._sock = sock

    def roundtrip(self, frame: Frame) -> Frame:
        try:
            send_frame(self._sock, frame)
            return recv_frame(self._sock)
        except (socket.timeout, TimeoutError):
            raise LinkTimeout("no reply from peer") from None

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SocketLink:
    """Device-side connector to a TCP service."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.host = host
        self.port = port
        self.timeout = timeout

    def connect(self) -> SocketConn:
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        return SocketConn(sock)


class LocalConn:
    """Direct connection to an in-process frame handler.

    The interceptor sees every frame in both directions with a global
    index and may rewrite it, drop it (raise LinkTimeout) or kill the
    device (raise PowerLost).
    """

    def __init__(self, core, conn_id, interceptor=None, plan=None):
        self._core = core
        self._conn_id = conn_id
        self._interceptor = interceptor
        self._plan = plan

    def _pass(self, direction: str, frame: Frame) -> Frame:
        if self._plan is not None:
            self._plan.frame_event(f"{direction}:{frame.msg_type.name}")
        if self._interceptor is not None:
            frame = self._interceptor(direction, frame)
        return frame

    def roundtrip(self, frame: Frame) -> Frame:
        frame = self._pass("to_peer", frame)
        reply = self._core.handle_frame(self._conn_id, frame)
        return self._pass("to_device", reply)

    def close(self):
        self._core.close_conn(self._conn_id)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LocalLink:
    def __init__(self, core, interceptor=None, plan=None):
        self.core = core
        self.interceptor = interceptor
        self.plan = plan

    def connect(self) -> LocalConn:
        return LocalConn(self.core, self.core.open_conn(), self.interceptor, self.plan)


class FrameServer:
    """Threaded TCP server delegating frames to a handler core.

    The core must provide open_conn() -> id, handle_frame(id, Frame) ->
    Frame and close_conn(id).
    """

    def __init__(self, core, host: str, port: int):
        self.core = core
        self._sock = socket.create_server((host, port))
        self.host, self.port = self._sock.getsockname()[:2]
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread: threading.Thread | None = None

    def _serve_conn(self, sock: socket.socket):
        conn_id = self.core.open_conn()
        try:
            while not self._stop.is_set():
                try:
                    frame = recv_frame(sock)
                except (ConnectionError, OSError):
                    break
                reply = self.core.handle_frame(conn_id, frame)
                try:
                    send_frame(sock, reply)
                except OSError:
                    break
        finally:
            self.core.close_conn(conn_id)
            sock.close()

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                sock, _ = self._sock.accept()
            except OSError:
                break
            t = threading.Thread(target=self._serve_conn, args=(sock,), daemon=True)
            t.start()
            self._threads.append(t)

    def start(self):
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def stop(self):
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        for t in self._threads:
            t.join(timeout=1.0)
        shutdown = getattr(self.core, "shutdown", None)
        if shutdown is not None:
            shutdown()

    def serve_forever(self):
        self.start()
        try:
            self._accept_thread.join()
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()


__all__ = [
    "Frame", "FrameServer", "LinkTimeout", "LocalConn", "LocalLink",
    "PowerLost", "SocketConn", "SocketLink", "recv_frame", "send_frame",
]
