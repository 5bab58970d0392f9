"""Frame transports: an in-process loopback and a TCP stream socket."""
from __future__ import annotations

import socket
import socketserver
import threading

from .messages import WireError, read_frame
from .server import CloudServer


class InProcessTransport:
    """Hands frames straight to a server. ``transcript`` keeps every (request, reply) frame pair."""

    def __init__(self, server: CloudServer, record: bool = False):
        self.server = server
        self.transcript: list[tuple[bytes, bytes]] | None = [] if record else None

    def request(self, frame: bytes) -> bytes:
        reply = self.server.handle_frame(frame)
        if self.transcript is not None:
            self.transcript.append((frame, reply))
        return reply

    def close(self) -> None:
        pass


class _FrameHandler(socketserver.StreamRequestHandler):
    def handle(self):
        cloud: CloudServer = self.server.cloud
        while True:
            try:
                frame = read_frame(self.rfile)
            except WireError:
                return              # unusable stream; drop the connection
            if frame is None:
                return
            self.wfile.write(cloud.handle_frame(frame))
            self.wfile.flush()


class TcpServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, cloud: CloudServer, address: tuple[str, int]):
        self.cloud = cloud
        super().__init__(address, _FrameHandler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="privface-serve", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def serve(cloud: CloudServer, host: str = "127.0.0.1", port: int = 0) -> TcpServer:
    """Start a background TCP server; port 0 picks a free port (see ``.address``)."""
    srv = TcpServer(cloud, (host, port))
    srv.start()
    return srv


class SocketTransport:
    """Client end of a TCP connection; one request in flight at a time."""

    def __init__(self, host: str, port: int, timeout: float | None = 60.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._rfile = self.sock.makefile("rb")
        self._lock = threading.Lock()
        self.transcript: list[tuple[bytes, bytes]] | None = None

    def request(self, frame: bytes) -> bytes:
        with self._lock:
            self.sock.sendall(frame)
            reply = read_frame(self._rfile)
        if reply is None:
            raise ConnectionError("server closed the connection")
        if self.transcript is not None:
            self.transcript.append((frame, reply))
        return reply

    def close(self) -> None:
        self._rfile.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)
