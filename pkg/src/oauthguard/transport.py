"""Client-side connection helpers with pluggable name resolution."""

from __future__ import annotations

import http.client
import socket
import ssl
from typing import Callable, Optional

Resolver = Callable[[str, int], tuple[str, int]]

HOP_BY_HOP = frozenset(
    {
        "connection",
        "keep-alive",
        "proxy-authenticate",
        "proxy-authorization",
        "proxy-connection",
        "te",
        "trailer",
        "transfer-encoding",
        "upgrade",
    }
)


def direct(host: str, port: int) -> tuple[str, int]:
    return host, port


class _HTTPConnection(http.client.HTTPConnection):
    def __init__(self, host, port, resolver: Resolver, timeout):
        super().__init__(host, port, timeout=timeout)
        self._resolver = resolver

    def connect(self):
        self.sock = socket.create_connection(self._resolver(self.host, self.port), self.timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


class _HTTPSConnection(http.client.HTTPSConnection):
    def __init__(self, host, port, resolver: Resolver, timeout, context):
        super().__init__(host, port, timeout=timeout, context=context)
        self._resolver = resolver
        self._ctx = context

    def connect(self):
        sock = socket.create_connection(self._resolver(self.host, self.port), self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            self.sock = self._ctx.wrap_socket(sock, server_hostname=self.host)
        except BaseException:
            sock.close()
            raise


def open_connection(
    scheme: str,
    host: str,
    port: int,
    *,
    resolver: Optional[Resolver] = None,
    context: Optional[ssl.SSLContext] = None,
    timeout: float = 10.0,
) -> http.client.HTTPConnection:
    resolver = resolver or direct
    if scheme == "https":
        return _HTTPSConnection(host, port, resolver, timeout, context or ssl.create_default_context())
    return _HTTPConnection(host, port, resolver, timeout)


def send_request(
    conn: http.client.HTTPConnection,
    method: str,
    target: str,
    headers,
    body: Optional[bytes] = None,
) -> http.client.HTTPResponse:
    """Send exactly the given headers, in order, without http.client additions."""
    conn.putrequest(method, target, skip_host=True, skip_accept_encoding=True)
    has_length = False
    for name, value in headers:
        if name.lower() == "content-length":
            has_length = True
            value = str(len(body or b""))
        conn.putheader(name, value)
    if body is not None and not has_length:
        conn.putheader("Content-Length", str(len(body)))
    conn.endheaders(body)
    return conn.getresponse()
