"""Loopback network for the simulated IdP, RPs and third parties.

Harness hosts use the reserved ``.test`` suffix and are never resolved via
DNS: ``Network.resolve`` maps ``(host, port)`` to a loopback listener, and
raises ``ConnectionRefusedError`` for anything unregistered.
"""

from __future__ import annotations

import itertools
import json
import logging
import socket
import ssl
import threading
from dataclasses import dataclass, field
from http.cookies import SimpleCookie
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional
from urllib.parse import parse_qsl, urlencode, urlsplit

from ..capture.tls import CertificateAuthority
from ..http_model import Headers
from ..transport import open_connection, send_request

log = logging.getLogger(__name__)


@dataclass
class Request:
    method: str
    scheme: str
    host: str
    path: str
    query: dict
    headers: Headers
    body: bytes = b""

    @property
    def form(self) -> dict:
        ctype = (self.headers.get("Content-Type") or "").split(";")[0].strip()
        if ctype == "application/json":
            try:
                doc = json.loads(self.body or b"{}")
            except ValueError:
                return {}
            return {k: v for k, v in doc.items() if isinstance(v, str)} if isinstance(doc, dict) else {}
        return dict(parse_qsl(self.body.decode("utf-8", "replace"), keep_blank_values=True))

    @property
    def params(self) -> dict:
        merged = dict(self.form)
        merged.update(self.query)
        return merged

    @property
    def cookies(self) -> dict:
        jar = SimpleCookie()
        try:
            jar.load(self.headers.get("Cookie") or "")
        except Exception:
            return {}
        return {k: m.value for k, m in jar.items()}

    @property
    def origin(self) -> str:
        return f"{self.scheme}://{self.host}"

    @property
    def url(self) -> str:
        return f"{self.origin}{self.path}"


@dataclass
class Response:
    status: int = 200
    headers: list = field(default_factory=list)
    body: bytes = b""

    @classmethod
    def html(cls, text: str, status: int = 200, headers=()) -> "Response":
        return cls(status, [("Content-Type", "text/html; charset=utf-8"), *headers], text.encode())

    @classmethod
    def json(cls, doc, status: int = 200, headers=()) -> "Response":
        return cls(status, [("Content-Type", "application/json"), *headers], json.dumps(doc, sort_keys=True).encode())

    @classmethod
    def redirect(cls, location: str, status: int = 302, headers=()) -> "Response":
        return cls(status, [("Location", location), *headers], b"")


App = Callable[[Request], Response]


@dataclass(frozen=True)
class Event:
    seq: int
    host: str
    scheme: str
    method: str
    path: str


class Network:
    """Name registry, harness CA and a global request log."""

    def __init__(self, ca: Optional[CertificateAuthority] = None):
        self.ca = ca or CertificateAuthority.create("oauthguard harness CA")
        self._routes: dict[tuple[str, int], int] = {}
        self._lock = threading.Lock()
        self._seq = itertools.count(1)
        self.events: list[Event] = []

    def register(self, host: str, virtual_port: int, real_port: int) -> None:
        with self._lock:
            self._routes[(host, virtual_port)] = real_port

    def unregister(self, host: str, virtual_port: int) -> None:
        with self._lock:
            self._routes.pop((host, virtual_port), None)

    def resolve(self, host: str, port: int) -> tuple[str, int]:
        with self._lock:
            real = self._routes.get((host.lower(), port))
        if real is None:
            raise ConnectionRefusedError(f"no harness listener for {host}:{port}")
        return "127.0.0.1", real

    def record(self, host: str, scheme: str, method: str, path: str) -> Event:
        with self._lock:
            ev = Event(next(self._seq), host, scheme, method, path)
            self.events.append(ev)
        return ev

    def events_for(self, host: str) -> list[Event]:
        with self._lock:
            return [e for e in self.events if e.host == host]

    def client_context(self) -> ssl.SSLContext:
        return self.ca.client_context()

    def close(self) -> None:
        self.ca.close()


class _AppHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "AppServer"

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.server.scheme, fmt % args)

    def _handle(self):
        srv = self.server
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        split = urlsplit(self.path)
        host = (self.headers.get("Host") or "").split(":")[0].lower()
        req = Request(
            method=self.command,
            scheme=srv.scheme,
            host=host,
            path=split.path,
            query=dict(parse_qsl(split.query, keep_blank_values=True)),
            headers=Headers(self.headers.items()),
            body=body,
        )
        srv.network.record(host, srv.scheme, self.command, self.path)
        try:
            resp = srv.app(req)
        except Exception:
            log.exception("harness app failed on %s %s", self.command, self.path)
            resp = Response.html("<h1>500</h1>", 500)
        self.send_response_only(resp.status)
        for k, v in resp.headers:
            self.send_header(k, v)
        self.send_header("Content-Length", str(len(resp.body)))
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(resp.body)
        if (self.headers.get("Connection") or "").lower() == "close":
            self.close_connection = True

    do_GET = do_POST = do_HEAD = do_PUT = do_DELETE = _handle


class AppServer(ThreadingHTTPServer):
    """Serves one app on loopback over http or https (SNI picks the leaf)."""

    daemon_threads = True

    def __init__(self, network: Network, app: App, scheme: str, hosts: list[str]):
        self.network = network
        self.app = app
        self.scheme = scheme
        self.hosts = [h.lower() for h in hosts]
        self._ssl: Optional[ssl.SSLContext] = None
        if scheme == "https":
            ca = network.ca

            def _sni(sock, server_name, _ctx):
                if server_name:
                    sock.context = ca.server_context(server_name.lower())

            self._ssl = ca.server_context(self.hosts[0])
            self._ssl.sni_callback = _sni
        super().__init__(("127.0.0.1", 0), _AppHandler)
        self._thread = threading.Thread(target=self.serve_forever, args=(0.05,), daemon=True)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def finish_request(self, request, client_address):
        request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        if self._ssl is not None:
            try:
                request = self._ssl.wrap_socket(request, server_side=True)
            except (ssl.SSLError, OSError) as exc:
                log.debug("harness TLS handshake failed: %s", exc)
                return
        super().finish_request(request, client_address)

    @property
    def virtual_port(self) -> int:
        return 443 if self.scheme == "https" else 80

    def add_host(self, host: str) -> None:
        host = host.lower()
        if host not in self.hosts:
            self.hosts.append(host)
        self.network.register(host, self.virtual_port, self.port)

    def start(self) -> "AppServer":
        for h in self.hosts:
            self.network.register(h, self.virtual_port, self.port)
        self._thread.start()
        return self

    def stop(self) -> None:
        for h in self.hosts:
            self.network.unregister(h, self.virtual_port)
        self.shutdown()
        self.server_close()


def backchannel(network: Network, method: str, url: str, form: Optional[dict] = None, bearer: Optional[str] = None):
    """Server-to-server JSON call inside the harness; returns ``(status, doc)``."""
    split = urlsplit(url)
    scheme = split.scheme
    port = split.port or (443 if scheme == "https" else 80)
    headers = [("Host", split.hostname), ("Accept", "application/json")]
    body = None
    if form is not None:
        body = urlencode(form).encode()
        headers.append(("Content-Type", "application/x-www-form-urlencoded"))
    if bearer:
        headers.append(("Authorization", f"Bearer {bearer}"))
    conn = open_connection(scheme, split.hostname, port, resolver=network.resolve, context=network.client_context())
    try:
        target = split.path + (f"?{split.query}" if split.query else "")
        resp = send_request(conn, method, target, headers, body)
        raw = resp.read()
        try:
            doc = json.loads(raw or b"{}")
        except ValueError:
            doc = {"error": "non-json response"}
        return resp.status, doc
    finally:
        conn.close()
