"""Intercepting forward proxy that enforces pipeline verdicts."""

from __future__ import annotations

import html
import http.client
import logging
import select
import signal
import socket
import ssl
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional
from urllib.parse import urlsplit

from ..analyser import Whitelist
from ..http_model import Headers, HttpTransaction, UrlParseError, parse_url
from ..protector import DEFAULT_IDP_DOMAINS, Mode, PolicyConfig, Verdict
from ..transport import HOP_BY_HOP, Resolver, open_connection, send_request
from .tls import CertificateAuthority, client_context

log = logging.getLogger(__name__)

WARNING_HEADER = "X-OAuthGuard-Warning"

_BLOCK_PAGE = """<!DOCTYPE html>
<html><head><title>Request blocked</title></head>
<body>
<h1>Request blocked</h1>
<p>Finding: <strong>{cls}</strong></p>
<p>{reason}</p>
<p>Target: {target}</p>
</body></html>
"""

_BAD_GATEWAY_PAGE = """<!DOCTYPE html>
<html><head><title>Bad gateway</title></head>
<body>
<h1>Upstream unavailable</h1>
<p>Could not reach {target}: {error}</p>
{extra}
</body></html>
"""


def _origin_form(request_target: str) -> str:
    """Path and raw query of a request target, dropping any scheme/authority."""
    if request_target.startswith(("http://", "https://")):
        split = urlsplit(request_target)
        return (split.path or "/") + (f"?{split.query}" if split.query else "")
    return request_target


def parse_listen(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"listen address must be host:port, got {value!r}")
    return host.strip("[]") or "127.0.0.1", int(port)


@dataclass
class ProxyConfig:
    listen: str = "127.0.0.1:8080"
    ca_cert: Optional[str] = None
    ca_key: Optional[str] = None
    mode: Mode = Mode.ENFORCE
    https_upgrade_enabled: bool = True
    whitelist: Whitelist = field(default_factory=Whitelist.default)
    idp_domains: frozenset = DEFAULT_IDP_DOMAINS
    upstream_cafile: Optional[str] = None
    resolver: Optional[Resolver] = None
    timeout: float = 15.0

    @property
    def tls_interception(self) -> bool:
        return bool(self.ca_cert or self.ca_key)

    def load_ca(self) -> Optional[CertificateAuthority]:
        if not self.tls_interception:
            return None
        return CertificateAuthority.load(self.ca_cert, self.ca_key)

    def policy(self) -> PolicyConfig:
        return PolicyConfig(
            https_upgrade_enabled=self.https_upgrade_enabled,
            mode=self.mode,
            whitelist=self.whitelist,
            idp_domains=frozenset(self.idp_domains),
        )


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "ProxyServer"

    # tunnel target when serving requests decrypted from a CONNECT
    _tunnel: Optional[tuple[str, int]] = None

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    # -- CONNECT ------------------------------------------------------------

    def do_CONNECT(self):
        try:
            host, port = parse_listen(self.path)
        except ValueError:
            self.send_error(400, "bad CONNECT target")
            return
        proxy = self.server
        if proxy.ca is None or host in proxy.no_intercept:
            self._opaque_tunnel(host, port)
            return
        self.send_response_only(200, "Connection Established")
        self.end_headers()
        self.wfile.flush()
        try:
            tls = proxy.ca.server_context(host).wrap_socket(self.connection, server_side=True)
        except (ssl.SSLError, OSError) as exc:
            log.warning("TLS interception failed for %s: %s; tunnelling it opaquely from now on", host, exc)
            proxy.no_intercept.add(host)
            proxy.pipeline.report.note_unobservable()
            self.close_connection = True
            return
        self.connection = tls
        self.rfile = tls.makefile("rb")
        self.wfile = tls.makefile("wb")
        self._tunnel = (host, port)
        self.close_connection = False
        while not self.close_connection:
            self.handle_one_request()
        self.close_connection = True

    def _opaque_tunnel(self, host: str, port: int):
        proxy = self.server
        try:
            upstream = socket.create_connection(proxy.resolve(host, port), proxy.config.timeout)
        except OSError as exc:
            self._bad_gateway(f"{host}:{port}", exc)
            return
        proxy.pipeline.report.note_unobservable()
        self.send_response_only(200, "Connection Established")
        self.end_headers()
        self.wfile.flush()
        conns = [self.connection, upstream]
        try:
            while True:
                ready, _, errored = select.select(conns, [], conns, proxy.config.timeout)
                if errored or not ready:
                    break
                for s in ready:
                    data = s.recv(65536)
                    if not data:
                        return
                    (upstream if s is self.connection else self.connection).sendall(data)
        except OSError:
            pass
        finally:
            upstream.close()
            self.close_connection = True

    # -- plain requests -----------------------------------------------------

    def _target(self) -> str:
        if self._tunnel is not None:
            host, port = self._tunnel
            netloc = host if port == 443 else f"{host}:{port}"
            return f"https://{netloc}{self.path}"
        return self.path

    def _read_body(self) -> Optional[bytes]:
        if "chunked" in (self.headers.get("Transfer-Encoding") or "").lower():
            chunks = []
            while True:
                size = int(self.rfile.readline().split(b";")[0].strip() or b"0", 16)
                if size == 0:
                    while self.rfile.readline() not in (b"\r\n", b"\n", b""):
                        pass
                    break
                chunks.append(self.rfile.read(size))
                self.rfile.readline()
            return b"".join(chunks)
        length = self.headers.get("Content-Length")
        if length is None:
            return None
        return self.rfile.read(int(length))

    def _handle(self):
        raw_url = self._target()
        body = self._read_body()
        headers = Headers(self.headers.items())
        try:
            tx = HttpTransaction(
                method=self.command,
                url=parse_url(raw_url),
                headers=headers,
                body=body,
                content_type=headers.get("Content-Type"),
            )
        except UrlParseError as exc:
            self._send(400, [("Content-Type", "text/plain")], f"bad request target: {exc}\n".encode())
            return
        if self.headers.get("Connection", "").lower() == "close":
            self.close_connection = True

        proxy = self.server
        try:
            outcome = proxy.pipeline(tx)
        except Exception:  # pipeline bugs must not take the proxy down
            log.exception("pipeline failed on %s %s", tx.method, raw_url)
            outcome = None
        action = outcome.action if outcome is not None else None
        extra_headers: list[tuple[str, str]] = []
        if action is not None and proxy.config.mode is Mode.ENFORCE:
            if action.verdict is Verdict.BLOCK:
                page = _BLOCK_PAGE.format(
                    cls=html.escape(action.reason_class.value if action.reason_class else "Block"),
                    reason=html.escape(action.message),
                    target=html.escape(tx.url.origin + tx.url.path),
                )
                self._send(403, [("Content-Type", "text/html; charset=utf-8")], page.encode())
                return
            if action.verdict is Verdict.UPGRADE:
                self._send(
                    307,
                    [("Location", action.rewritten_url), ("Content-Type", "text/plain")],
                    f"Redirecting to {action.rewritten_url}\n".encode(),
                )
                return
            if action.verdict is Verdict.WARN:
                log.warning(
                    "oauth warning: %s",
                    action.message,
                    extra={"finding": action.reason_class.value, "url": raw_url, "ref": tx.ref},
                )
                extra_headers.append((WARNING_HEADER, action.message))
        self._forward(tx, body, extra_headers)

    def _forward(self, tx: HttpTransaction, body: Optional[bytes], extra_headers):
        proxy = self.server
        url = tx.url
        target = _origin_form(self.path)
        headers = [(k, v) for k, v in tx.headers if k.lower() not in HOP_BY_HOP]
        conn = open_connection(
            url.scheme,
            url.host,
            url.port,
            resolver=proxy.resolve,
            context=proxy.upstream_context,
            timeout=proxy.config.timeout,
        )
        try:
            resp = send_request(conn, tx.method, target, headers, body)
            payload = resp.read()
            resp_headers = [
                (k, v)
                for k, v in resp.getheaders()
                if k.lower() not in HOP_BY_HOP and k.lower() != "content-length"
            ]
            status, reason = resp.status, resp.reason
        except (OSError, http.client.HTTPException) as exc:
            extra = ""
            if url.scheme == "https":
                extra = "<p>The site may not support HTTPS; sign-in is unavailable while HTTPS upgrade is enabled.</p>"
            self._bad_gateway(f"{url.scheme}://{url.netloc}", exc, extra)
            return
        finally:
            conn.close()
        if self.command != "HEAD":
            resp_headers.append(("Content-Length", str(len(payload))))
        self._send(status, resp_headers + extra_headers, payload, reason)

    def _bad_gateway(self, target: str, exc: Exception, extra: str = ""):
        page = _BAD_GATEWAY_PAGE.format(target=html.escape(target), error=html.escape(str(exc) or type(exc).__name__), extra=extra)
        self._send(502, [("Content-Type", "text/html; charset=utf-8")], page.encode())

    def _send(self, status: int, headers, body: bytes, reason: Optional[str] = None):
        self.send_response_only(status, reason)
        has_length = False
        for k, v in headers:
            if k.lower() == "content-length":
                has_length = True
            self.send_header(k, v)
        if not has_length and self.command != "HEAD":
            self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(body)
        self.wfile.flush()

    do_GET = do_POST = do_PUT = do_DELETE = do_PATCH = do_OPTIONS = do_HEAD = _handle


class ProxyServer(ThreadingHTTPServer):
    """Threaded proxy; ``start()`` serves in the background, ``stop()`` drains."""

    daemon_threads = False
    block_on_close = True
    allow_reuse_address = True

    def __init__(self, config: ProxyConfig, pipeline: Callable, ca: Optional[CertificateAuthority] = None):
        self.config = config
        self.pipeline = pipeline
        self.ca = ca if ca is not None else config.load_ca()
        self.no_intercept: set[str] = set()
        self.upstream_context = client_context(config.upstream_cafile)
        self._thread: Optional[threading.Thread] = None
        super().__init__(parse_listen(config.listen), _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def finish_request(self, request, client_address):
        request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        super().finish_request(request, client_address)

    def resolve(self, host: str, port: int) -> tuple[str, int]:
        if self.config.resolver is not None:
            return self.config.resolver(host, port)
        return host, port

    def start(self) -> "ProxyServer":
        self._thread = threading.Thread(target=self.serve_forever, args=(0.05,), name="oauthguard-proxy", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def run_proxy(config: ProxyConfig, pipeline: Callable) -> ProxyServer:
    """Serve until SIGINT/SIGTERM, then drain open connections and return."""
    server = ProxyServer(config, pipeline)
    stop = threading.Event()

    def _on_signal(signum, frame):
        stop.set()

    previous = {s: signal.signal(s, _on_signal) for s in (signal.SIGINT, signal.SIGTERM)}
    server.start()
    log.info("proxy listening on %s:%d", *server.address)
    try:
        stop.wait()
    finally:
        for s, handler in previous.items():
            signal.signal(s, handler)
        server.stop()
    return server
