"""Scripted browser: cookies, redirects, Referer policy, subresources and HAR capture."""

from __future__ import annotations

import datetime
import http.client
import ssl
from dataclasses import dataclass, field
from html.parser import HTMLParser
from http.cookies import CookieError, SimpleCookie
from typing import Callable, Optional
from urllib.parse import parse_qsl, urlencode, urljoin, urlsplit

from ..capture.har import har_entry
from ..capture.tls import client_context
from ..http_model import HttpTransaction
from ..transport import open_connection, send_request
from .net import Network

USER_AGENT = "Mozilla/5.0 (X11; Linux x86_64) oauthguard-harness/1.0"
REDIRECTS = {301, 302, 303, 307, 308}
MAX_REDIRECTS = 10


class FlowError(Exception):
    """Navigation failed; ``page`` is set when an error page was received."""

    def __init__(self, message: str, page: "Optional[Page]" = None):
        super().__init__(message)
        self.page = page


@dataclass(frozen=True)
class PendingRequest:
    method: str
    url: str
    headers: tuple[tuple[str, str], ...]
    body: Optional[bytes]
    content_type: Optional[str]

    def transaction(self) -> HttpTransaction:
        return HttpTransaction.build(self.method, self.url, self.headers, self.body, content_type=self.content_type)


class Intercepted(Exception):
    """Raised instead of sending a request the ``intercept`` hook claimed."""

    def __init__(self, request: PendingRequest):
        super().__init__(f"intercepted {request.method} {request.url}")
        self.request = request


@dataclass
class Exchange:
    method: str
    url: str
    request_headers: tuple[tuple[str, str], ...]
    body: Optional[bytes]
    content_type: Optional[str]
    status: int = 0
    response_headers: tuple[tuple[str, str], ...] = ()
    response_body: bytes = b""
    error: Optional[str] = None
    fragment: Optional[str] = None
    started: str = ""
    tag: str = ""

    def header(self, name: str) -> Optional[str]:
        name = name.lower()
        return next((v for k, v in self.response_headers if k.lower() == name), None)

    def transaction(self, ref: str = "") -> HttpTransaction:
        return HttpTransaction.build(
            self.method,
            self.url,
            self.request_headers,
            self.body,
            content_type=self.content_type,
            status=self.status or None,
            ref=ref,
        )

    def har(self, retain_fragment: bool = False) -> dict:
        url = self.url
        if retain_fragment and self.fragment is not None:
            url = f"{url}#{self.fragment}"
        return har_entry(
            self.method,
            url,
            self.request_headers,
            self.body,
            self.content_type,
            self.status,
            self.response_headers,
            self.started,
        )


@dataclass
class Form:
    id: str
    action: str
    method: str
    fields: dict
    autosubmit: bool = False


class _PageParser(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.links: dict[str, str] = {}
        self.resources: list[str] = []
        self.forms: dict[str, Form] = {}
        self.fragment_submit: Optional[tuple[str, str]] = None
        self._form: Optional[Form] = None

    def handle_starttag(self, tag, attrs):
        a = {k: (v or "") for k, v in attrs}
        if tag == "a" and a.get("id") and "href" in a:
            self.links[a["id"]] = a["href"]
        elif tag in ("img", "script") and a.get("src"):
            self.resources.append(a["src"])
        if tag == "script" and "data-fragment-submit" in a:
            self.fragment_submit = (a["data-fragment-submit"], (a.get("data-method") or "GET").upper())
        elif tag == "form":
            self._form = Form(
                id=a.get("id", f"form{len(self.forms)}"),
                action=a.get("action", ""),
                method=(a.get("method") or "GET").upper(),
                fields={},
                autosubmit="data-autosubmit" in a,
            )
            self.forms[self._form.id] = self._form
        elif tag == "input" and self._form is not None and a.get("name"):
            self._form.fields[a["name"]] = a.get("value", "")

    def handle_endtag(self, tag):
        if tag == "form":
            self._form = None


@dataclass
class Page:
    url: str
    exchange: Exchange
    links: dict = field(default_factory=dict)
    forms: dict = field(default_factory=dict)
    resources: list = field(default_factory=list)
    fragment_submit: Optional[tuple[str, str]] = None

    @property
    def status(self) -> int:
        return self.exchange.status

    @property
    def body(self) -> bytes:
        return self.exchange.response_body

    @property
    def origin(self) -> str:
        s = urlsplit(self.url)
        return f"{s.scheme}://{s.netloc}"

    @property
    def fragment(self) -> str:
        return urlsplit(self.url).fragment


def referer_for(source: Optional[str], target: str) -> Optional[str]:
    """Full-URL referrer minus fragment, dropped on an https to http hop."""
    if not source:
        return None
    src = urlsplit(source)
    if src.scheme == "https" and urlsplit(target).scheme == "http":
        return None
    return src._replace(fragment="").geturl()


class UserAgent:
    """One browser profile; every request uses a fresh connection.

    With ``proxy`` set, http requests go out in absolute form and https
    requests through a CONNECT tunnel that must present a certificate from
    ``proxy_cafile``.
    """

    def __init__(
        self,
        network: Network,
        *,
        proxy: Optional[tuple[str, int]] = None,
        proxy_cafile: Optional[str] = None,
        retain_fragments: bool = False,
        timeout: float = 15.0,
    ):
        self.network = network
        self.proxy = proxy
        self.retain_fragments = retain_fragments
        self.timeout = timeout
        self.cookies: dict[str, dict[str, str]] = {}
        self.exchanges: list[Exchange] = []
        self.intercept: Optional[Callable[[PendingRequest], bool]] = None
        self.tag = ""
        self._direct_ctx = network.client_context()
        self._proxy_ctx: Optional[ssl.SSLContext] = client_context(proxy_cafile) if proxy else None

    # -- wire ---------------------------------------------------------------

    def _connection(self, scheme: str, host: str, port: int) -> tuple[http.client.HTTPConnection, bool]:
        if self.proxy is None:
            conn = open_connection(
                scheme, host, port, resolver=self.network.resolve, context=self._direct_ctx, timeout=self.timeout
            )
            return conn, False
        phost, pport = self.proxy
        if scheme == "http":
            return http.client.HTTPConnection(phost, pport, timeout=self.timeout), True
        conn = http.client.HTTPSConnection(phost, pport, timeout=self.timeout, context=self._proxy_ctx)
        conn.set_tunnel(host, port)
        return conn, False

    def _store_cookies(self, host: str, headers) -> None:
        jar = self.cookies.setdefault(host, {})
        for k, v in headers:
            if k.lower() != "set-cookie":
                continue
            parsed = SimpleCookie()
            try:
                parsed.load(v)
            except CookieError:
                continue
            for name, morsel in parsed.items():
                jar[name] = morsel.value

    def fetch(
        self,
        method: str,
        url: str,
        *,
        referer: Optional[str] = None,
        body: Optional[bytes] = None,
        content_type: Optional[str] = None,
    ) -> Exchange:
        """Send one request; ``referer`` is the initiating document URL."""
        split = urlsplit(url)
        scheme, host = split.scheme, (split.hostname or "").lower()
        port = split.port or (443 if scheme == "https" else 80)
        wire = split._replace(fragment="").geturl()
        if split.path == "":
            wire = split._replace(path="/", fragment="").geturl()
        headers = [("Host", split.netloc), ("User-Agent", USER_AGENT), ("Accept", "*/*")]
        ref = referer_for(referer, url)
        if ref:
            headers.append(("Referer", ref))
        jar = self.cookies.get(host)
        if jar:
            headers.append(("Cookie", "; ".join(f"{k}={v}" for k, v in jar.items())))
        if content_type:
            headers.append(("Content-Type", content_type))
        if body is not None:
            headers.append(("Content-Length", str(len(body))))
        pending = PendingRequest(method, wire, tuple(headers), body, content_type)
        if self.intercept is not None and self.intercept(pending):
            raise Intercepted(pending)
        exchange = Exchange(
            method,
            wire,
            tuple(headers),
            body,
            content_type,
            fragment=split.fragment if "#" in url else None,
            started=datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z"),
            tag=self.tag,
        )
        self.exchanges.append(exchange)
        conn, absolute = self._connection(scheme, host, port)
        target = wire if absolute else (split.path or "/") + (f"?{split.query}" if split.query else "")
        try:
            resp = send_request(conn, method, target, headers, body)
            exchange.response_body = resp.read()
            exchange.status = resp.status
            exchange.response_headers = tuple(resp.getheaders())
        except (OSError, http.client.HTTPException) as exc:
            exchange.error = f"{type(exc).__name__}: {exc}"
            raise FlowError(f"{method} {wire}: {exchange.error}") from exc
        finally:
            conn.close()
        self._store_cookies(host, exchange.response_headers)
        return exchange

    # -- documents ----------------------------------------------------------

    def navigate(
        self,
        method: str,
        url: str,
        *,
        referer: Optional[str] = None,
        body: Optional[bytes] = None,
        content_type: Optional[str] = None,
    ) -> Page:
        """Load a document: follow redirects, fetch subresources, run page scripts."""
        for _ in range(MAX_REDIRECTS + 1):
            ex = self.fetch(method, url, referer=referer, body=body, content_type=content_type)
            location = ex.header("Location")
            if ex.status not in REDIRECTS or not location:
                break
            url = urljoin(url, location)
            if ex.status in (301, 302, 303) and method != "GET":
                method, body, content_type = "GET", None, None
        else:
            raise FlowError(f"too many redirects at {url}")
        return self._render(url, ex)

    def _render(self, url: str, ex: Exchange) -> Page:
        page = Page(url, ex)
        ctype = ex.header("Content-Type") or ""
        if ex.status != 200 or "html" not in ctype:
            return page
        parser = _PageParser()
        parser.feed(ex.response_body.decode("utf-8", "replace"))
        page.links, page.forms = parser.links, parser.forms
        page.resources, page.fragment_submit = parser.resources, parser.fragment_submit
        for src in page.resources:
            try:
                self.fetch("GET", urljoin(url, src), referer=url)
            except FlowError:
                pass  # a broken image does not break the page
        if page.fragment_submit is not None:
            endpoint, method = page.fragment_submit
            params = parse_qsl(page.fragment, keep_blank_values=True)
            target = urljoin(url, endpoint)
            if method == "POST":
                return self.navigate(
                    "POST",
                    target,
                    referer=url,
                    body=urlencode(params).encode(),
                    content_type="application/x-www-form-urlencoded",
                )
            return self.navigate("GET", f"{target}?{urlencode(params)}", referer=url)
        auto = next((f for f in page.forms.values() if f.autosubmit), None)
        if auto is not None:
            return self.submit(page, auto.id)
        return page

    def follow(self, page: Page, link_id: str) -> Page:
        try:
            href = page.links[link_id]
        except KeyError:
            raise FlowError(f"no link {link_id!r} on {page.url}") from None
        return self.navigate("GET", urljoin(page.url, href), referer=page.url)

    def submit(self, page: Page, form_id: str, values: Optional[dict] = None) -> Page:
        try:
            form = page.forms[form_id]
        except KeyError:
            raise FlowError(f"no form {form_id!r} on {page.url}") from None
        data = dict(form.fields)
        data.update(values or {})
        action = urljoin(page.url, form.action or page.url)
        encoded = urlencode(data)
        if form.method == "POST":
            return self.navigate(
                "POST", action, referer=page.url, body=encoded.encode(),
                content_type="application/x-www-form-urlencoded",
            )
        return self.navigate("GET", f"{action.split('?')[0]}?{encoded}", referer=page.url)

    # -- capture ------------------------------------------------------------

    def har_entries(self) -> list[dict]:
        return [ex.har(self.retain_fragments) for ex in self.exchanges]
