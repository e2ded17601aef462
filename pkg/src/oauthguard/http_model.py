"""HTTP transaction model, URL decomposition and registrable-domain lookup."""

from __future__ import annotations

import ipaddress
import json
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Iterable, Iterator, Optional
from urllib.parse import parse_qsl, quote, urlencode, urlsplit

DEFAULT_PORTS = {"http": 80, "https": 443}

TOKEN_PARAMS = ("code", "access_token", "id_token")

_PATH_SAFE = "/%:@!$&'()*+,;=-._~"


class UrlParseError(ValueError):
    """Raised when a URL cannot be decomposed; ``component`` names the culprit."""

    def __init__(self, component: str, raw: str, detail: str = ""):
        self.component = component
        self.raw = raw
        msg = f"malformed URL {raw!r}: bad {component}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Headers:
    """Ordered, case-insensitive multimap of header names to values."""

    __slots__ = ("_items",)

    def __init__(self, items: Iterable[tuple[str, str]] = ()):
        if isinstance(items, dict):
            items = items.items()
        self._items = tuple((str(k), str(v)) for k, v in items)

    def get(self, name: str, default: Optional[str] = None) -> Optional[str]:
        lname = name.lower()
        for k, v in self._items:
            if k.lower() == lname:
                return v
        return default

    def get_all(self, name: str) -> list[str]:
        lname = name.lower()
        return [v for k, v in self._items if k.lower() == lname]

    def __contains__(self, name: str) -> bool:
        return self.get(name) is not None

    def __iter__(self) -> Iterator[tuple[str, str]]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __eq__(self, other) -> bool:
        return isinstance(other, Headers) and self._items == other._items

    def __hash__(self) -> int:
        return hash(self._items)

    def __repr__(self) -> str:
        return f"Headers({list(self._items)!r})"

    def items(self) -> list[tuple[str, str]]:
        return list(self._items)

    def with_header(self, name: str, value: str) -> "Headers":
        return Headers(self._items + ((name, value),))


@dataclass(frozen=True)
class UrlParts:
    scheme: str
    host: str
    port: int
    path: str = "/"
    query: tuple[tuple[str, str], ...] = ()
    fragment: Optional[str] = None

    @property
    def origin(self) -> str:
        return f"{self.scheme}://{self.netloc}"

    @property
    def netloc(self) -> str:
        host = f"[{self.host}]" if ":" in self.host else self.host
        if self.port == DEFAULT_PORTS.get(self.scheme):
            return host
        return f"{host}:{self.port}"

    def serialize(self, *, fragment: bool = True, explicit_port: bool = False) -> str:
        host = f"[{self.host}]" if ":" in self.host else self.host
        netloc = f"{host}:{self.port}" if explicit_port else self.netloc
        url = f"{self.scheme}://{netloc}{quote(self.path, safe=_PATH_SAFE)}"
        if self.query:
            url += "?" + urlencode(list(self.query))
        if fragment and self.fragment is not None:
            url += "#" + self.fragment
        return url

    def __str__(self) -> str:
        return self.serialize()

    def query_dict(self) -> dict[str, str]:
        # first occurrence wins
        out: dict[str, str] = {}
        for k, v in self.query:
            out.setdefault(k, v)
        return out


def parse_url(raw: str) -> UrlParts:
    """Decompose an absolute http(s) URL.

    Query parameters are percent-decoded (``+`` as space); the fragment is
    kept verbatim.
    """
    if not raw:
        raise UrlParseError("url", raw, "empty")
    try:
        split = urlsplit(raw.strip())
    except ValueError as exc:
        raise UrlParseError("netloc", raw, str(exc)) from exc
    scheme = split.scheme.lower()
    if scheme not in DEFAULT_PORTS:
        raise UrlParseError("scheme", raw, f"unsupported scheme {split.scheme!r}")
    try:
        host = split.hostname
    except ValueError as exc:
        raise UrlParseError("host", raw, str(exc)) from exc
    if not host:
        raise UrlParseError("host", raw, "missing")
    try:
        port = split.port
    except ValueError as exc:
        raise UrlParseError("port", raw, str(exc)) from exc
    if port is None:
        port = DEFAULT_PORTS[scheme]
    query = tuple(parse_qsl(split.query, keep_blank_values=True))
    fragment = split.fragment if "#" in raw else None
    return UrlParts(
        scheme=scheme,
        host=host.lower(),
        port=port,
        path=split.path or "/",
        query=query,
        fragment=fragment,
    )


@dataclass(frozen=True)
class HttpTransaction:
    method: str
    url: UrlParts
    headers: Headers = field(default_factory=Headers)
    body: Optional[bytes] = None
    content_type: Optional[str] = None
    observed_at: float = field(default_factory=time.monotonic)
    ref: str = ""
    status: Optional[int] = None

    @property
    def scheme(self) -> str:
        return self.url.scheme

    @property
    def referer(self) -> Optional[str]:
        return self.headers.get("Referer")

    @classmethod
    def build(cls, method: str, url: str, headers=(), body: Optional[bytes] = None, **kw):
        h = headers if isinstance(headers, Headers) else Headers(headers)
        ctype = kw.pop("content_type", None) or h.get("Content-Type")
        return cls(method=method.upper(), url=parse_url(url), headers=h, body=body,
                   content_type=ctype, **kw)

    def with_url(self, url: UrlParts) -> "HttpTransaction":
        return replace(self, url=url)


def _form_params(text: str) -> list[tuple[str, str]]:
    try:
        return parse_qsl(text, keep_blank_values=True)
    except ValueError:
        return []


def extract_params(tx: HttpTransaction) -> dict[str, str]:
    """Merge request parameters; earlier sources win on duplicate names.

    Priority: URL query, URL fragment (as a query string), form body, then
    top-level string members of a JSON body.
    """
    sources: list[list[tuple[str, str]]] = [list(tx.url.query)]
    if tx.url.fragment:
        sources.append(_form_params(tx.url.fragment))
    if tx.body:
        ctype = (tx.content_type or "").split(";")[0].strip().lower()
        try:
            text = tx.body.decode("utf-8")
        except UnicodeDecodeError:
            text = None
        if text is not None:
            if ctype == "application/json" or (not ctype and text.lstrip().startswith("{")):
                try:
                    doc = json.loads(text)
                except ValueError:
                    doc = None
                if isinstance(doc, dict):
                    sources.append([(k, v) for k, v in doc.items() if isinstance(v, str)])
            elif ctype in ("", "application/x-www-form-urlencoded", "text/plain"):
                sources.append(_form_params(text))
    merged: dict[str, str] = {}
    for pairs in sources:
        for k, v in pairs:
            merged.setdefault(k, v)
    return merged


# -- registrable domains ------------------------------------------------------

@dataclass(frozen=True)
class DomainName:
    host: str
    registrable: str

    def __str__(self) -> str:
        return self.registrable


class PublicSuffixList:
    """Rules from a public-suffix list file (``//`` or ``#`` comments)."""

    def __init__(self, lines: Iterable[str]):
        self.rules: set[str] = set()
        self.wildcards: set[str] = set()
        self.exceptions: set[str] = set()
        for line in lines:
            line = line.strip()
            if not line or line.startswith("//") or line.startswith("#"):
                continue
            rule = line.split()[0].lower()
            if rule.startswith("!"):
                self.exceptions.add(rule[1:])
            elif rule.startswith("*."):
                self.wildcards.add(rule[2:])
            else:
                self.rules.add(rule)

    @classmethod
    def from_file(cls, path) -> "PublicSuffixList":
        with open(path, encoding="utf-8") as fh:
            return cls(fh)

    def public_suffix_len(self, labels: list[str]) -> int:
        """Number of trailing labels forming the public suffix."""
        n = len(labels)
        best = 1  # implicit "*" rule
        for i in range(n):
            cand = ".".join(labels[i:])
            if cand in self.exceptions:
                return n - i - 1
            size = n - i
            if cand in self.rules:
                best = max(best, size)
            if cand in self.wildcards:
                # "*.cand" needs one more label to the left
                best = max(best, size + 1 if i > 0 else size)
        return best

    def registrable(self, host: str) -> Optional[str]:
        labels = host.split(".")
        plen = self.public_suffix_len(labels)
        if plen >= len(labels):
            return None
        return ".".join(labels[-plen - 1:])


@lru_cache(maxsize=1)
def default_suffix_list() -> PublicSuffixList:
    text = resources.files("oauthguard.data").joinpath("public_suffix_list.dat").read_text("utf-8")
    return PublicSuffixList(text.splitlines())


def _is_ip(host: str) -> bool:
    try:
        ipaddress.ip_address(host.strip("[]"))
    except ValueError:
        return False
    return True


@lru_cache(maxsize=65536)
def _registrable_cached(host: str) -> str:
    if _is_ip(host):
        return host
    reg = default_suffix_list().registrable(host)
    # a bare public suffix is its own comparison unit
    return reg if reg is not None else host


def registrable_domain(host: str) -> DomainName:
    if host is None or not host.strip(". "):
        raise ValueError("empty host")
    h = host.strip().rstrip(".").lower()
    return DomainName(host=h, registrable=_registrable_cached(h))


def registrable(host: str) -> str:
    """Shorthand returning only the registrable-domain string."""
    return registrable_domain(host).registrable


def url_host(raw: Optional[str]) -> Optional[str]:
    """Host of a URL string, or None when absent/unparseable."""
    if not raw:
        return None
    try:
        return parse_url(raw).host
    except UrlParseError:
        return None
