"""Classify transactions as OAuth requests/responses and extract their metadata."""

from __future__ import annotations

import enum
import threading
import time
from dataclasses import dataclass, fields
from typing import Callable, Optional

from .http_model import (
    TOKEN_PARAMS,
    HttpTransaction,
    UrlParseError,
    extract_params,
    parse_url,
    registrable,
)

DEFAULT_TTL = 600.0


class Kind(enum.Enum):
    OAUTH_REQUEST = "OAuthRequest"
    OAUTH_RESPONSE = "OAuthResponse"
    NOT_OAUTH = "NotOAuth"


class ClassificationError(RuntimeError):
    """A transaction was handed to an extractor it does not qualify for."""


def protocol(scheme: str) -> str:
    """Scheme in ``location.protocol`` form, e.g. ``"https:"``."""
    return scheme.lower().rstrip(":") + ":"


def _is_request_url(tx: HttpTransaction) -> bool:
    path_and_query = tx.url.path
    if tx.url.query:
        path_and_query += "?" + "&".join(f"{k}={v}" for k, v in tx.url.query)
    if "oauth" not in path_and_query.lower():
        return False
    return any(k.lower() == "redirect_uri" for k, _ in tx.url.query)


def classify(tx: HttpTransaction) -> Kind:
    if _is_request_url(tx):
        return Kind.OAUTH_REQUEST
    params = extract_params(tx)
    if any(params.get(name) for name in TOKEN_PARAMS):
        return Kind.OAUTH_RESPONSE
    return Kind.NOT_OAUTH


@dataclass(frozen=True)
class OAuthRequestMeta:
    idp: str
    idp_protocol: str
    rp: str
    rp_domain: str
    rp_protocol: str
    client_id: str
    origin: Optional[str]
    redirect_uri: str
    referer: Optional[str]
    request_url: str
    response_type: str
    scope: str
    state: Optional[str]

    def to_record(self) -> dict:
        return {
            "IdP": self.idp,
            "IdPProtocol": self.idp_protocol,
            "RP": self.rp,
            "RPDomain": self.rp_domain,
            "RPProtocol": self.rp_protocol,
            "clientID": self.client_id,
            "origin": self.origin,
            "redirectURI": self.redirect_uri,
            "referer": self.referer,
            "requestURL": self.request_url,
            "responseType": self.response_type,
            "scope": self.scope,
            "state": self.state,
        }


@dataclass(frozen=True)
class OAuthResponseMeta:
    idp: str
    rp_domain: str
    rp_host: str
    rp_protocol: str
    access_token: str = ""
    code: str = ""
    cookie: str = ""
    data: str = ""
    id_token: str = ""
    method: str = "GET"
    referer: Optional[str] = None
    response_url: str = ""
    state: Optional[str] = None

    def tokens(self) -> dict[str, str]:
        present = {"code": self.code, "access_token": self.access_token, "id_token": self.id_token}
        return {k: v for k, v in present.items() if v}

    def to_record(self) -> dict:
        return {
            "IdP": self.idp,
            "RPDomain": self.rp_domain,
            "RPHost": self.rp_host,
            "RPProtocol": self.rp_protocol,
            "access_token": self.access_token,
            "code": self.code,
            "cookie": self.cookie,
            "data": self.data,
            "id_token": self.id_token,
            "method": self.method,
            "referer": self.referer,
            "responseURL": self.response_url,
            "state": self.state,
        }


def extract_request_meta(tx: HttpTransaction) -> OAuthRequestMeta:
    params = tx.url.query_dict()
    redirect_uri = params.get("redirect_uri")
    if redirect_uri is None:
        raise ClassificationError(f"OAuth request without redirect_uri: {tx.url}")
    try:
        redirect = parse_url(redirect_uri)
    except UrlParseError as exc:
        raise ClassificationError(f"unparseable redirect_uri {redirect_uri!r}") from exc
    return OAuthRequestMeta(
        idp=tx.url.origin,
        idp_protocol=protocol(tx.url.scheme),
        rp=redirect.host,
        rp_domain=registrable(redirect.host),
        rp_protocol=protocol(redirect.scheme),
        client_id=params.get("client_id", ""),
        origin=tx.headers.get("Origin"),
        redirect_uri=redirect_uri,
        referer=tx.headers.get("Referer"),
        request_url=tx.url.serialize(fragment=False),
        response_type=params.get("response_type", ""),
        scope=params.get("scope", ""),
        state=params.get("state"),
    )


_DATA_EXCERPT = 256


def extract_response_meta(tx: HttpTransaction) -> OAuthResponseMeta:
    params = extract_params(tx)
    if not any(params.get(name) for name in TOKEN_PARAMS):
        raise ClassificationError(f"no token parameter in {tx.url}")
    referer = tx.headers.get("Referer")
    idp = ""
    if referer:
        try:
            idp = registrable(parse_url(referer).host)
        except (UrlParseError, ValueError):
            idp = ""
    data = ""
    if tx.body:
        data = tx.body[:_DATA_EXCERPT].decode("utf-8", "replace")
    return OAuthResponseMeta(
        idp=idp,
        rp_domain=registrable(tx.url.host),
        rp_host=tx.url.host,
        rp_protocol=protocol(tx.url.scheme),
        access_token=params.get("access_token", ""),
        code=params.get("code", ""),
        cookie=tx.headers.get("Cookie", "") or "",
        data=data,
        id_token=params.get("id_token", ""),
        method=tx.method,
        referer=referer,
        response_url=tx.url.serialize(fragment=False),
        state=params.get("state"),
    )


class SessionStore:
    """OAuth request metadata keyed by RP registrable domain, with a TTL.

    ``clock`` is injectable for tests; it must be monotonic.
    """

    def __init__(self, ttl: float = DEFAULT_TTL, clock: Callable[[], float] = time.monotonic):
        self.ttl = ttl
        self.clock = clock
        self._records: dict[str, tuple[OAuthRequestMeta, float]] = {}
        self._lock = threading.Lock()

    def store(self, meta: OAuthRequestMeta) -> "SessionStore":
        with self._lock:
            self._records[meta.rp_domain] = (meta, self.clock())
        return self

    def lookup(self, rp_domain) -> Optional[OAuthRequestMeta]:
        key = str(rp_domain)
        with self._lock:
            rec = self._records.get(key)
            if rec is None:
                return None
            meta, stored_at = rec
            if self.clock() - stored_at >= self.ttl:
                del self._records[key]
                return None
            return meta

    def __len__(self) -> int:
        return len(self._records)


def store_request(store: SessionStore, meta: OAuthRequestMeta) -> SessionStore:
    return store.store(meta)


def lookup_request(store: SessionStore, rp_domain) -> Optional[OAuthRequestMeta]:
    return store.lookup(rp_domain)


def meta_from_record(cls, doc: dict):
    """Inverse of ``to_record`` for either metadata class."""
    inverse = {v: k for k, v in _RECORD_NAMES[cls].items()}
    return cls(**{inverse[k]: v for k, v in doc.items() if k in inverse})


def _record_names(cls) -> dict[str, str]:
    # to_record emits keys in field order
    probe = cls(**{f.name: f.name for f in fields(cls)})
    return dict(zip((f.name for f in fields(cls)), probe.to_record().keys()))


_RECORD_NAMES = {cls: _record_names(cls) for cls in (OAuthRequestMeta, OAuthResponseMeta)}
