"""Vulnerability rules applied to OAuth responses and to every transaction."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from importlib import resources
from typing import Iterable, Optional
from urllib.parse import parse_qsl, urlencode

from .detector import (
    Kind,
    OAuthRequestMeta,
    OAuthResponseMeta,
    SessionStore,
    classify,
    extract_response_meta,
)
from .http_model import TOKEN_PARAMS, HttpTransaction, UrlParseError, parse_url, registrable


class FindingClass(str, enum.Enum):
    CSRF_THREAT = "CsrfThreat"
    IMPERSONATION = "Impersonation"
    FLOW_MISUSE = "FlowMisuse"
    UNSAFE_TRANSFER = "UnsafeTransfer"
    REFERER_LEAK = "RefererLeak"
    INTENTIONAL_LEAK = "IntentionalLeak"

    def __str__(self) -> str:
        return self.value


LEAK_CLASSES = frozenset({FindingClass.REFERER_LEAK, FindingClass.INTENTIONAL_LEAK})


def redact(value: str) -> str:
    """First six characters plus the length; never the full token."""
    return f"{value[:6]}...({len(value)})"


def redact_url(raw: str) -> str:
    try:
        url = parse_url(raw)
    except UrlParseError:
        return "<unparseable>"

    def scrub(pairs) -> str:
        # keep "(" and ")" literal so the redacted length stays readable
        return urlencode([(k, redact(v) if k in TOKEN_PARAMS and v else v) for k, v in pairs], safe="()")

    out = replace(url, query=(), fragment=None).serialize()
    if url.query:
        out += "?" + scrub(url.query)
    if url.fragment is not None:
        pairs = parse_qsl(url.fragment, keep_blank_values=True)
        leaky = any(k in TOKEN_PARAMS for k, _ in pairs)
        out += "#" + (scrub(pairs) if leaky else url.fragment)
    return out


@dataclass(frozen=True)
class Finding:
    cls: FindingClass
    rp_domain: str
    evidence: tuple[tuple[str, str], ...] = ()
    transaction_ref: str = ""

    @property
    def evidence_dict(self) -> dict[str, str]:
        return dict(self.evidence)

    def key(self) -> tuple:
        """Identity ignoring which transaction carried it."""
        return (self.cls.value, self.rp_domain, self.evidence)

    def to_dict(self) -> dict:
        return {
            "class": self.cls.value,
            "rpDomain": self.rp_domain,
            "evidence": dict(self.evidence),
            "transactionRef": self.transaction_ref,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Finding":
        return cls(
            cls=FindingClass(doc["class"]),
            rp_domain=doc["rpDomain"],
            evidence=tuple(sorted(doc.get("evidence", {}).items())),
            transaction_ref=doc.get("transactionRef", ""),
        )


def _finding(kind: FindingClass, rp_domain: str, ref: str = "", **evidence: Optional[str]) -> Finding:
    ev = tuple(sorted((k, v) for k, v in evidence.items() if v is not None))
    return Finding(kind, rp_domain, ev, ref)


def _token_evidence(resp: OAuthResponseMeta) -> dict[str, str]:
    tokens = resp.tokens()
    ev = {name: redact(value) for name, value in tokens.items()}
    ev["tokens"] = ",".join(sorted(tokens))
    return ev


class Whitelist:
    """Registrable domains exempt from referer validation and leak attribution."""

    def __init__(self, domains: Iterable[str] = ()):
        self.domains = frozenset(registrable(d) for d in domains if d.strip())

    def __contains__(self, domain) -> bool:
        return str(domain).lower() in self.domains

    def __iter__(self):
        return iter(sorted(self.domains))

    def __len__(self) -> int:
        return len(self.domains)

    def __or__(self, other: "Whitelist") -> "Whitelist":
        return Whitelist(self.domains | other.domains)

    @staticmethod
    def parse(text: str) -> "Whitelist":
        entries = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                entries.append(line.lower())
        return Whitelist(entries)

    @classmethod
    def load(cls, path) -> "Whitelist":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    @classmethod
    def default(cls) -> "Whitelist":
        text = resources.files("oauthguard.data").joinpath("whitelist.txt").read_text("utf-8")
        return cls.parse(text)


def detect_csrf_threat(resp: OAuthResponseMeta, ref: str = "") -> Optional[Finding]:
    if resp.state:
        return None
    return _finding(FindingClass.CSRF_THREAT, resp.rp_domain, ref, state="absent")


def detect_impersonation(resp: OAuthResponseMeta, ref: str = "") -> Optional[Finding]:
    if resp.access_token and not resp.code and not resp.id_token:
        return _finding(FindingClass.IMPERSONATION, resp.rp_domain, ref, **_token_evidence(resp))
    return None


def detect_flow_misuse(resp: OAuthResponseMeta, ref: str = "") -> Optional[Finding]:
    if len(resp.tokens()) >= 2:
        return _finding(FindingClass.FLOW_MISUSE, resp.rp_domain, ref, **_token_evidence(resp))
    return None


def detect_unsafe_transfer(resp: OAuthResponseMeta, ref: str = "") -> Optional[Finding]:
    if resp.rp_protocol.strip().lower().rstrip(":") == "http":
        return _finding(FindingClass.UNSAFE_TRANSFER, resp.rp_domain, ref, scheme="http")
    return None


def _leaked_tokens(referer_url) -> dict[str, str]:
    found = {k: v for k, v in referer_url.query if k in TOKEN_PARAMS and v}
    if referer_url.fragment:
        for k, v in parse_qsl(referer_url.fragment, keep_blank_values=True):
            if k in TOKEN_PARAMS and v:
                found.setdefault(k, v)
    return found


def detect_referer_leak(tx: HttpTransaction) -> Optional[Finding]:
    referer = tx.headers.get("Referer")
    if not referer:
        return None
    try:
        ref_url = parse_url(referer)
        source = registrable(ref_url.host)
    except (UrlParseError, ValueError):
        return None
    tokens = _leaked_tokens(ref_url)
    if not tokens:
        return None
    target = registrable(tx.url.host)
    if source == target:
        return None
    return _finding(
        FindingClass.REFERER_LEAK,
        source,
        tx.ref,
        referer=redact_url(referer),
        target=target,
        tokens=",".join(sorted(tokens)),
    )


def _intentional_leak(resp: OAuthResponseMeta, ref: str) -> Finding:
    # attribute to the page that sent the tokens when we know it
    leaker = resp.rp_domain
    if resp.referer:
        try:
            leaker = registrable(parse_url(resp.referer).host)
        except (UrlParseError, ValueError):
            pass
    return _finding(
        FindingClass.INTENTIONAL_LEAK,
        leaker,
        ref,
        target=resp.rp_domain,
        **_token_evidence(resp),
    )


def detect_intentional_leak(
    tx: HttpTransaction, store: SessionStore, wl: Whitelist
) -> Optional[Finding]:
    if classify(tx) is not Kind.OAUTH_RESPONSE:
        return None
    resp = extract_response_meta(tx)
    if store.lookup(resp.rp_domain) is not None or resp.rp_domain in wl:
        return None
    return _intentional_leak(resp, tx.ref)


RESPONSE_RULES = (detect_csrf_threat, detect_impersonation, detect_flow_misuse, detect_unsafe_transfer)


def analyse_response(
    req: Optional[OAuthRequestMeta],
    resp: OAuthResponseMeta,
    wl: Whitelist,
    ref: str = "",
) -> list[Finding]:
    if req is None:
        if resp.rp_domain in wl:
            return []
        return [_intentional_leak(resp, ref)]
    findings = []
    for rule in RESPONSE_RULES:
        hit = rule(resp, ref)
        if hit is not None:
            findings.append(hit)
    return findings
