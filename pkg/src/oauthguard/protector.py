"""Map findings to a mitigation verdict."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .analyser import LEAK_CLASSES, Finding, FindingClass, Whitelist
from .detector import OAuthResponseMeta
from .http_model import HttpTransaction, UrlParseError, parse_url, registrable

DEFAULT_IDP_DOMAINS = frozenset({"google.com"})


class Verdict(str, enum.Enum):
    ALLOW = "Allow"
    BLOCK = "Block"
    UPGRADE = "UpgradeToHttps"
    WARN = "Warn"

    def __str__(self) -> str:
        return self.value


class Mode(str, enum.Enum):
    ENFORCE = "enforce"
    REPORT_ONLY = "reportOnly"


WARNINGS = {
    FindingClass.IMPERSONATION: (
        "This site signs you in with an access token alone and may be open to "
        "impersonation attacks. Consider no longer using Google sign-in with this site."
    ),
    FindingClass.FLOW_MISUSE: (
        "This site submits several OAuth tokens to its sign-in endpoint, which "
        "departs from the standard flow and can weaken account security."
    ),
}

BLOCK_REASONS = {
    FindingClass.REFERER_LEAK: "request would leak OAuth tokens to a third party via the Referer header",
    FindingClass.INTENTIONAL_LEAK: "request sends OAuth tokens to a third party",
    FindingClass.CSRF_THREAT: "OAuth response arrived from an unexpected referer (possible CSRF)",
}


@dataclass(frozen=True)
class MitigationAction:
    verdict: Verdict
    reason_class: Optional[FindingClass] = None
    message: str = ""
    rewritten_url: Optional[str] = None
    applied_policies: tuple[str, ...] = ()

    @classmethod
    def allow(cls, policies: Iterable[str] = ()) -> "MitigationAction":
        return cls(Verdict.ALLOW, applied_policies=tuple(policies))

    def to_dict(self) -> dict:
        doc: dict = {"verdict": self.verdict.value, "appliedPolicies": list(self.applied_policies)}
        if self.reason_class is not None:
            doc["reason"] = self.reason_class.value
        if self.message:
            doc["message"] = self.message
        if self.rewritten_url:
            doc["rewrittenUrl"] = self.rewritten_url
        return doc


@dataclass(frozen=True)
class PolicyConfig:
    https_upgrade_enabled: bool = True
    mode: Mode = Mode.ENFORCE
    whitelist: Whitelist = field(default_factory=Whitelist)
    idp_domains: frozenset = DEFAULT_IDP_DOMAINS


def validate_referer(
    resp: OAuthResponseMeta,
    wl: Whitelist,
    idp_domains: Iterable[str] = DEFAULT_IDP_DOMAINS,
) -> Verdict:
    """Strict referer validation for an OAuth response.

    Responses delivered over plain HTTP are always allowed: the browser
    strips the Referer on an https->http hop, so there is nothing to check.
    ``resp.idp`` is derived from the Referer itself and is therefore not
    trusted here; the acceptable IdP domains come from ``idp_domains``.
    """
    if resp.rp_protocol.strip().lower().rstrip(":") == "http":
        return Verdict.ALLOW
    if not resp.referer:
        return Verdict.BLOCK
    try:
        source = registrable(parse_url(resp.referer).host)
    except (UrlParseError, ValueError):
        return Verdict.BLOCK
    if source == resp.rp_domain or source in wl or source in set(idp_domains):
        return Verdict.ALLOW
    return Verdict.BLOCK


def upgrade_to_https(tx: HttpTransaction) -> HttpTransaction:
    if tx.scheme != "http":
        raise ValueError(f"upgrade_to_https needs an http transaction, got {tx.scheme}")
    url = tx.url
    port = 443 if url.port == 80 else url.port
    return tx.with_url(replace(url, scheme="https", port=port))


def decide(
    findings: list[Finding],
    tx: HttpTransaction,
    is_oauth_response: bool,
    referer_verdict: Optional[Verdict],
    cfg: PolicyConfig,
) -> MitigationAction:
    classes = {f.cls for f in findings}
    policies = []
    action: Optional[MitigationAction] = None

    leaks = sorted(classes & LEAK_CLASSES, key=lambda c: c.value)
    if leaks:
        policies.append("leak-block")
        action = MitigationAction(Verdict.BLOCK, leaks[0], BLOCK_REASONS[leaks[0]])
    elif is_oauth_response and referer_verdict is Verdict.BLOCK:
        policies.append("strict-referer")
        action = MitigationAction(
            Verdict.BLOCK, FindingClass.CSRF_THREAT, BLOCK_REASONS[FindingClass.CSRF_THREAT]
        )
    elif FindingClass.UNSAFE_TRANSFER in classes and cfg.https_upgrade_enabled and tx.scheme == "http":
        policies.append("https-upgrade")
        action = MitigationAction(
            Verdict.UPGRADE,
            FindingClass.UNSAFE_TRANSFER,
            "OAuth response redirected over HTTPS",
            rewritten_url=upgrade_to_https(tx).url.serialize(),
        )

    warn = next((c for c in (FindingClass.IMPERSONATION, FindingClass.FLOW_MISUSE) if c in classes), None)
    if warn is not None:
        policies.append(f"warn:{warn.value}")
        if action is None:
            action = MitigationAction(Verdict.WARN, warn, WARNINGS[warn])

    if action is None:
        return MitigationAction.allow(policies)
    if cfg.mode is Mode.REPORT_ONLY and action.verdict in (Verdict.BLOCK, Verdict.UPGRADE):
        return MitigationAction.allow(policies)
    return replace(action, applied_policies=tuple(policies))
