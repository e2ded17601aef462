"""Detector -> analyser -> protector, shared by the HAR scanner and the proxy."""

from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, replace
from typing import Optional

from .analyser import Finding, analyse_response, detect_referer_leak
from .detector import (
    Kind,
    SessionStore,
    classify,
    extract_request_meta,
    extract_response_meta,
)
from .http_model import HttpTransaction, UrlParseError, parse_url, registrable
from .protector import MitigationAction, PolicyConfig, Verdict, decide, validate_referer
from .report import Report

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Outcome:
    tx: HttpTransaction
    kind: Kind
    findings: tuple[Finding, ...]
    action: MitigationAction


class Pipeline:
    """Stateful per-run processor; safe to call from several threads."""

    def __init__(self, cfg: Optional[PolicyConfig] = None, store: Optional[SessionStore] = None):
        self.cfg = cfg or PolicyConfig()
        self.store = store if store is not None else SessionStore()
        self.report = Report()
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def _idp_domains(self, req) -> set[str]:
        domains = set(self.cfg.idp_domains)
        if req is not None:
            try:
                domains.add(registrable(parse_url(req.idp).host))
            except (UrlParseError, ValueError):
                pass
        return domains

    def process(self, tx: HttpTransaction) -> Outcome:
        if not tx.ref:
            with self._lock:
                tx = replace(tx, ref=f"tx-{next(self._ids)}")
        kind = classify(tx)
        findings: list[Finding] = []
        referer_verdict = None
        if kind is Kind.OAUTH_REQUEST:
            self.store.store(extract_request_meta(tx))
        elif kind is Kind.OAUTH_RESPONSE:
            resp = extract_response_meta(tx)
            req = self.store.lookup(resp.rp_domain)
            findings.extend(analyse_response(req, resp, self.cfg.whitelist, tx.ref))
            referer_verdict = validate_referer(resp, self.cfg.whitelist, self._idp_domains(req))
        leak = detect_referer_leak(tx)
        if leak is not None:
            findings.append(leak)
        action = decide(findings, tx, kind is Kind.OAUTH_RESPONSE, referer_verdict, self.cfg)
        if action.verdict is not Verdict.ALLOW:
            log.info("%s %s %s -> %s", tx.ref, tx.method, tx.url.origin + tx.url.path, action.verdict)
        outcome = Outcome(tx, kind, tuple(findings), action)
        self.report.add(outcome)
        return outcome

    def __call__(self, tx: HttpTransaction) -> Outcome:
        return self.process(tx)
