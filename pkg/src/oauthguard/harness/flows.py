"""Harness environment and end-to-end sign-in flows."""

from __future__ import annotations

import contextlib
from concurrent.futures import ThreadPoolExecutor
import json
import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional

from ..analyser import Whitelist
from ..capture.proxy import ProxyConfig, ProxyServer
from ..capture.tls import CertificateAuthority
from ..detector import Kind, classify
from ..http_model import HttpTransaction
from ..pipeline import Pipeline
from ..protector import Mode, PolicyConfig
from .agent import Exchange, FlowError, Intercepted, Page, UserAgent
from .idp import IDP_HOST, IdpApp, MockIdpState
from .net import AppServer, Event, Network
from .rp import PROXY_SERVICE_HOST, RpEndpoint, RpProfile, SsoProxyApp, ThirdPartyApp, spawn_rp

log = logging.getLogger(__name__)

LEGITIMATE = "legitimate"
CSRF_FORGED = "csrfForged"
ATTACKER_REFERER = "https://attacker.test/csrf.html"
IDP_DOMAINS = frozenset({"google.test"})


class Harness:
    """IdP, SSO broker and third-party hosts on loopback, plus spawned RPs."""

    def __init__(self, network: Optional[Network] = None):
        self.network = network or Network()
        self.idp_state = MockIdpState()
        self.sso_proxy = SsoProxyApp(self.network)
        self.idp_state.register("ssoproxy.apps.googleusercontent.test", SsoProxyApp.redirect_uri)
        self.third_party = AppServer(self.network, ThirdPartyApp(), "https", ["attacker.test"])
        self._servers = [
            AppServer(self.network, IdpApp(self.idp_state), "https", [IDP_HOST]),
            AppServer(self.network, self.sso_proxy, "https", [PROXY_SERVICE_HOST]),
            self.third_party,
        ]
        self.rps: dict[str, RpEndpoint] = {}
        self._proxy_ca: Optional[CertificateAuthority] = None

    def start(self) -> "Harness":
        for srv in self._servers:
            srv.start()
        return self

    def stop(self) -> None:
        # each shutdown waits for a poll tick, so stop them side by side
        with ThreadPoolExecutor(16) as pool:
            list(pool.map(lambda rp: rp.stop(), self.rps.values()))
            list(pool.map(lambda srv: srv.stop(), self._servers))
        self.rps.clear()
        if self._proxy_ca is not None:
            self._proxy_ca.close()
        self.network.close()

    def __enter__(self) -> "Harness":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def spawn(self, profile: RpProfile) -> RpEndpoint:
        if profile.name in self.rps:
            return self.rps[profile.name]
        rp = spawn_rp(profile, self)
        self.rps[profile.name] = rp
        return rp

    @property
    def whitelist(self) -> Whitelist:
        """Proxy-service broker domains plus the RPs that sign in through them."""
        domains = {"ssoproxy.test"}
        for rp in self.rps.values():
            if rp.profile.via_proxy_service:
                domains.add(rp.profile.via_proxy_service)
                domains.add(rp.profile.domain)
        return Whitelist(domains)

    def policy(self, mode: Mode = Mode.ENFORCE, https_upgrade: bool = True) -> PolicyConfig:
        return PolicyConfig(
            https_upgrade_enabled=https_upgrade, mode=mode, whitelist=self.whitelist, idp_domains=IDP_DOMAINS
        )

    def pipeline(self, mode: Mode = Mode.REPORT_ONLY, https_upgrade: bool = True) -> Pipeline:
        return Pipeline(self.policy(mode, https_upgrade))

    @property
    def proxy_ca(self) -> CertificateAuthority:
        if self._proxy_ca is None:
            self._proxy_ca = CertificateAuthority.create("oauthguard proxy CA")
        return self._proxy_ca

    @contextlib.contextmanager
    def proxy(self, mode: Mode = Mode.ENFORCE, https_upgrade: bool = True) -> Iterator[ProxyServer]:
        """Run an intercepting proxy wired to the harness network."""
        config = ProxyConfig(
            listen="127.0.0.1:0",
            mode=mode,
            https_upgrade_enabled=https_upgrade,
            whitelist=self.whitelist,
            idp_domains=IDP_DOMAINS,
            upstream_cafile=self.network.ca.cafile,
            resolver=self.network.resolve,
        )
        server = ProxyServer(config, Pipeline(config.policy()), ca=self.proxy_ca)
        server.start()
        try:
            yield server
        finally:
            server.stop()

    def user_agent(self, proxy: Optional[ProxyServer] = None, **kw) -> UserAgent:
        if proxy is None:
            return UserAgent(self.network, **kw)
        return UserAgent(self.network, proxy=proxy.address, proxy_cafile=self.proxy_ca.cafile, **kw)


@dataclass
class FlowTranscript:
    profile: RpProfile
    mode: str
    exchanges: list[Exchange] = field(default_factory=list)
    signed_in: Optional[bytes] = None
    final_url: Optional[str] = None
    final_status: Optional[int] = None
    error: Optional[str] = None
    events: list[Event] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def identity(self) -> Optional[dict]:
        return json.loads(self.signed_in) if self.signed_in else None

    def annotated(self) -> list[tuple[HttpTransaction, str]]:
        """Causally ordered transactions, each marked legitimate or forged."""
        return [(ex.transaction(f"{self.profile.name}-{i}"), ex.tag or LEGITIMATE) for i, ex in enumerate(self.exchanges)]

    @property
    def transactions(self) -> list[HttpTransaction]:
        return [tx for tx, _ in self.annotated()]

    def har_entries(self, retain_fragments: bool = False) -> list[dict]:
        return [ex.har(retain_fragments) for ex in self.exchanges]

    def forged(self) -> list[Exchange]:
        return [ex for ex in self.exchanges if ex.tag == CSRF_FORGED]


def _check(page: Page) -> Page:
    if page.status >= 400:
        raise FlowError(f"HTTP {page.status} at {page.url}", page)
    return page


def _sign_in_state(ua: UserAgent, page: Page) -> Optional[bytes]:
    ex = ua.fetch("GET", f"{page.origin}/me")
    return ex.response_body if ex.status == 200 else None


def _is_response_to(host: str):
    def hook(pending) -> bool:
        tx = pending.transaction()
        return tx.url.host == host and classify(tx) is Kind.OAUTH_RESPONSE

    return hook


def _legitimate(ua: UserAgent, rp: RpEndpoint, user: str) -> Page:
    page = _check(ua.navigate("GET", rp.login_url))
    page = _check(ua.follow(page, "signin"))
    return _check(ua.submit(page, "approve", {"subject": user}))


def run_flow(
    rp: RpEndpoint,
    env: Harness,
    mode: str = LEGITIMATE,
    *,
    attacker_referer: Optional[str] = ATTACKER_REFERER,
    proxy: Optional[ProxyServer] = None,
    user: str = "alice",
    retain_fragments: bool = False,
) -> FlowTranscript:
    """Drive one sign-in through ``proxy`` (or directly) and record it.

    In ``csrfForged`` mode an attacker completes the IdP step for their own
    account, keeps the resulting response request, and the victim's browser
    is made to send it with ``attacker_referer`` (``None`` means no Referer).
    """
    if mode not in (LEGITIMATE, CSRF_FORGED):
        raise ValueError(f"unknown flow mode {mode!r}")
    first_event = len(env.network.events)
    ua = env.user_agent(proxy, retain_fragments=retain_fragments)
    transcript = FlowTranscript(rp.profile, mode)
    try:
        if mode == LEGITIMATE:
            page = _legitimate(ua, rp, user)
        else:
            attacker = env.user_agent(None)
            attacker.intercept = _is_response_to(rp.profile.host)
            try:
                _legitimate(attacker, rp, "mallory")
            except Intercepted as caught:
                forged = caught.request
            else:
                raise FlowError("attacker flow produced no OAuth response")
            # victim starts a sign-in, then lands on the attacker's page
            start = _check(ua.navigate("GET", rp.login_url))
            _check(ua.follow(start, "signin"))
            ua.tag = CSRF_FORGED
            page = ua.navigate(
                forged.method, forged.url, referer=attacker_referer, body=forged.body, content_type=forged.content_type
            )
            ua.tag = ""
        transcript.final_url, transcript.final_status = page.url, page.status
        if page.status < 400:
            transcript.signed_in = _sign_in_state(ua, page)
        else:
            transcript.error = f"HTTP {page.status} at {page.url}"
    except FlowError as exc:
        transcript.error = str(exc)
        if exc.page is not None:
            transcript.final_url, transcript.final_status = exc.page.url, exc.page.status
        log.debug("flow for %s truncated: %s", rp.profile.name, exc)
    transcript.exchanges = list(ua.exchanges)
    # IdP events may interleave with concurrent flows; RP events never do
    hosts = {rp.profile.host, IDP_HOST, PROXY_SERVICE_HOST, *rp.profile.third_party_resources}
    transcript.events = [e for e in env.network.events[first_event:] if e.host in hosts]
    return transcript


def run_corpus(
    env: Harness,
    profiles,
    *,
    proxy: Optional[ProxyServer] = None,
    mode: str = LEGITIMATE,
    workers: int = 1,
    **kw,
) -> list[FlowTranscript]:
    """Spawn every persona (if needed) and run one flow against each.

    Transcripts come back in profile order even when ``workers > 1``.
    """
    endpoints = [env.spawn(p) for p in profiles]
    if workers <= 1:
        return [run_flow(rp, env, mode, proxy=proxy, **kw) for rp in endpoints]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda rp: run_flow(rp, env, mode, proxy=proxy, **kw), endpoints))


def scan_transcripts(env: Harness, transcripts, mode: Mode = Mode.REPORT_ONLY) -> Pipeline:
    """Feed recorded traffic through a fresh pipeline, as the HAR scanner would."""
    pipeline = env.pipeline(mode)
    for tr in transcripts:
        for tx in tr.transactions:
            pipeline(tx)
    return pipeline
