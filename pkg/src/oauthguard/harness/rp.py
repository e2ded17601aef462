"""Relying-party personas, the SSO proxy-service broker and third-party hosts."""

from __future__ import annotations

import html
import secrets
import threading
from dataclasses import dataclass, field
from typing import Optional
from urllib.parse import urlencode

from ..analyser import FindingClass
from .idp import IDP_ORIGIN, encode_claims, read_id_token, response_type_for
from .net import AppServer, Network, Request, Response, backchannel

TOKENS = ("code", "access_token", "id_token")
FLOWS = ("authorizationCode", "implicit")
SCOPE = "openid email profile"

PROXY_SERVICE_HOST = "login.ssoproxy.test"
PROXY_SERVICE_ORIGIN = f"https://{PROXY_SERVICE_HOST}"
PROXY_SERVICE_CLIENT = "ssoproxy.apps.googleusercontent.test"

_PIXEL = (
    b"GIF89a\x01\x00\x01\x00\x80\x00\x00\x00\x00\x00\xff\xff\xff!\xf9\x04\x01\x00\x00\x00\x00"
    b",\x00\x00\x00\x00\x01\x00\x01\x00\x00\x02\x02D\x01\x00;"
)


@dataclass(frozen=True)
class RpProfile:
    """One RP persona; each flag plants (or avoids) one vulnerability class."""

    name: str
    flow: str = "authorizationCode"
    sends_state: bool = True
    uses_https: bool = True
    https_available: bool = False
    tokens_submitted: tuple[str, ...] = ("code",)
    third_party_resources: tuple[str, ...] = ()
    intentional_leak_target: Optional[str] = None
    via_proxy_service: Optional[str] = None
    submit_method: str = "GET"

    def __post_init__(self):
        object.__setattr__(self, "tokens_submitted", tuple(t for t in TOKENS if t in set(self.tokens_submitted)))
        object.__setattr__(self, "third_party_resources", tuple(self.third_party_resources))

    def validate(self) -> "RpProfile":
        if not self.name or not self.name.replace("-", "").isalnum():
            raise ValueError(f"profile name must be alphanumeric, got {self.name!r}")
        if self.flow not in FLOWS:
            raise ValueError(f"{self.name}: unknown flow {self.flow!r}")
        if not self.tokens_submitted:
            raise ValueError(f"{self.name}: tokensSubmitted must not be empty")
        if self.flow == "implicit" and "access_token" not in self.tokens_submitted:
            raise ValueError(f"{self.name}: implicit flow must submit access_token")
        if self.flow == "authorizationCode" and "code" not in self.tokens_submitted:
            raise ValueError(f"{self.name}: authorizationCode flow must submit code")
        if self.uses_https and self.https_available:
            raise ValueError(f"{self.name}: httpsAvailable only applies to http personas")
        if self.submit_method not in ("GET", "POST"):
            raise ValueError(f"{self.name}: submitMethod must be GET or POST")
        if self.via_proxy_service and not self.uses_https:
            raise ValueError(f"{self.name}: proxy-service personas are served over https")
        return self

    # -- naming -------------------------------------------------------------

    @property
    def host(self) -> str:
        return f"www.{self.name}.test"

    @property
    def domain(self) -> str:
        return f"{self.name}.test"

    @property
    def scheme(self) -> str:
        return "https" if self.uses_https else "http"

    @property
    def origin(self) -> str:
        return f"{self.scheme}://{self.host}"

    @property
    def redirect_uri(self) -> str:
        return f"{self.origin}/google/authcallback"

    @property
    def client_id(self) -> str:
        return f"{self.name}.apps.googleusercontent.test"

    @property
    def response_type(self) -> str:
        return response_type_for(self.tokens_submitted)

    @property
    def fragment_delivery(self) -> bool:
        return self.tokens_submitted != ("code",)

    @property
    def leak_requests(self) -> int:
        """Token-bearing requests the endpoint page causes the browser to send."""
        if self.via_proxy_service or not self._endpoint_url_carries_token:
            return 1 if self.intentional_leak_target else 0
        return len(self.third_party_resources) + (1 if self.intentional_leak_target else 0)

    @property
    def _endpoint_url_carries_token(self) -> bool:
        return not self.fragment_delivery or self.submit_method == "GET"

    def expected_classes(self) -> frozenset:
        """Finding classes the analyser should report for a legitimate flow."""
        if self.via_proxy_service:
            return frozenset()
        out = set()
        if not self.sends_state:
            out.add(FindingClass.CSRF_THREAT)
        if self.tokens_submitted == ("access_token",):
            out.add(FindingClass.IMPERSONATION)
        if len(self.tokens_submitted) >= 2:
            out.add(FindingClass.FLOW_MISUSE)
        if not self.uses_https:
            out.add(FindingClass.UNSAFE_TRANSFER)
        if self.third_party_resources and self._endpoint_url_carries_token:
            out.add(FindingClass.REFERER_LEAK)
        if self.intentional_leak_target:
            out.add(FindingClass.INTENTIONAL_LEAK)
            if self._endpoint_url_carries_token:
                out.add(FindingClass.REFERER_LEAK)
        return frozenset(out)

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "flow": self.flow,
            "sendsState": self.sends_state,
            "usesHttps": self.uses_https,
            "httpsAvailable": self.https_available,
            "tokensSubmitted": list(self.tokens_submitted),
            "thirdPartyResources": list(self.third_party_resources),
            "intentionalLeakTarget": self.intentional_leak_target,
            "viaProxyService": self.via_proxy_service,
            "submitMethod": self.submit_method,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RpProfile":
        return cls(
            name=doc["name"],
            flow=doc.get("flow", "authorizationCode"),
            sends_state=doc.get("sendsState", True),
            uses_https=doc.get("usesHttps", True),
            https_available=doc.get("httpsAvailable", False),
            tokens_submitted=tuple(doc.get("tokensSubmitted", ("code",))),
            third_party_resources=tuple(doc.get("thirdPartyResources", ())),
            intentional_leak_target=doc.get("intentionalLeakTarget"),
            via_proxy_service=doc.get("viaProxyService"),
            submit_method=doc.get("submitMethod", "GET"),
        ).validate()


_LOGIN_PAGE = """<!DOCTYPE html>
<html><head><title>{name}</title></head>
<body>
<h1>{name}</h1>
<a id="signin" href="{href}">Sign in with Google</a>
</body></html>
"""

_RELAY_PAGE = """<!DOCTYPE html>
<html><head><title>Signing in</title></head>
<body>
<p>Signing you in</p>
<script data-fragment-submit="/google/signin" data-method="{method}">
// posts location.hash parameters to the sign-in endpoint
</script>
</body></html>
"""

_ENDPOINT_PAGE = """<!DOCTYPE html>
<html><head><title>Welcome</title></head>
<body>
<h1>Welcome</h1>
<p>Signed in as {email}</p>
{resources}
</body></html>
"""

_FORM_RELAY = """<!DOCTYPE html>
<html><head><title>Continue</title></head>
<body>
<form id="relay" method="POST" action="{action}" data-autosubmit="1">
<input type="hidden" name="id_token" value="{id_token}">
</form>
</body></html>
"""


def _error(text: str, status: int = 400) -> Response:
    return Response.html(f"<h1>Sign-in failed</h1><p>{html.escape(text)}</p>", status)


class RpApp:
    """Server side of one persona; identical behaviour on its http and https listeners."""

    def __init__(self, profile: RpProfile, network: Network):
        self.profile = profile
        self.network = network
        self._sessions: dict[str, dict] = {}
        self._lock = threading.Lock()

    def __call__(self, req: Request) -> Response:
        p = self.profile
        if req.path == "/" and req.method == "GET":
            if p.via_proxy_service:
                href = f"{PROXY_SERVICE_ORIGIN}/start?{urlencode({'rp': p.name})}"
            else:
                href = "/login/google"
            return Response.html(_LOGIN_PAGE.format(name=html.escape(p.name), href=html.escape(href)))
        if req.path == "/login/google" and not p.via_proxy_service:
            return self._start(req)
        if req.path == "/google/authcallback" and not p.via_proxy_service:
            return self._callback(req)
        if req.path == "/google/signin" and not p.via_proxy_service:
            return self._signin(req, req.params)
        if req.path == "/sso/receive" and req.method == "POST" and p.via_proxy_service:
            return self._sso_receive(req)
        if req.path == "/me":
            with self._lock:
                who = self._sessions.get(req.cookies.get("rp_session", ""))
            if who is None:
                return Response.json({"error": "not signed in"}, 401)
            return Response.json(who)
        return Response.html("<h1>Not found</h1>", 404)

    def _start(self, req: Request) -> Response:
        p = self.profile
        params = {
            "client_id": p.client_id,
            "redirect_uri": p.redirect_uri,
            "response_type": p.response_type,
            "scope": SCOPE,
        }
        headers = []
        if p.sends_state:
            state = secrets.token_urlsafe(24)
            params["state"] = state
            headers.append(("Set-Cookie", f"rp_state={state}; Path=/"))
        return Response.redirect(f"{IDP_ORIGIN}/o/oauth2/auth?{urlencode(params)}", headers=headers)

    def _state_ok(self, req: Request, params: dict) -> bool:
        if not self.profile.sends_state:
            return True
        expected = req.cookies.get("rp_state")
        return bool(expected) and params.get("state") == expected

    def _callback(self, req: Request) -> Response:
        if "error" in req.query:
            return _error(req.query["error"])
        if self.profile.fragment_delivery:
            return Response.html(_RELAY_PAGE.format(method=self.profile.submit_method))
        return self._signin(req, req.query)

    def _identity(self, params: dict) -> Optional[dict]:
        p = self.profile
        access_token = params.get("access_token")
        if params.get("code"):
            status, doc = backchannel(
                self.network,
                "POST",
                f"{IDP_ORIGIN}/token",
                form={
                    "grant_type": "authorization_code",
                    "client_id": p.client_id,
                    "code": params["code"],
                    "redirect_uri": p.redirect_uri,
                },
            )
            if status != 200:
                return None
            access_token = doc["access_token"]
        if access_token:
            status, doc = backchannel(self.network, "GET", f"{IDP_ORIGIN}/userinfo", bearer=access_token)
            if status != 200:
                return None
            return {"sub": doc["sub"], "email": doc.get("email", ""), "token": access_token}
        if params.get("id_token"):
            claims = read_id_token(params["id_token"])
            if not claims or claims.get("aud") != p.client_id or claims.get("iss") != IDP_ORIGIN:
                return None
            return {"sub": claims["sub"], "email": claims.get("email", ""), "token": params["id_token"]}
        return None

    def _signin(self, req: Request, params: dict) -> Response:
        p = self.profile
        if not any(params.get(t) for t in TOKENS):
            return _error("no token")
        if not self._state_ok(req, params):
            return _error("state mismatch")
        who = self._identity(params)
        if who is None:
            return _error("token rejected", 401)
        resources = [f'<img src="https://{h}/pixel.gif" alt="">' for h in p.third_party_resources]
        if p.intentional_leak_target:
            q = urlencode({"access_token": who["token"], "site": p.domain})
            resources.append(f'<img src="https://{p.intentional_leak_target}/collect?{html.escape(q)}" alt="">')
        return self._new_session(who, "\n".join(resources))

    def _new_session(self, who: dict, resources: str) -> Response:
        sid = secrets.token_urlsafe(18)
        state = {"rp": self.profile.domain, "sub": who["sub"], "email": who["email"]}
        with self._lock:
            self._sessions[sid] = state
        page = _ENDPOINT_PAGE.format(email=html.escape(who["email"]), resources=resources)
        return Response.html(page, headers=[("Set-Cookie", f"rp_session={sid}; Path=/; HttpOnly")])

    def _sso_receive(self, req: Request) -> Response:
        claims = read_id_token(req.form.get("id_token", ""))
        if not claims or claims.get("iss") != PROXY_SERVICE_ORIGIN or claims.get("aud") != self.profile.domain:
            return _error("bad assertion", 401)
        return self._new_session({"sub": claims["sub"], "email": claims.get("email", "")}, "")


class SsoProxyApp:
    """Broker that runs the code flow itself and relays an assertion to whitelisted RPs."""

    redirect_uri = f"{PROXY_SERVICE_ORIGIN}/callback"

    def __init__(self, network: Network):
        self.network = network
        self.rps: dict[str, str] = {}
        self._relays: dict[str, tuple[str, str]] = {}
        self._lock = threading.Lock()

    def add_rp(self, profile: RpProfile) -> None:
        with self._lock:
            self.rps[profile.name] = profile.origin

    def __call__(self, req: Request) -> Response:
        if req.path == "/start":
            name = req.query.get("rp", "")
            if name not in self.rps:
                return _error("unknown site")
            state = secrets.token_urlsafe(24)
            params = {
                "client_id": PROXY_SERVICE_CLIENT,
                "redirect_uri": self.redirect_uri,
                "response_type": "code",
                "scope": SCOPE,
                "state": state,
            }
            return Response.redirect(
                f"{IDP_ORIGIN}/o/oauth2/auth?{urlencode(params)}",
                headers=[("Set-Cookie", f"sp_state={state}; Path=/"), ("Set-Cookie", f"sp_rp={name}; Path=/")],
            )
        if req.path == "/callback":
            cookies = req.cookies
            if not req.query.get("state") or req.query.get("state") != cookies.get("sp_state"):
                return _error("state mismatch")
            name = cookies.get("sp_rp", "")
            if name not in self.rps or not req.query.get("code"):
                return _error("bad callback")
            status, doc = backchannel(
                self.network,
                "POST",
                f"{IDP_ORIGIN}/token",
                form={
                    "grant_type": "authorization_code",
                    "client_id": PROXY_SERVICE_CLIENT,
                    "code": req.query["code"],
                    "redirect_uri": self.redirect_uri,
                },
            )
            if status != 200:
                return _error("token exchange failed", 502)
            status, info = backchannel(self.network, "GET", f"{IDP_ORIGIN}/userinfo", bearer=doc["access_token"])
            if status != 200:
                return _error("userinfo failed", 502)
            relay_token = encode_claims(
                {"iss": PROXY_SERVICE_ORIGIN, "aud": f"{name}.test", "sub": info["sub"], "email": info.get("email", "")}
            )
            relay = secrets.token_urlsafe(12)
            with self._lock:
                self._relays[relay] = (self.rps[name], relay_token)
            return Response.redirect(f"/relay/{relay}")
        if req.path.startswith("/relay/"):
            with self._lock:
                entry = self._relays.pop(req.path[len("/relay/"):], None)
            if entry is None:
                return _error("unknown relay", 404)
            origin, token = entry
            return Response.html(
                _FORM_RELAY.format(action=html.escape(f"{origin}/sso/receive"), id_token=html.escape(token))
            )
        return Response.html("<h1>Not found</h1>", 404)


class ThirdPartyApp:
    """Catch-all for analytics, ad and tracker hosts: every path is a pixel."""

    def __call__(self, req: Request) -> Response:
        return Response(200, [("Content-Type", "image/gif"), ("Cache-Control", "no-store")], _PIXEL)


@dataclass
class RpEndpoint:
    profile: RpProfile
    app: RpApp
    servers: list[AppServer] = field(default_factory=list)

    @property
    def login_url(self) -> str:
        return f"{self.profile.origin}/"

    def stop(self) -> None:
        for srv in self.servers:
            srv.stop()
        self.servers.clear()


def spawn_rp(profile: RpProfile, env) -> RpEndpoint:
    """Register ``profile`` with the IdP (or broker) and start its listeners."""
    profile.validate()
    app = RpApp(profile, env.network)
    if profile.via_proxy_service:
        env.sso_proxy.add_rp(profile)
    else:
        env.idp_state.register(profile.client_id, profile.redirect_uri)
    for host in profile.third_party_resources:
        env.third_party.add_host(host)
    if profile.intentional_leak_target:
        env.third_party.add_host(profile.intentional_leak_target)
    endpoint = RpEndpoint(profile, app)
    schemes = ["https"] if profile.uses_https else ["http"] + (["https"] if profile.https_available else [])
    try:
        for scheme in schemes:
            endpoint.servers.append(AppServer(env.network, app, scheme, [profile.host]).start())
    except OSError as exc:
        endpoint.stop()
        raise RuntimeError(f"cannot start listeners for {profile.name}: {exc}") from exc
    return endpoint
