"""Mock Google-style identity provider.

The protocol logic lives on :class:`MockIdpState` and is usable without any
sockets; :class:`IdpApp` wraps it as an HTTP app for :class:`AppServer`.
"""

from __future__ import annotations

import base64
import html
import json
import secrets
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional
from urllib.parse import urlencode

from .net import Request, Response

IDP_HOST = "accounts.google.test"
IDP_ORIGIN = f"https://{IDP_HOST}"
CODE_TTL = 600.0

USERS = {
    "alice": {"sub": "1001", "email": "alice@mail.test", "name": "Alice Example"},
    "mallory": {"sub": "6666", "email": "mallory@mail.test", "name": "Mallory Attacker"},
}

# response_type keyword for each token an RP wants delivered
RESPONSE_TYPE_WORDS = {"code": "code", "access_token": "token", "id_token": "id_token"}


class IdpError(Exception):
    """Protocol failure; ``status`` is the HTTP status the endpoint returns."""

    def __init__(self, error: str, detail: str = "", status: int = 400):
        super().__init__(f"{error}: {detail}" if detail else error)
        self.error = error
        self.detail = detail
        self.status = status


def response_type_for(tokens) -> str:
    order = ("code", "access_token", "id_token")
    return " ".join(RESPONSE_TYPE_WORDS[t] for t in order if t in set(tokens))


def encode_claims(claims: dict) -> str:
    """Unsigned base64url JSON claims (no signature machinery)."""
    raw = json.dumps(claims, sort_keys=True, separators=(",", ":")).encode()
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode()


def make_id_token(subject: dict, audience: str) -> str:
    return encode_claims({"iss": IDP_ORIGIN, "aud": audience, "sub": subject["sub"], "email": subject["email"]})


def read_id_token(token: str) -> Optional[dict]:
    try:
        raw = base64.urlsafe_b64decode(token + "=" * (-len(token) % 4))
        claims = json.loads(raw)
    except (ValueError, TypeError):
        return None
    return claims if isinstance(claims, dict) else None


@dataclass
class Client:
    redirect_uri: str
    client_secret: Optional[str] = None


@dataclass
class IssuedCode:
    client_id: str
    redirect_uri: str
    scope: str
    subject: str
    issued_at: float
    consumed: bool = False


@dataclass
class MockIdpState:
    registered_clients: dict[str, Client] = field(default_factory=dict)
    issued_codes: dict[str, IssuedCode] = field(default_factory=dict)
    issued_tokens: dict[str, dict] = field(default_factory=dict)
    clock: Callable[[], float] = time.monotonic
    code_ttl: float = CODE_TTL

    def __post_init__(self):
        self._lock = threading.Lock()

    def register(self, client_id: str, redirect_uri: str, client_secret: Optional[str] = None) -> None:
        with self._lock:
            self.registered_clients[client_id] = Client(redirect_uri, client_secret)

    def _client(self, client_id: Optional[str]) -> Client:
        client = self.registered_clients.get(client_id or "")
        if client is None:
            raise IdpError("invalid_client", f"unknown client_id {client_id!r}")
        return client

    def _new_token(self, scope: str, subject: str) -> str:
        token = "ya29." + secrets.token_urlsafe(24)
        attrs = dict(USERS[subject])
        self.issued_tokens[token] = {"scope": scope, "subject": attrs}
        return token

    def authorize(self, params: dict, subject: str = "alice") -> str:
        """Validate an authorization request and return the redirect Location."""
        for name in ("client_id", "response_type", "redirect_uri"):
            if not params.get(name):
                raise IdpError("invalid_request", f"missing {name}")
        client = self._client(params["client_id"])
        if params["redirect_uri"] != client.redirect_uri:
            raise IdpError("redirect_uri_mismatch", params["redirect_uri"])
        words = params["response_type"].split()
        if not words or any(w not in RESPONSE_TYPE_WORDS.values() for w in words):
            raise IdpError("unsupported_response_type", params["response_type"])
        if subject not in USERS:
            raise IdpError("access_denied", f"unknown user {subject!r}")
        scope = params.get("scope", "")
        out: list[tuple[str, str]] = []
        with self._lock:
            if "code" in words:
                code = "4/" + secrets.token_urlsafe(32)
                self.issued_codes[code] = IssuedCode(
                    params["client_id"], client.redirect_uri, scope, subject, self.clock()
                )
                out.append(("code", code))
            if "token" in words:
                out.append(("access_token", self._new_token(scope, subject)))
                out.append(("token_type", "Bearer"))
            if "id_token" in words:
                out.append(("id_token", make_id_token(USERS[subject], params["client_id"])))
        if params.get("state"):
            out.append(("state", params["state"]))
        if words == ["code"]:
            sep = "&" if "?" in client.redirect_uri else "?"
            return f"{client.redirect_uri}{sep}{urlencode(out)}"
        return f"{client.redirect_uri}#{urlencode(out)}"

    def token(self, params: dict) -> dict:
        """Exchange an authorization code; codes are single-use and expire."""
        if params.get("grant_type") != "authorization_code":
            raise IdpError("unsupported_grant_type", str(params.get("grant_type")))
        client = self._client(params.get("client_id"))
        if client.client_secret is not None and params.get("client_secret") != client.client_secret:
            raise IdpError("invalid_client", "bad client_secret", 401)
        with self._lock:
            issued = self.issued_codes.get(params.get("code") or "")
            if issued is None or issued.consumed:
                raise IdpError("invalid_grant", "unknown or used code")
            if issued.client_id != params["client_id"]:
                raise IdpError("invalid_grant", "code issued to another client")
            if params.get("redirect_uri") != issued.redirect_uri:
                raise IdpError("invalid_grant", "redirect_uri mismatch")
            if self.clock() - issued.issued_at >= self.code_ttl:
                issued.consumed = True
                raise IdpError("invalid_grant", "code expired")
            issued.consumed = True
            token = self._new_token(issued.scope, issued.subject)
        return {"access_token": token, "token_type": "Bearer", "expires_in": 3600, "scope": issued.scope}

    def userinfo(self, access_token: Optional[str]) -> dict:
        with self._lock:
            record = self.issued_tokens.get(access_token or "")
        if record is None:
            raise IdpError("invalid_token", "", 401)
        scopes = set(record["scope"].split())
        subject = record["subject"]
        info = {"sub": subject["sub"]}
        if "email" in scopes:
            info["email"] = subject["email"]
        if "profile" in scopes:
            info["name"] = subject["name"]
        return info


def idp_authorize(state: MockIdpState, params: dict, subject: str = "alice") -> str:
    return state.authorize(params, subject)


def idp_token(state: MockIdpState, params: dict) -> dict:
    return state.token(params)


def idp_userinfo(state: MockIdpState, access_token: Optional[str]) -> dict:
    return state.userinfo(access_token)


_CONSENT = """<!DOCTYPE html>
<html><head><title>Choose an account</title></head>
<body>
<h1>Sign in to {client}</h1>
<form id="approve" method="POST" action="/signin/oauth/approve">
<input type="hidden" name="session" value="{session}">
<input type="text" name="subject" value="">
<button type="submit">Continue</button>
</form>
</body></html>
"""

_ERROR = """<!DOCTYPE html>
<html><head><title>Error</title></head>
<body><h1>{error}</h1><p>{detail}</p></body></html>
"""


class IdpApp:
    """HTTP front end: authorize, consent, token and userinfo endpoints."""

    def __init__(self, state: MockIdpState):
        self.state = state
        self._pending: dict[str, dict] = {}
        self._lock = threading.Lock()

    def _error_page(self, exc: IdpError) -> Response:
        body = _ERROR.format(error=html.escape(exc.error), detail=html.escape(exc.detail))
        return Response.html(body, exc.status)

    def __call__(self, req: Request) -> Response:
        try:
            if req.path == "/o/oauth2/auth" and req.method == "GET":
                return self._authorize(req)
            if req.path == "/signin/oauth/oauthchooseaccount" and req.method == "GET":
                return self._consent(req)
            if req.path == "/signin/oauth/approve" and req.method == "POST":
                return self._approve(req)
            if req.path == "/token" and req.method == "POST":
                return Response.json(self.state.token(req.form))
            if req.path == "/userinfo":
                auth = req.headers.get("Authorization") or ""
                token = auth[7:] if auth.startswith("Bearer ") else req.query.get("access_token")
                return Response.json(self.state.userinfo(token))
        except IdpError as exc:
            if req.path in ("/token", "/userinfo"):
                return Response.json({"error": exc.error, "error_description": exc.detail}, exc.status)
            return self._error_page(exc)
        return Response.html("<h1>Not found</h1>", 404)

    def _authorize(self, req: Request) -> Response:
        params = dict(req.query)
        # validate up front; the redirect itself is minted after consent
        for name in ("client_id", "response_type", "redirect_uri"):
            if not params.get(name):
                raise IdpError("invalid_request", f"missing {name}")
        client = self.state._client(params["client_id"])
        if params["redirect_uri"] != client.redirect_uri:
            raise IdpError("redirect_uri_mismatch", params["redirect_uri"])
        session = secrets.token_urlsafe(12)
        with self._lock:
            self._pending[session] = params
        return Response.redirect(f"/signin/oauth/oauthchooseaccount?session={session}")

    def _consent(self, req: Request) -> Response:
        session = req.query.get("session", "")
        with self._lock:
            params = self._pending.get(session)
        if params is None:
            raise IdpError("invalid_request", "unknown session")
        return Response.html(
            _CONSENT.format(client=html.escape(params["client_id"]), session=html.escape(session))
        )

    def _approve(self, req: Request) -> Response:
        form = req.form
        with self._lock:
            params = self._pending.pop(form.get("session", ""), None)
        if params is None:
            raise IdpError("invalid_request", "unknown session")
        location = self.state.authorize(params, form.get("subject") or "alice")
        return Response.redirect(location)
