import pytest

from oauthguard.analyser import Finding, FindingClass, Whitelist
from oauthguard.detector import OAuthResponseMeta
from oauthguard.protector import (
    MitigationAction,
    Mode,
    PolicyConfig,
    Verdict,
    WARNINGS,
    decide,
    upgrade_to_https,
    validate_referer,
)

from conftest import tx

C = FindingClass


def resp(referer, proto="https:", rp_domain="dropbox.com"):
    return OAuthResponseMeta(
        idp="", rp_domain=rp_domain, rp_host=f"www.{rp_domain}", rp_protocol=proto, code="c", referer=referer
    )


class TestValidateReferer:
    def test_idp(self):
        r = resp("https://accounts.google.com/signin/oauth/oauthchooseaccount?")
        assert validate_referer(r, Whitelist()) is Verdict.ALLOW

    def test_attacker(self):
        assert validate_referer(resp("https://attacker.test/csrf.html"), Whitelist()) is Verdict.BLOCK

    @pytest.mark.parametrize("referer", [None, "", "garbage"])
    def test_missing_or_bad(self, referer):
        assert validate_referer(resp(referer), Whitelist()) is Verdict.BLOCK

    @pytest.mark.parametrize("referer", [None, "https://attacker.test/"])
    def test_http_skipped(self, referer):
        assert validate_referer(resp(referer, proto="http:"), Whitelist()) is Verdict.ALLOW

    def test_whitelisted_broker(self):
        r = resp("https://ssor.tribdss.com/assets/sso_popup.html", rp_domain="chicagotribune.com")
        assert validate_referer(r, Whitelist(["tribdss.com"])) is Verdict.ALLOW
        assert validate_referer(r, Whitelist()) is Verdict.BLOCK

    def test_rp_itself(self):
        assert validate_referer(resp("https://www.dropbox.com/login"), Whitelist()) is Verdict.ALLOW

    def test_idp_set_is_configurable(self):
        r = resp("https://accounts.google.test/consent")
        assert validate_referer(r, Whitelist()) is Verdict.BLOCK
        assert validate_referer(r, Whitelist(), {"google.test"}) is Verdict.ALLOW


class TestUpgrade:
    @pytest.mark.parametrize(
        "raw, expected",
        [
            ("http://rp.test/cb?code=x", "https://rp.test/cb?code=x"),
            ("http://rp.test:80/cb", "https://rp.test:443/cb"),
            ("http://rp.test:8080/cb", "https://rp.test:8080/cb"),
        ],
    )
    def test_examples(self, raw, expected):
        assert upgrade_to_https(tx(raw)).url.serialize(explicit_port=":" in raw[7:].split("/")[0]) == expected

    def test_other_fields_untouched(self):
        t = tx("http://rp.test/cb?code=x#f", "POST", [("Referer", "r")], b"body", content_type="text/plain")
        up = upgrade_to_https(t)
        assert (up.url.scheme, up.url.port) == ("https", 443)
        for name in ("method", "headers", "body", "content_type", "observed_at", "ref"):
            assert getattr(up, name) == getattr(t, name)
        assert (up.url.host, up.url.path, up.url.query, up.url.fragment) == (
            t.url.host, t.url.path, t.url.query, t.url.fragment,
        )

    def test_requires_http(self):
        with pytest.raises(ValueError):
            upgrade_to_https(tx("https://rp.test/cb"))


def f(cls):
    return Finding(cls, "rp.test")


ENFORCE = PolicyConfig()
REPORT = PolicyConfig(mode=Mode.REPORT_ONLY)
HTTP_CB = tx("http://rp.test/cb?code=x")
HTTPS_CB = tx("https://rp.test/cb?code=x")


class TestDecide:
    def test_leak_blocks(self):
        a = decide([f(C.REFERER_LEAK)], HTTPS_CB, False, None, ENFORCE)
        assert (a.verdict, a.reason_class) == (Verdict.BLOCK, C.REFERER_LEAK)

    def test_intentional_leak_blocks(self):
        assert decide([f(C.INTENTIONAL_LEAK)], HTTPS_CB, True, Verdict.ALLOW, ENFORCE).verdict is Verdict.BLOCK

    def test_upgrade(self):
        a = decide([f(C.UNSAFE_TRANSFER)], HTTP_CB, True, Verdict.ALLOW, ENFORCE)
        assert a.verdict is Verdict.UPGRADE
        assert a.rewritten_url == "https://rp.test/cb?code=x"

    def test_upgrade_disabled(self):
        cfg = PolicyConfig(https_upgrade_enabled=False)
        assert decide([f(C.UNSAFE_TRANSFER)], HTTP_CB, True, Verdict.ALLOW, cfg).verdict is Verdict.ALLOW

    def test_impersonation_warns(self):
        a = decide([f(C.IMPERSONATION)], HTTPS_CB, True, Verdict.ALLOW, ENFORCE)
        assert a.verdict is Verdict.WARN
        assert "Google sign-in" in a.message and a.message == WARNINGS[C.IMPERSONATION]

    def test_misuse_warns(self):
        assert decide([f(C.FLOW_MISUSE)], HTTPS_CB, True, Verdict.ALLOW, ENFORCE).verdict is Verdict.WARN

    def test_csrf_referer_block(self):
        a = decide([], HTTPS_CB, True, Verdict.BLOCK, ENFORCE)
        assert (a.verdict, a.reason_class) == (Verdict.BLOCK, C.CSRF_THREAT)

    def test_csrf_detection_alone_allows(self):
        assert decide([f(C.CSRF_THREAT)], HTTPS_CB, True, Verdict.ALLOW, ENFORCE).verdict is Verdict.ALLOW

    def test_priority(self):
        everything = [f(c) for c in C]
        assert decide(everything, HTTP_CB, True, Verdict.BLOCK, ENFORCE).verdict is Verdict.BLOCK
        rest = [f(C.UNSAFE_TRANSFER), f(C.IMPERSONATION)]
        assert decide(rest, HTTP_CB, True, Verdict.BLOCK, ENFORCE).reason_class is C.CSRF_THREAT
        assert decide(rest, HTTP_CB, True, Verdict.ALLOW, ENFORCE).verdict is Verdict.UPGRADE

    def test_report_only_downgrades(self):
        a = decide([f(C.REFERER_LEAK)], HTTPS_CB, False, None, REPORT)
        assert a.verdict is Verdict.ALLOW
        assert a.applied_policies == ("leak-block",)
        assert decide([f(C.UNSAFE_TRANSFER)], HTTP_CB, True, Verdict.ALLOW, REPORT).verdict is Verdict.ALLOW
        assert decide([f(C.IMPERSONATION)], HTTPS_CB, True, Verdict.ALLOW, REPORT).verdict is Verdict.WARN

    def test_block_and_upgrade_exclusive(self):
        a = decide([f(C.REFERER_LEAK), f(C.UNSAFE_TRANSFER)], HTTP_CB, True, Verdict.ALLOW, ENFORCE)
        assert a.verdict is Verdict.BLOCK and a.rewritten_url is None

    def test_to_dict(self):
        a = decide([f(C.UNSAFE_TRANSFER)], HTTP_CB, True, Verdict.ALLOW, ENFORCE)
        assert a.to_dict() == {
            "verdict": "UpgradeToHttps",
            "appliedPolicies": ["https-upgrade"],
            "reason": "UnsafeTransfer",
            "message": a.message,
            "rewrittenUrl": "https://rp.test/cb?code=x",
        }
        assert MitigationAction.allow().to_dict() == {"verdict": "Allow", "appliedPolicies": []}
