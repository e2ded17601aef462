import random
import string

import pytest

from oauthguard.http_model import (
    Headers,
    HttpTransaction,
    UrlParseError,
    extract_params,
    parse_url,
    registrable,
    registrable_domain,
)

from conftest import tx


def reference_percent_decode(text):
    """Byte-level decoder written independently of urllib."""
    out = bytearray()
    i = 0
    raw = text.encode("utf-8")
    while i < len(raw):
        c = raw[i]
        if c == ord("+"):
            out.append(0x20)
            i += 1
        elif c == ord("%") and len(raw[i + 1 : i + 3]) == 2 and all(chr(b) in string.hexdigits for b in raw[i + 1 : i + 3]):
            out.append(int(raw[i + 1 : i + 3], 16))
            i += 3
        else:
            out.append(c)
            i += 1
    return out.decode("utf-8", "replace")


def _random_encoded_value(rng):
    alphabet = string.ascii_letters + string.digits + "-._~/+=:?@é ñ✓"
    plain = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 24)))
    parts = []
    for ch in plain:
        roll = rng.random()
        if ch == " ":
            parts.append(rng.choice(["+", "%20"]))
        elif ch in "&#=+%" or ord(ch) > 127 or roll < 0.4:
            parts.append("".join(f"%{b:02{rng.choice('xX')}}" for b in ch.encode("utf-8")))
        else:
            parts.append(ch)
    return "".join(parts)


class TestParseUrl:
    def test_dropbox_request_url(self):
        u = parse_url("https://accounts.google.com/o/oauth2/auth")
        assert (u.scheme, u.host, u.port, u.path, u.query) == ("https", "accounts.google.com", 443, "/o/oauth2/auth", ())
        assert u.fragment is None

    def test_default_http_port(self):
        u = parse_url("http://rp.test/cb")
        assert (u.scheme, u.host, u.port, u.path) == ("http", "rp.test", 80, "/cb")

    def test_percent_decoded_query(self):
        assert parse_url("https://rp.test/cb?code=a%2Fb").query == (("code", "a/b"),)

    def test_percent_decoding_matches_reference_on_random_corpus(self):
        rng = random.Random(20170302)
        for _ in range(100):
            value = _random_encoded_value(rng)
            name = rng.choice(["code", "state", "x", "access_token"])
            parsed = parse_url(f"https://rp.test/cb?{name}={value}").query
            assert parsed == ((name, reference_percent_decode(value)),), value

    def test_host_lowercased_and_fragment_verbatim(self):
        u = parse_url("HTTPS://WWW.Dropbox.COM:8443/a?x=1#access_token=T%2F&y")
        assert u.host == "www.dropbox.com"
        assert u.port == 8443
        assert u.fragment == "access_token=T%2F&y"

    def test_empty_fragment_kept_distinct_from_absent(self):
        assert parse_url("https://rp.test/#").fragment == ""
        assert parse_url("https://rp.test/").fragment is None

    @pytest.mark.parametrize(
        "raw, component",
        [("", "url"), ("ftp://x.test/", "scheme"), ("https:///nohost", "host"), ("https://x.test:99999/", "port")],
    )
    def test_errors_name_the_component(self, raw, component):
        with pytest.raises(UrlParseError) as info:
            parse_url(raw)
        assert info.value.component == component

    @pytest.mark.parametrize(
        "raw",
        [
            "https://rp.test/cb?code=a%2Fb&state=x+y#frag",
            "http://rp.test:8080/a/b?x=1&x=2",
            "https://rp.test/",
            "https://[::1]:8443/p?q=%E2%9C%93",
        ],
    )
    def test_serialize_round_trip(self, raw):
        u = parse_url(raw)
        assert parse_url(u.serialize()) == u


class TestHeaders:
    def test_case_insensitive(self):
        h = Headers([("Referer", "a"), ("X", "1"), ("x", "2")])
        assert h.get("referer") == h.get("REFERER") == "a"
        assert h.get_all("X") == ["1", "2"]
        assert "missing" not in h

    def test_transaction_scheme_follows_url(self):
        t = tx("http://rp.test/cb", headers=[("referer", "https://idp.test/")])
        assert t.scheme == "http"
        assert t.referer == "https://idp.test/"


class TestExtractParams:
    def test_dropbox_callback(self):
        t = tx(
            "https://www.dropbox.com/google/authcallback?code=4/gKfVUfaN5n-9tmo3RYnYActwrYWIXAwnsXRA7fcUl6E"
            "&state=ABAm_Lg53XmdhkeMTOmFKH5RULv2egJHsRXl9KHhp6Tazub"
        )
        assert extract_params(t) == {
            "code": "4/gKfVUfaN5n-9tmo3RYnYActwrYWIXAwnsXRA7fcUl6E",
            "state": "ABAm_Lg53XmdhkeMTOmFKH5RULv2egJHsRXl9KHhp6Tazub",
        }

    def test_empty(self):
        assert extract_params(tx("https://rp.test/cb")) == {}

    def test_fragment(self):
        t = tx("https://rp.test/cb#access_token=T&token_type=bearer")
        assert extract_params(t) == {"access_token": "T", "token_type": "bearer"}

    def test_fragment_parsed_like_a_query_string(self):
        rng = random.Random(50)
        for _ in range(50):
            pairs = [
                (rng.choice(["access_token", "id_token", "state", "token_type", "expires_in"]), _random_encoded_value(rng))
                for _ in range(rng.randint(1, 5))
            ]
            frag = "&".join(f"{k}={v}" for k, v in pairs)
            as_query = parse_url(f"https://rp.test/cb?{frag}").query_dict()
            assert extract_params(tx(f"https://rp.test/cb#{frag}")) == as_query

    def test_priority_query_fragment_form_json(self):
        t = tx(
            "https://rp.test/cb?code=q#code=f&state=f",
            "POST",
            body=b"code=b&state=b&id_token=b",
            content_type="application/x-www-form-urlencoded",
        )
        assert extract_params(t) == {"code": "q", "state": "f", "id_token": "b"}

    def test_json_top_level_strings_only(self):
        body = b'{"code": "c", "n": 1, "nested": {"access_token": "t"}, "id_token": "i"}'
        t = tx("https://rp.test/cb", "POST", body=body, content_type="application/json")
        assert extract_params(t) == {"code": "c", "id_token": "i"}

    @pytest.mark.parametrize(
        "body, ctype",
        [(b"\xff\xfe\x00garbage", "application/x-www-form-urlencoded"), (b"{not json", "application/json"),
         (b"[1, 2]", "application/json"), (b"\x00\x01", None), (b"x" * 10, "image/png")],
    )
    def test_never_raises_on_junk_bodies(self, body, ctype):
        assert isinstance(extract_params(tx("https://rp.test/cb", "POST", body=body, content_type=ctype)), dict)


class TestRegistrableDomain:
    @pytest.mark.parametrize(
        "host, expected",
        [
            ("www.dropbox.com", "dropbox.com"),
            ("signin.chicagotribune.com", "chicagotribune.com"),
            ("foo.example.co.uk", "example.co.uk"),
            ("WWW.Example.CO.UK.", "example.co.uk"),
            ("127.0.0.1", "127.0.0.1"),
            ("::1", "::1"),
            ("www.rp001.test", "rp001.test"),
        ],
    )
    def test_examples(self, host, expected):
        d = registrable_domain(host)
        assert d.registrable == expected
        assert d.host.endswith(d.registrable)

    def test_exception_and_wildcard_rules(self):
        # "*.ck" with "!www.ck" in the list
        assert registrable("a.b.foo.ck") == "b.foo.ck"
        assert registrable("www.ck") == "www.ck"

    def test_idempotent(self):
        for h in ("a.b.example.co.uk", "x.blogspot.com", "signin.chicagotribune.com"):
            assert registrable(registrable(h)) == registrable(h)

    @pytest.mark.parametrize("host", ["", "  ", "."])
    def test_empty_host(self, host):
        with pytest.raises(ValueError):
            registrable_domain(host)

    def test_transaction_is_frozen(self):
        t = HttpTransaction.build("get", "https://rp.test/")
        assert t.method == "GET"
        with pytest.raises(AttributeError):
            t.method = "POST"
