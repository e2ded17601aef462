import json
import re
from urllib.parse import parse_qsl, urlsplit

import pytest

from oauthguard.analyser import FindingClass
from oauthguard.harness import (
    CSRF_FORGED,
    STUDY_SPEC,
    CorpusSpec,
    CorpusSpecError,
    MockIdpState,
    RpProfile,
    generate_corpus,
    idp_authorize,
    idp_token,
    idp_userinfo,
    planted_counts,
    run_flow,
    scan_transcripts,
)
from oauthguard.harness.corpus import expected_leak_requests
from oauthguard.harness.idp import IDP_HOST, IdpError, read_id_token
from oauthguard.protector import Mode

C = FindingClass
RP_CB = "https://www.rp.test/google/authcallback"


@pytest.fixture
def idp():
    clock = [0.0]
    state = MockIdpState(clock=lambda: clock[0])
    state.register("rp-client", RP_CB)
    state.register("secret-client", RP_CB, client_secret="s3")
    state.tick = clock
    return state


def _authorize(idp, **kw):
    params = {"client_id": "rp-client", "response_type": "code", "redirect_uri": RP_CB, "scope": "openid email"}
    params.update(kw)
    return idp_authorize(idp, params)


def _code(location):
    return dict(parse_qsl(urlsplit(location).query))["code"]


def _exchange(idp, code, **kw):
    params = {"grant_type": "authorization_code", "client_id": "rp-client", "code": code, "redirect_uri": RP_CB}
    params.update(kw)
    return idp_token(idp, params)


class TestIdp:
    def test_code_response_echoes_state(self, idp):
        loc = _authorize(idp, state="s")
        split = urlsplit(loc)
        assert f"{split.scheme}://{split.netloc}{split.path}" == RP_CB
        q = dict(parse_qsl(split.query))
        assert q["state"] == "s" and q["code"].startswith("4/")
        assert split.fragment == ""

    def test_token_response_in_fragment(self, idp):
        loc = _authorize(idp, response_type="token")
        split = urlsplit(loc)
        assert split.query == ""
        assert dict(parse_qsl(split.fragment))["access_token"].startswith("ya29.")

    def test_id_token_claims(self, idp):
        frag = dict(parse_qsl(urlsplit(_authorize(idp, response_type="code id_token")).fragment))
        claims = read_id_token(frag["id_token"])
        assert claims["aud"] == "rp-client" and claims["sub"] == "1001"
        assert "code" in frag

    def test_wrong_redirect_uri_issues_nothing(self, idp):
        with pytest.raises(IdpError) as info:
            _authorize(idp, redirect_uri="https://evil.test/cb")
        assert info.value.error == "redirect_uri_mismatch"
        assert idp.issued_codes == {}

    @pytest.mark.parametrize("missing", ["client_id", "response_type", "redirect_uri"])
    def test_missing_params(self, idp, missing):
        with pytest.raises(IdpError):
            _authorize(idp, **{missing: ""})

    def test_unknown_client(self, idp):
        with pytest.raises(IdpError):
            _authorize(idp, client_id="nobody")

    def test_token_exchange_then_userinfo(self, idp):
        doc = _exchange(idp, _code(_authorize(idp, scope="openid email profile")))
        assert idp_userinfo(idp, doc["access_token"]) == {"sub": "1001", "email": "alice@mail.test", "name": "Alice Example"}

    def test_userinfo_respects_scope(self, idp):
        doc = _exchange(idp, _code(_authorize(idp, scope="openid")))
        assert idp_userinfo(idp, doc["access_token"]) == {"sub": "1001"}

    def test_code_is_single_use(self, idp):
        code = _code(_authorize(idp))
        _exchange(idp, code)
        with pytest.raises(IdpError):
            _exchange(idp, code)
        assert len(idp.issued_tokens) == 1

    def test_code_expires(self, idp):
        code = _code(_authorize(idp))
        idp.tick[0] += 600
        with pytest.raises(IdpError, match="expired"):
            _exchange(idp, code)

    @pytest.mark.parametrize(
        "override",
        [{"redirect_uri": "https://www.rp.test/other"}, {"client_id": "nobody"}, {"grant_type": "password"}, {"code": "4/forged"}],
    )
    def test_token_checks(self, idp, override):
        code = _code(_authorize(idp))
        with pytest.raises(IdpError):
            _exchange(idp, **{"code": code, **override})
        # a failed check does not burn a code issued to someone else
        if "code" not in override and "client_id" not in override:
            assert _exchange(idp, code)["access_token"]

    def test_client_secret_checked_when_registered(self, idp):
        code = _code(_authorize(idp, client_id="secret-client"))
        with pytest.raises(IdpError):
            _exchange(idp, code, client_id="secret-client", client_secret="wrong")
        assert _exchange(idp, code, client_id="secret-client", client_secret="s3")

    def test_code_bound_to_client(self, idp):
        idp.register("other", RP_CB)
        code = _code(_authorize(idp))
        with pytest.raises(IdpError):
            _exchange(idp, code, client_id="other")

    @pytest.mark.parametrize("token", ["", None, "ya29.unknown"])
    def test_userinfo_rejects(self, idp, token):
        with pytest.raises(IdpError) as info:
            idp_userinfo(idp, token)
        assert info.value.status == 401


class TestProfiles:
    @pytest.mark.parametrize(
        "kw",
        [
            {"tokens_submitted": ()},
            {"flow": "implicit", "tokens_submitted": ("id_token",)},
            {"flow": "authorizationCode", "tokens_submitted": ("access_token",)},
            {"https_available": True},
            {"flow": "hybrid"},
            {"uses_https": False, "via_proxy_service": "ssoproxy.test"},
            {"name": "bad name"},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            RpProfile(**{"name": "p", **kw}).validate()

    def test_dict_round_trip(self):
        p = RpProfile("issuu", flow="implicit", sends_state=False, tokens_submitted=("access_token",),
                      third_party_resources=("optimizely.test", "bing.test"))
        doc = p.to_dict()
        assert doc["tokensSubmitted"] == ["access_token"] and doc["sendsState"] is False
        assert RpProfile.from_dict(json.loads(json.dumps(doc))) == p


ISSUU = RpProfile(
    "issuu",
    flow="implicit",
    sends_state=False,
    tokens_submitted=("access_token",),
    third_party_resources=("optimizely.test", "bing.test", "licdn.test", "quantserver.test"),
)

GROUND_TRUTH = [
    RpProfile("secure"),
    ISSUU,
    RpProfile("httponly", uses_https=False),
    RpProfile("httpup", uses_https=False, https_available=True, sends_state=False),
    RpProfile("hybrid", tokens_submitted=("code", "id_token")),
    RpProfile("triple", tokens_submitted=("code", "access_token", "id_token"), submit_method="POST"),
    RpProfile("idtok", flow="implicit", tokens_submitted=("access_token", "id_token")),
    RpProfile("postimpl", flow="implicit", tokens_submitted=("access_token",), third_party_resources=("bing.test",),
              submit_method="POST"),
    RpProfile("tracked", intentional_leak_target="collect.tracker.test", third_party_resources=("licdn.test",)),
    RpProfile("brokered", via_proxy_service="ssoproxy.test"),
    RpProfile("plainleak", uses_https=False, sends_state=False, third_party_resources=("bing.test",)),
]


class TestFlows:
    def test_secure_flow_is_clean_and_signed_in(self, env):
        tr = run_flow(env.spawn(RpProfile("secure")), env)
        assert tr.ok, tr.error
        assert tr.identity == {"email": "alice@mail.test", "rp": "secure.test", "sub": "1001"}
        assert scan_transcripts(env, [tr]).report.findings == []

    def test_issuu_like(self, env):
        tr = run_flow(env.spawn(ISSUU), env)
        findings = scan_transcripts(env, [tr]).report.findings
        assert sorted(f.cls.value for f in findings) == ["CsrfThreat", "Impersonation"] + ["RefererLeak"] * 4

    @pytest.mark.parametrize("profile", GROUND_TRUTH, ids=lambda p: p.name)
    def test_ground_truth(self, env, profile):
        tr = run_flow(env.spawn(profile), env)
        assert tr.ok, tr.error
        report = scan_transcripts(env, [tr]).report
        assert {f.cls for f in report.findings} == profile.expected_classes()
        leaking = {f.transaction_ref for f in report.findings if f.cls in (C.REFERER_LEAK, C.INTENTIONAL_LEAK)}
        assert len(leaking) == profile.leak_requests

    def test_code_flow_step_order(self, env):
        rp = env.spawn(RpProfile("ordered"))
        tr = run_flow(rp, env)
        seq = {}
        for e in tr.events:
            key = (e.host, e.path.split("?")[0])
            seq.setdefault(key, e.seq)
        authorize = seq[(IDP_HOST, "/o/oauth2/auth")]
        response = seq[(rp.profile.host, "/google/authcallback")]
        token = seq[(IDP_HOST, "/token")]
        userinfo = seq[(IDP_HOST, "/userinfo")]
        assert authorize < response < token < userinfo

    def test_legitimate_response_referer_is_idp(self, env):
        tr = run_flow(env.spawn(RpProfile("refcheck")), env)
        cb = next(ex for ex in tr.exchanges if "/google/authcallback" in ex.url)
        referer = dict((k.lower(), v) for k, v in cb.request_headers)["referer"]
        assert urlsplit(referer).hostname == IDP_HOST

    def test_http_rp_gets_no_referer(self, env):
        tr = run_flow(env.spawn(RpProfile("norefhttp", uses_https=False)), env)
        cb = next(ex for ex in tr.exchanges if "/google/authcallback" in ex.url)
        assert "referer" not in {k.lower() for k, _ in cb.request_headers}

    def test_forged_flow_signs_victim_in_as_attacker(self, env):
        rp = env.spawn(RpProfile("forgeme", sends_state=False))
        tr = run_flow(rp, env, CSRF_FORGED)
        assert tr.ok
        assert tr.identity["sub"] == "6666"
        (forged,) = tr.forged()
        assert dict(forged.request_headers)["Referer"] == "https://attacker.test/csrf.html"
        assert [tag for _, tag in tr.annotated()].count(CSRF_FORGED) == 1

    def test_forged_flow_against_https_rp_is_blocked(self, env):
        rp = env.spawn(RpProfile("forgeblock", sends_state=False))
        with env.proxy() as px:
            tr = run_flow(rp, env, CSRF_FORGED, proxy=px)
            empty = run_flow(rp, env, CSRF_FORGED, proxy=px, attacker_referer=None)
        assert tr.forged()[0].status == 403 and not tr.ok
        assert empty.forged()[0].status == 403
        assert "referer" not in {k.lower() for k, _ in empty.forged()[0].request_headers}

    def test_forged_flow_against_http_rp_passes(self, env):
        rp = env.spawn(RpProfile("forgehttp", sends_state=False, uses_https=False))
        with env.proxy(https_upgrade=False) as px:
            tr = run_flow(rp, env, CSRF_FORGED, proxy=px)
        assert tr.ok and tr.identity["sub"] == "6666"

    def test_state_defeats_forgery(self, env):
        tr = run_flow(env.spawn(RpProfile("stateful")), env, CSRF_FORGED)
        assert not tr.ok and tr.final_status == 400

    def test_unreachable_rp_truncates_with_marker(self, env):
        rp = env.spawn(RpProfile("vanish"))
        rp.stop()
        tr = run_flow(rp, env)
        assert not tr.ok and "ConnectionRefusedError" in tr.error

    def test_unknown_mode(self, env):
        with pytest.raises(ValueError):
            run_flow(env.spawn(RpProfile("secure")), env, "replay")

    def test_report_only_scan_mode(self, env):
        tr = run_flow(env.spawn(ISSUU), env)
        assert scan_transcripts(env, [tr], Mode.ENFORCE).report.actions("Block") == 4


class TestCorpus:
    def test_study_spec_tallies(self):
        profiles = generate_corpus(STUDY_SPEC, seed=1)
        assert len(profiles) == 137
        assert planted_counts(profiles) == {
            "csrf": 53, "misuse": 21, "impersonation": 13, "leaks": 9, "intentional": 2, "http": 13, "vulnerable": 69,
        }
        assert expected_leak_requests(profiles) == 75
        http = [p for p in profiles if not p.uses_https]
        assert sum(p.https_available for p in http) == 8
        assert sum(not p.sends_state for p in http) == 5
        assert sum(bool(p.via_proxy_service) for p in profiles) == 11

    def test_seeded_determinism(self):
        assert generate_corpus(STUDY_SPEC, seed=3) == generate_corpus(STUDY_SPEC, seed=3)
        assert generate_corpus(STUDY_SPEC, seed=3) != generate_corpus(STUDY_SPEC, seed=4)

    @pytest.mark.parametrize("seed", range(5))
    def test_tallies_hold_for_any_seed(self, seed):
        counts = planted_counts(generate_corpus(STUDY_SPEC, seed))
        assert (counts["csrf"], counts["vulnerable"]) == (53, 69)

    def test_all_zero_spec(self):
        profiles = generate_corpus(CorpusSpec(total=137))
        assert len(profiles) == 137
        assert all(not p.expected_classes() for p in profiles)

    def test_impersonation_above_misuse(self):
        with pytest.raises(CorpusSpecError, match="impersonation <= misuse"):
            generate_corpus(CorpusSpec(total=10, misuse=1, impersonation=2, vulnerable=2))

    @pytest.mark.parametrize(
        "doc, message",
        [
            ({"total": 5, "vulnerable": 6, "csrf": 6}, "vulnerable <= total"),
            ({"total": 5, "vulnerable": 3, "csrf": 1}, "vulnerable <= csrf + misuse + leaks + http"),
            ({"total": 5, "csrf": -1}, "csrf >= 0"),
            ({"total": 9, "leaks": 1, "vulnerable": 1, "leakRequests": 40}, "leakRequests <="),
        ],
    )
    def test_violations_are_named(self, doc, message):
        with pytest.raises(CorpusSpecError, match=re.escape(message)):
            generate_corpus(CorpusSpec.from_dict(doc))

    def test_spec_file(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(STUDY_SPEC.to_dict()))
        assert CorpusSpec.load(path) == STUDY_SPEC
        path.write_text('{"total": 1, "bogus": 2}')
        with pytest.raises(CorpusSpecError, match="bogus"):
            CorpusSpec.load(path)
        path.write_text('{"csrf": 1}')
        with pytest.raises(CorpusSpecError, match="total"):
            CorpusSpec.load(path)
        path.write_text('{"total": "many"}')
        with pytest.raises(CorpusSpecError):
            CorpusSpec.load(path)
