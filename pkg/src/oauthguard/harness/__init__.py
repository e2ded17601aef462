"""Loopback IdP, RP personas and a scripted browser for ground-truth traffic."""

from .corpus import STUDY_SPEC, CorpusSpec, CorpusSpecError, generate_corpus, planted_counts
from .flows import CSRF_FORGED, LEGITIMATE, FlowTranscript, Harness, run_corpus, run_flow, scan_transcripts
from .idp import MockIdpState, idp_authorize, idp_token, idp_userinfo
from .rp import RpProfile, spawn_rp

__all__ = [
    "CSRF_FORGED",
    "LEGITIMATE",
    "STUDY_SPEC",
    "CorpusSpec",
    "CorpusSpecError",
    "FlowTranscript",
    "Harness",
    "MockIdpState",
    "RpProfile",
    "generate_corpus",
    "idp_authorize",
    "idp_token",
    "idp_userinfo",
    "planted_counts",
    "run_corpus",
    "run_flow",
    "scan_transcripts",
    "spawn_rp",
]
