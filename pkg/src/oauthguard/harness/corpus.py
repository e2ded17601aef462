"""Seeded persona corpora with exact per-class tallies."""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, fields
from typing import Optional

from ..report import BUCKETS, Report
from .rp import RpProfile

THIRD_PARTY_POOL = (
    "optimizely.test",
    "bing.test",
    "licdn.test",
    "quantserver.test",
    *(f"adnet{i}.test" for i in range(1, 13)),
)
TRACKERS = ("collect.tracker.test", "beacon.audiencemetrics.test", "px.datasink.test")
PROXY_SERVICE_DOMAIN = "ssoproxy.test"
MISUSE_TOKENS = (
    ("code", "id_token"),
    ("code", "access_token"),
    ("access_token", "id_token"),
    ("code", "access_token", "id_token"),
)

# camelCase names used in spec files
_JSON_NAMES = {
    "total": "total",
    "csrf": "csrf",
    "misuse": "misuse",
    "impersonation": "impersonation",
    "leaks": "leaks",
    "intentional": "intentional",
    "http": "http",
    "vulnerable": "vulnerable",
    "https_upgradable": "httpsUpgradable",
    "leak_requests": "leakRequests",
    "csrf_over_http": "csrfOverHttp",
    "whitelisted": "whitelisted",
}


class CorpusSpecError(ValueError):
    """The requested tallies cannot be realised by any persona set."""


@dataclass(frozen=True)
class CorpusSpec:
    """Per-class RP counts.  Buckets are RP counts and may overlap.

    ``misuse`` includes ``impersonation`` and ``leaks`` includes
    ``intentional``.  The optional fields refine the layout: how many http
    RPs also serve https, how many token-leaking requests the leak personas
    emit in total, how many CSRF personas are http, and how many secure RPs
    sign in through the whitelisted proxy service.
    """

    total: int = 0
    csrf: int = 0
    misuse: int = 0
    impersonation: int = 0
    leaks: int = 0
    intentional: int = 0
    http: int = 0
    vulnerable: int = 0
    https_upgradable: int = 0
    leak_requests: Optional[int] = None
    csrf_over_http: Optional[int] = None
    whitelisted: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "CorpusSpec":
        inverse = {v: k for k, v in _JSON_NAMES.items()}
        unknown = sorted(set(doc) - set(inverse))
        if unknown:
            raise CorpusSpecError(f"unknown corpus spec fields: {', '.join(unknown)}")
        kw = {}
        for key, value in doc.items():
            if value is not None and (not isinstance(value, int) or isinstance(value, bool)):
                raise CorpusSpecError(f"{key} must be an integer, got {value!r}")
            kw[inverse[key]] = value
        if "total" not in kw:
            raise CorpusSpecError("total is required")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "CorpusSpec":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except ValueError as exc:
                raise CorpusSpecError(f"corpus spec is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise CorpusSpecError("corpus spec must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {_JSON_NAMES[k]: v for k, v in asdict(self).items()}

    @property
    def overlap(self) -> int:
        """CSRF personas that are also http."""
        if self.csrf_over_http is not None:
            return self.csrf_over_http
        # smallest overlap that still fits inside the vulnerable set
        return max(0, self.csrf + self.http - self.vulnerable)

    @property
    def requests(self) -> int:
        if self.leak_requests is not None:
            return self.leak_requests
        return 4 * (self.leaks - self.intentional) + self.intentional

    def violations(self) -> list[str]:
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None and value < 0:
                out.append(f"{_JSON_NAMES[f.name]} >= 0")
        if out:
            return out
        n, v, x = self.total, self.vulnerable, self.overlap
        checks = [
            (self.impersonation <= self.misuse, "impersonation <= misuse"),
            (self.intentional <= self.leaks, "intentional <= leaks"),
            (v <= n, "vulnerable <= total"),
            (max(self.csrf, self.misuse, self.leaks, self.http) <= v, "every class count <= vulnerable"),
            (v <= self.csrf + self.misuse + self.leaks + self.http, "vulnerable <= csrf + misuse + leaks + http"),
            (self.https_upgradable <= self.http, "httpsUpgradable <= http"),
            (x <= min(self.csrf, self.http), "csrfOverHttp <= min(csrf, http)"),
            (self.csrf + self.http - x <= v, "csrf + http - csrfOverHttp <= vulnerable"),
            (self.leaks + self.http <= v, "leaks + http <= vulnerable (leak personas are https)"),
            (
                v <= self.csrf + self.http - x + self.leaks + self.misuse,
                "vulnerable <= csrf + http - csrfOverHttp + leaks + misuse",
            ),
            (self.whitelisted <= n - v, "whitelisted <= total - vulnerable"),
            (self.requests >= self.leaks, "leakRequests >= leaks"),
            (self.leaks > 0 or self.requests == 0, "leakRequests == 0 when leaks == 0"),
            (
                self.requests <= self.leaks * len(THIRD_PARTY_POOL) + self.intentional,
                f"leakRequests <= {len(THIRD_PARTY_POOL)} per leak persona (+1 if intentional)",
            ),
        ]
        return [msg for ok, msg in checks if not ok]


STUDY_SPEC = CorpusSpec(
    total=137,
    csrf=53,
    misuse=21,
    impersonation=13,
    leaks=9,
    intentional=2,
    http=13,
    vulnerable=69,
    https_upgradable=8,
    leak_requests=75,
    csrf_over_http=5,
    whitelisted=11,
)


def _layout(spec: CorpusSpec) -> dict[str, list[int]]:
    """Slot indices for each planted class; slots [0, vulnerable) are vulnerable."""
    c, h, x, v = spec.csrf, spec.http, spec.overlap, spec.vulnerable
    csrf = list(range(c))
    http = list(range(c - x, c)) + list(range(c, c + h - x))
    rest = list(range(c + h - x, v))  # not yet covered by csrf or http
    csrf_only = list(range(c - x))
    leak_slots = (rest + csrf_only)[: spec.leaks]
    covered = set(csrf) | set(http) | set(leak_slots)
    uncovered = [i for i in rest if i not in covered]
    # misuse fills the gaps first, then any vulnerable slot
    order = uncovered + [i for i in range(v) if i not in uncovered]
    misuse = order[: spec.misuse]
    return {
        "csrf": csrf,
        "http": http,
        "leaks": leak_slots,
        "intentional": leak_slots[: spec.intentional],
        "misuse": misuse,
        "impersonation": misuse[: spec.impersonation],
        "upgradable": http[: spec.https_upgradable],
    }


def generate_corpus(spec: CorpusSpec, seed: int = 0) -> list[RpProfile]:
    """Personas whose planted classes hit the CorpusSpec tallies exactly."""
    problems = spec.violations()
    if problems:
        raise CorpusSpecError("unsatisfiable corpus spec: " + "; ".join(problems))
    rng = random.Random(seed)
    slots = _layout(spec)
    sets = {k: set(v) for k, v in slots.items()}

    # spread leaking requests as evenly as possible
    per_leak: dict[int, int] = {}
    if spec.leaks:
        base, extra = divmod(spec.requests, spec.leaks)
        for rank, slot in enumerate(slots["leaks"]):
            per_leak[slot] = base + (1 if rank >= spec.leaks - extra else 0)

    names = [f"rp{i:03d}" for i in range(spec.total)]
    rng.shuffle(names)
    profiles = []
    for slot in range(spec.total):
        tokens: tuple[str, ...] = ("code",)
        flow = "authorizationCode"
        if slot in sets["impersonation"]:
            tokens, flow = ("access_token",), "implicit"
        elif slot in sets["misuse"]:
            tokens = rng.choice(MISUSE_TOKENS)
            flow = "authorizationCode" if "code" in tokens else "implicit"
        resources: tuple[str, ...] = ()
        tracker = None
        if slot in per_leak:
            count = per_leak[slot]
            if slot in sets["intentional"]:
                tracker = rng.choice(TRACKERS)
                count -= 1
            resources = tuple(rng.sample(THIRD_PARTY_POOL, count))
        whitelisted = spec.vulnerable <= slot < spec.vulnerable + spec.whitelisted
        profiles.append(
            RpProfile(
                name=names[slot],
                flow=flow,
                sends_state=slot not in sets["csrf"],
                uses_https=slot not in sets["http"],
                https_available=slot in sets["upgradable"],
                tokens_submitted=tokens,
                third_party_resources=resources,
                intentional_leak_target=tracker,
                via_proxy_service=PROXY_SERVICE_DOMAIN if whitelisted else None,
            ).validate()
        )
    rng.shuffle(profiles)
    return profiles


def planted_counts(profiles: list[RpProfile]) -> dict[str, int]:
    """Bucket tallies implied by the profile flags (same buckets as reports)."""
    counts = {bucket: 0 for bucket in BUCKETS}
    vulnerable = 0
    for p in profiles:
        classes = p.expected_classes()
        vulnerable += bool(classes)
        for bucket, members in BUCKETS.items():
            counts[bucket] += bool(classes & members)
    counts["vulnerable"] = vulnerable
    return counts


def expected_leak_requests(profiles: list[RpProfile]) -> int:
    return sum(p.leak_requests for p in profiles)
