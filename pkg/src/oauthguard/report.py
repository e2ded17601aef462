"""Scan/proxy report model and its JSON and text renderings."""

from __future__ import annotations

import json
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .analyser import Finding, FindingClass
from .detector import Kind

SCHEMA_VERSION = 1

# summary buckets -> finding classes that put an RP in them
BUCKETS = {
    "csrf": {FindingClass.CSRF_THREAT},
    "misuse": {FindingClass.FLOW_MISUSE, FindingClass.IMPERSONATION},
    "impersonation": {FindingClass.IMPERSONATION},
    "leaks": {FindingClass.REFERER_LEAK, FindingClass.INTENTIONAL_LEAK},
    "intentional": {FindingClass.INTENTIONAL_LEAK},
    "http": {FindingClass.UNSAFE_TRANSFER},
}


@dataclass
class Report:
    scanned_transactions: int = 0
    oauth_requests: int = 0
    oauth_responses: int = 0
    findings: list[Finding] = field(default_factory=list)
    actions_taken: dict[str, int] = field(default_factory=dict)
    unobservable: int = 0
    skipped_entries: int = 0
    total_rps: Optional[int] = None

    def __post_init__(self):
        self._lock = threading.Lock()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Report):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def add(self, outcome) -> None:
        with self._lock:
            self.scanned_transactions += 1
            if outcome.kind is Kind.OAUTH_REQUEST:
                self.oauth_requests += 1
            elif outcome.kind is Kind.OAUTH_RESPONSE:
                self.oauth_responses += 1
            self.findings.extend(outcome.findings)
            verdict = outcome.action.verdict.value
            self.actions_taken[verdict] = self.actions_taken.get(verdict, 0) + 1

    def note_unobservable(self) -> None:
        with self._lock:
            self.unobservable += 1

    @property
    def per_rp_summary(self) -> dict[str, set[str]]:
        summary: dict[str, set[str]] = {}
        for f in self.findings:
            summary.setdefault(f.rp_domain, set()).add(f.cls.value)
        return summary

    def class_counts(self) -> dict[str, int]:
        """Distinct RP domains per summary bucket, plus ``vulnerable``."""
        summary = self.per_rp_summary
        counts = {}
        for bucket, classes in BUCKETS.items():
            wanted = {c.value for c in classes}
            counts[bucket] = sum(1 for cls in summary.values() if cls & wanted)
        counts["vulnerable"] = len(summary)
        return counts

    def finding_counter(self) -> Counter:
        return Counter(f.key() for f in self.findings)

    def actions(self, verdict: str) -> int:
        return self.actions_taken.get(verdict, 0)

    def to_dict(self) -> dict:
        return {
            "schemaVersion": SCHEMA_VERSION,
            "scannedTransactions": self.scanned_transactions,
            "oauthRequests": self.oauth_requests,
            "oauthResponses": self.oauth_responses,
            "totalRps": self.total_rps,
            "unobservable": self.unobservable,
            "skippedEntries": self.skipped_entries,
            "findings": [f.to_dict() for f in self.findings],
            "perRpSummary": {d: sorted(c) for d, c in sorted(self.per_rp_summary.items())},
            "classCounts": self.class_counts(),
            "actionsTaken": dict(sorted(self.actions_taken.items())),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Report":
        version = doc.get("schemaVersion")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schemaVersion {version!r}")
        return cls(
            scanned_transactions=doc["scannedTransactions"],
            oauth_requests=doc["oauthRequests"],
            oauth_responses=doc["oauthResponses"],
            findings=[Finding.from_dict(f) for f in doc["findings"]],
            actions_taken=dict(doc.get("actionsTaken", {})),
            unobservable=doc.get("unobservable", 0),
            skipped_entries=doc.get("skippedEntries", 0),
            total_rps=doc.get("totalRps"),
        )


def _render_text(report: Report) -> str:
    lines = []
    summary = report.per_rp_summary
    if summary:
        width = max(len("RP domain"), *(len(d) for d in summary))
        lines.append(f"{'RP domain':<{width}}  findings")
        lines.append(f"{'-' * width}  --------")
        for domain in sorted(summary):
            lines.append(f"{domain:<{width}}  {', '.join(sorted(summary[domain]))}")
        lines.append("")
    counts = report.class_counts()
    lines.append(
        f"transactions: {report.scanned_transactions}  oauth requests: {report.oauth_requests}"
        f"  oauth responses: {report.oauth_responses}"
    )
    lines.append("  ".join(f"{k}: {v}" for k, v in counts.items() if k != "vulnerable"))
    if report.actions_taken:
        lines.append("actions: " + "  ".join(f"{k}={v}" for k, v in sorted(report.actions_taken.items())))
    total = report.total_rps if report.total_rps is not None else len(summary)
    lines.append(f"{counts['vulnerable']}/{total} RPs with ≥1 finding")
    return "\n".join(lines) + "\n"


def render_report(report: Report, fmt: str = "json") -> bytes:
    if fmt == "json":
        return (json.dumps(report.to_dict(), indent=2) + "\n").encode("utf-8")
    if fmt == "text":
        return _render_text(report).encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(data: bytes) -> Report:
    return Report.from_dict(json.loads(data))
