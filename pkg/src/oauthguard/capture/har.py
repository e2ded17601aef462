"""HAR 1.2 reading and writing."""

from __future__ import annotations

import base64
import json
import logging
from typing import Iterable, Optional
from urllib.parse import urlencode

from ..http_model import Headers, HttpTransaction, UrlParseError, parse_url

log = logging.getLogger(__name__)


class HarLoadError(Exception):
    pass


class Transactions(list):
    """List of transactions plus the number of HAR entries that were skipped."""

    skipped: int = 0


def _entry_to_tx(index: int, entry: dict) -> HttpTransaction:
    req = entry["request"]
    method = req["method"]
    url = parse_url(req["url"])
    headers = Headers((h["name"], h["value"]) for h in req.get("headers", []))
    body = None
    ctype = None
    post = req.get("postData")
    if post:
        ctype = post.get("mimeType") or headers.get("Content-Type")
        if "text" in post and post["text"] is not None:
            text = post["text"]
            if post.get("encoding") == "base64":
                body = base64.b64decode(text)
            else:
                body = text.encode("utf-8")
        elif post.get("params"):
            body = urlencode([(p["name"], p.get("value", "")) for p in post["params"]]).encode()
    status = None
    resp = entry.get("response")
    if isinstance(resp, dict) and isinstance(resp.get("status"), int):
        status = resp["status"]
    return HttpTransaction(
        method=method.upper(),
        url=url,
        headers=headers,
        body=body,
        content_type=ctype,
        observed_at=float(index),
        ref=f"har-{index}",
        status=status,
    )


def load_har(path) -> Transactions:
    try:
        with open(path, "rb") as fh:
            doc = json.load(fh)
        entries = doc["log"]["entries"]
        if not isinstance(entries, list):
            raise TypeError("log.entries is not a list")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise HarLoadError(f"cannot load HAR {path}: {exc}") from exc
    out = Transactions()
    for i, entry in enumerate(entries):
        try:
            out.append(_entry_to_tx(i, entry))
        except (KeyError, TypeError, ValueError, UrlParseError) as exc:
            out.skipped += 1
            log.warning("skipping malformed HAR entry %d: %s", i, exc)
    return out


def har_entry(
    method: str,
    url: str,
    headers: Iterable[tuple[str, str]],
    body: Optional[bytes] = None,
    content_type: Optional[str] = None,
    status: int = 0,
    response_headers: Iterable[tuple[str, str]] = (),
    started: str = "1970-01-01T00:00:00.000Z",
) -> dict:
    try:
        query = [{"name": k, "value": v} for k, v in parse_url(url).query]
    except UrlParseError:
        query = []
    request = {
        "method": method,
        "url": url,
        "httpVersion": "HTTP/1.1",
        "headers": [{"name": k, "value": v} for k, v in headers],
        "queryString": query,
        "cookies": [],
        "headersSize": -1,
        "bodySize": len(body) if body else 0,
    }
    if body is not None:
        request["postData"] = {
            "mimeType": content_type or "application/octet-stream",
            "text": body.decode("utf-8", "replace"),
        }
    return {
        "startedDateTime": started,
        "time": 0,
        "request": request,
        "response": {
            "status": status,
            "statusText": "",
            "httpVersion": "HTTP/1.1",
            "headers": [{"name": k, "value": v} for k, v in response_headers],
            "cookies": [],
            "content": {"size": 0, "mimeType": ""},
            "redirectURL": "",
            "headersSize": -1,
            "bodySize": -1,
        },
        "cache": {},
        "timings": {"send": 0, "wait": 0, "receive": 0},
    }


def har_document(entries: list[dict]) -> dict:
    return {
        "log": {
            "version": "1.2",
            "creator": {"name": "oauthguard", "version": "0.1.0"},
            "pages": [],
            "entries": entries,
        }
    }


def write_har(entries: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(har_document(entries), fh, indent=1)
