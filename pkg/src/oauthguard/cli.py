"""``oauthguard`` command line: scan a HAR, run the proxy, or replay a persona corpus.

Exit status is 0 when no findings were reported, 2 when at least one was,
and 1 on any error.  Options fall back to ``OAUTHGUARD_*`` environment
variables, then to built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

from .analyser import Whitelist
from .capture.har import HarLoadError, load_har, write_har
from .capture.proxy import ProxyConfig, run_proxy
from .capture.tls import CaLoadError, write_ca
from .harness import CorpusSpec, CorpusSpecError, Harness, generate_corpus, run_corpus, scan_transcripts
from .pipeline import Pipeline
from .protector import Mode, PolicyConfig
from .report import Report, render_report

EXIT_CLEAN, EXIT_ERROR, EXIT_FINDINGS = 0, 1, 2
ENV_PREFIX = "OAUTHGUARD_"

log = logging.getLogger("oauthguard")


class UsageError(Exception):
    pass


def _env(name: str) -> Optional[str]:
    value = os.environ.get(ENV_PREFIX + name)
    return value if value not in (None, "") else None


def _setting(flag, env_name: str, default=None):
    """flags > OAUTHGUARD_<env_name> > default."""
    if flag is not None:
        return flag
    value = _env(env_name)
    return value if value is not None else default


def _env_bool(name: str, default: bool) -> bool:
    value = _env(name)
    if value is None:
        return default
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"{ENV_PREFIX}{name} must be a boolean, got {value!r}")


def _whitelist(path: Optional[str]) -> Whitelist:
    path = _setting(path, "WHITELIST")
    if path is None:
        return Whitelist.default()
    try:
        return Whitelist.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read whitelist {path}: {exc}") from exc


def _format(flag: Optional[str]) -> str:
    fmt = _setting(flag, "FORMAT", "json")
    if fmt not in ("json", "text"):
        raise UsageError(f"format must be json or text, got {fmt!r}")
    return fmt


def _emit(report: Report, fmt: str) -> int:
    sys.stdout.buffer.write(render_report(report, fmt))
    sys.stdout.flush()
    return EXIT_FINDINGS if report.findings else EXIT_CLEAN


# -- scan ---------------------------------------------------------------------


def cmd_scan(args) -> int:
    har = _setting(args.har, "HAR")
    if har is None:
        raise UsageError("scan needs --har FILE")
    fmt = _format(args.format)
    pipeline = Pipeline(PolicyConfig(mode=Mode.REPORT_ONLY, whitelist=_whitelist(args.whitelist)))
    try:
        transactions = load_har(har)
    except HarLoadError as exc:
        raise UsageError(str(exc)) from exc
    for tx in transactions:
        pipeline(tx)
    pipeline.report.skipped_entries = transactions.skipped
    return _emit(pipeline.report, fmt)


# -- proxy --------------------------------------------------------------------


def _resolver(entries: Sequence[str]):
    table = {}
    for entry in entries:
        parts = entry.rsplit(":", 2)
        if len(parts) != 3 or not parts[1].isdigit():
            raise UsageError(f"--resolve wants HOST:PORT:ADDR, got {entry!r}")
        host, port, addr = parts
        table[(host.lower(), int(port))] = addr
    if not table:
        return None

    def resolve(host: str, port: int):
        return table.get((host.lower(), port), host), port

    return resolve


def proxy_config(args) -> ProxyConfig:
    mode_name = "reportOnly" if args.report_only else "enforce" if args.enforce else _setting(None, "MODE", "enforce")
    try:
        mode = Mode(mode_name)
    except ValueError:
        raise UsageError(f"mode must be enforce or reportOnly, got {mode_name!r}") from None
    upgrade = False if args.no_https_upgrade else _env_bool("HTTPS_UPGRADE", True)
    return ProxyConfig(
        listen=_setting(args.listen, "LISTEN", "127.0.0.1:8080"),
        ca_cert=_setting(args.ca_cert, "CA_CERT"),
        ca_key=_setting(args.ca_key, "CA_KEY"),
        mode=mode,
        https_upgrade_enabled=upgrade,
        whitelist=_whitelist(args.whitelist),
        upstream_cafile=_setting(args.upstream_ca, "UPSTREAM_CA"),
        resolver=_resolver(args.resolve or []),
    )


def cmd_proxy(args) -> int:
    fmt = _format(args.format)
    config = proxy_config(args)
    if bool(config.ca_cert) != bool(config.ca_key):
        raise UsageError("--ca-cert and --ca-key must be given together")
    if args.init_ca and config.ca_cert and not os.path.exists(config.ca_cert):
        write_ca(config.ca_cert, config.ca_key)
        log.info("wrote new CA to %s", config.ca_cert)
    try:
        server = run_proxy(config, Pipeline(config.policy()))
    except CaLoadError as exc:
        raise UsageError(str(exc)) from exc
    except OSError as exc:
        raise UsageError(f"cannot listen on {config.listen}: {exc}") from exc
    return _emit(server.pipeline.report, fmt)


# -- corpus -------------------------------------------------------------------


def cmd_corpus(args) -> int:
    spec_path = _setting(args.spec, "SPEC")
    if spec_path is None:
        raise UsageError("corpus needs --spec FILE")
    fmt = _format(args.format)
    seed_raw = _setting(args.seed, "SEED", 0)
    try:
        seed = int(seed_raw)
    except ValueError:
        raise UsageError(f"seed must be an integer, got {seed_raw!r}") from None
    try:
        spec = CorpusSpec.load(spec_path)
        profiles = generate_corpus(spec, seed)
    except OSError as exc:
        raise UsageError(f"cannot read corpus spec {spec_path}: {exc}") from exc
    except CorpusSpecError as exc:
        raise UsageError(str(exc)) from exc
    with Harness() as env:
        transcripts = run_corpus(env, profiles, workers=args.workers)
        pipeline = scan_transcripts(env, transcripts)
    for tr in transcripts:
        if tr.error:
            log.warning("flow for %s ended early: %s", tr.profile.name, tr.error)
    if args.har_out:
        write_har([e for tr in transcripts for e in tr.har_entries()], args.har_out)
    report = pipeline.report
    report.total_rps = len(profiles)
    return _emit(report, fmt)


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oauthguard", description="OAuth 2.0 / OpenID Connect sign-in scanner and proxy")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("scan", help="analyse a HAR capture")
    scan.add_argument("--har", metavar="FILE")
    scan.add_argument("--whitelist", metavar="FILE", help="replaces the built-in whitelist")
    scan.add_argument("--format", choices=("json", "text"))
    scan.set_defaults(func=cmd_scan)

    proxy = sub.add_parser("proxy", help="run the enforcing forward proxy")
    proxy.add_argument("--listen", metavar="HOST:PORT")
    proxy.add_argument("--ca-cert", metavar="PATH")
    proxy.add_argument("--ca-key", metavar="PATH")
    proxy.add_argument("--init-ca", action="store_true", help="create the CA files if they do not exist")
    mode = proxy.add_mutually_exclusive_group()
    mode.add_argument("--enforce", action="store_true")
    mode.add_argument("--report-only", action="store_true")
    proxy.add_argument("--no-https-upgrade", action="store_true")
    proxy.add_argument("--whitelist", metavar="FILE", help="replaces the built-in whitelist")
    proxy.add_argument("--upstream-ca", metavar="FILE", help="CA bundle for upstream TLS")
    proxy.add_argument("--resolve", metavar="HOST:PORT:ADDR", action="append", help="pin a host to an address")
    proxy.add_argument("--format", choices=("json", "text"), help="summary format printed on shutdown")
    proxy.set_defaults(func=cmd_proxy)

    corpus = sub.add_parser("corpus", help="generate personas, run their flows and scan the traffic")
    corpus.add_argument("--spec", metavar="FILE")
    corpus.add_argument("--seed", type=int)
    corpus.add_argument("--format", choices=("json", "text"))
    corpus.add_argument("--har-out", metavar="FILE", help="also write the recorded traffic as HAR")
    corpus.add_argument("--workers", type=int, default=4)
    corpus.set_defaults(func=cmd_corpus)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, which would read as "findings"
        return EXIT_CLEAN if exc.code == 0 else EXIT_ERROR
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"oauthguard: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
