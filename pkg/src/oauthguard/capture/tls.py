"""Local certificate authority and on-demand leaf certificates for TLS interception."""

from __future__ import annotations

import datetime
import ipaddress
import os
import shutil
import ssl
import tempfile
import threading
from typing import Optional

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID


class CaLoadError(Exception):
    pass


def _name(cn: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, cn)])


def _pem_key(key) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


def generate_ca(common_name: str = "oauthguard local CA") -> tuple[bytes, bytes]:
    """Return ``(cert_pem, key_pem)`` for a fresh self-signed CA."""
    key = ec.generate_private_key(ec.SECP256R1())
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(_name(common_name))
        .issuer_name(_name(common_name))
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(days=1))
        .not_valid_after(now + datetime.timedelta(days=3650))
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=True, content_commitment=False, key_encipherment=False,
                data_encipherment=False, key_agreement=False, key_cert_sign=True,
                crl_sign=True, encipher_only=False, decipher_only=False,
            ),
            critical=True,
        )
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
        .sign(key, hashes.SHA256())
    )
    return cert.public_bytes(serialization.Encoding.PEM), _pem_key(key)


def write_ca(cert_path, key_path, common_name: str = "oauthguard local CA") -> None:
    cert_pem, key_pem = generate_ca(common_name)
    with open(cert_path, "wb") as fh:
        fh.write(cert_pem)
    with open(key_path, "wb") as fh:
        fh.write(key_pem)
    os.chmod(key_path, 0o600)


class CertificateAuthority:
    """Mints and caches per-host server contexts signed by one CA."""

    def __init__(self, cert_pem: bytes, key_pem: bytes):
        try:
            self.cert = x509.load_pem_x509_certificate(cert_pem)
            self.key = serialization.load_pem_private_key(key_pem, password=None)
        except ValueError as exc:
            raise CaLoadError(f"cannot parse CA material: {exc}") from exc
        self.cert_pem = cert_pem
        self._dir = tempfile.mkdtemp(prefix="oauthguard-certs-")
        self._contexts: dict[str, ssl.SSLContext] = {}
        self._lock = threading.Lock()

    @classmethod
    def load(cls, cert_path, key_path) -> "CertificateAuthority":
        for p in (cert_path, key_path):
            if not p or not os.path.exists(p):
                raise CaLoadError(f"CA file not found: {p}")
        with open(cert_path, "rb") as fh:
            cert_pem = fh.read()
        with open(key_path, "rb") as fh:
            key_pem = fh.read()
        return cls(cert_pem, key_pem)

    @classmethod
    def create(cls, common_name: str = "oauthguard local CA") -> "CertificateAuthority":
        return cls(*generate_ca(common_name))

    @property
    def cafile(self) -> str:
        path = os.path.join(self._dir, "ca.pem")
        with self._lock:
            if not os.path.exists(path):
                # readers on other threads must never see a half-written file
                tmp = path + ".tmp"
                with open(tmp, "wb") as fh:
                    fh.write(self.cert_pem)
                os.replace(tmp, path)
        return path

    def mint(self, host: str) -> tuple[bytes, bytes]:
        key = ec.generate_private_key(ec.SECP256R1())
        now = datetime.datetime.now(datetime.timezone.utc)
        try:
            san = x509.IPAddress(ipaddress.ip_address(host))
        except ValueError:
            san = x509.DNSName(host)
        cert = (
            x509.CertificateBuilder()
            .subject_name(_name(host))
            .issuer_name(self.cert.subject)
            .public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(days=1))
            .not_valid_after(now + datetime.timedelta(days=365))
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .add_extension(x509.SubjectAlternativeName([san]), critical=False)
            .add_extension(x509.ExtendedKeyUsage([ExtendedKeyUsageOID.SERVER_AUTH]), critical=False)
            .add_extension(
                x509.AuthorityKeyIdentifier.from_issuer_public_key(self.key.public_key()),
                critical=False,
            )
            .sign(self.key, hashes.SHA256())
        )
        return cert.public_bytes(serialization.Encoding.PEM), _pem_key(key)

    def server_context(self, host: str) -> ssl.SSLContext:
        with self._lock:
            ctx = self._contexts.get(host)
            if ctx is not None:
                return ctx
            cert_pem, key_pem = self.mint(host)
            base = os.path.join(self._dir, host.replace(":", "_"))
            with open(base + ".crt", "wb") as fh:
                fh.write(cert_pem + self.cert_pem)
            with open(base + ".key", "wb") as fh:
                fh.write(key_pem)
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.load_cert_chain(base + ".crt", base + ".key")
            self._contexts[host] = ctx
            return ctx

    def client_context(self) -> ssl.SSLContext:
        return client_context(self.cafile)

    def close(self) -> None:
        shutil.rmtree(self._dir, ignore_errors=True)


def client_context(cafile: Optional[str] = None) -> ssl.SSLContext:
    """Verifying client context; trusts ``cafile`` if given, else the system store."""
    ctx = ssl.create_default_context(cafile=cafile)
    return ctx
