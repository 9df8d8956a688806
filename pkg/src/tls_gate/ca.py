"""Per-installation certificate authority and leaf minting."""

import datetime
import ipaddress
import logging
import os
import ssl
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

logger = logging.getLogger("flowtap.tls_gate.ca")

CA_CERT_FILE = "ca.pem"
CA_KEY_FILE = "ca.key"
CA_VALIDITY = datetime.timedelta(days=3650)
LEAF_VALIDITY = datetime.timedelta(days=30)
_CLOCK_SKEW = datetime.timedelta(hours=1)
_ContextKey = Tuple[str, Tuple[str, ...]]  # host, ALPN protocols


class CaUnavailable(RuntimeError):
    """The CA could not be loaded, created or used."""


@dataclass(frozen=True)
class LeafCredentials:
    host: str
    cert_pem: bytes
    key_pem: bytes
    chain_pem: bytes  # leaf followed by the CA certificate
    not_after: datetime.datetime


def _now() -> datetime.datetime:
    return datetime.datetime.now(datetime.timezone.utc)


def _new_key() -> ec.EllipticCurvePrivateKey:
    return ec.generate_private_key(ec.SECP256R1())


def _key_pem(key: ec.EllipticCurvePrivateKey) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


class CaIdentity:
    """Self-signed root used to sign per-host leaf certificates.

    Read-only after construction apart from the leaf cache, which is
    guarded by a lock.
    """

    def __init__(
        self,
        cert: x509.Certificate,
        key: ec.EllipticCurvePrivateKey,
        directory: Optional[Path] = None,
    ):
        self.cert = cert
        self._key = key
        self.directory = directory
        self._leaves: Dict[str, LeafCredentials] = {}
        self._contexts: Dict[_ContextKey, Tuple[LeafCredentials, ssl.SSLContext]] = {}
        self._lock = threading.Lock()
        self._leaf_dir = tempfile.TemporaryDirectory(prefix="flowtap-leaves-")

    # -- construction -------------------------------------------------------

    @classmethod
    def generate(cls, common_name: str = "flowtap local CA") -> "CaIdentity":
        key = _new_key()
        name = x509.Name(
            [
                x509.NameAttribute(NameOID.COMMON_NAME, common_name),
                x509.NameAttribute(NameOID.ORGANIZATION_NAME, "flowtap"),
            ]
        )
        now = _now()
        cert = (
            x509.CertificateBuilder()
            .subject_name(name)
            .issuer_name(name)
            .public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - _CLOCK_SKEW)
            .not_valid_after(now + CA_VALIDITY)
            .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
            .add_extension(
                x509.KeyUsage(
                    digital_signature=True,
                    content_commitment=False,
                    key_encipherment=False,
                    data_encipherment=False,
                    key_agreement=False,
                    key_cert_sign=True,
                    crl_sign=True,
                    encipher_only=False,
                    decipher_only=False,
                ),
                critical=True,
            )
            .add_extension(
                x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False
            )
            .sign(key, hashes.SHA256())
        )
        return cls(cert, key)

    @classmethod
    def load_or_create(cls, directory: Path) -> "CaIdentity":
        """Load the CA from ``directory``, creating it on first run."""
        directory = Path(directory).expanduser()
        cert_path = directory / CA_CERT_FILE
        key_path = directory / CA_KEY_FILE
        try:
            if cert_path.exists() and key_path.exists():
                cert = x509.load_pem_x509_certificate(cert_path.read_bytes())
                key = serialization.load_pem_private_key(key_path.read_bytes(), password=None)
                if not isinstance(key, ec.EllipticCurvePrivateKey):
                    raise CaUnavailable(f"{key_path} is not an EC key")
                logger.info("Loaded CA from %s", directory)
                return cls(cert, key, directory)

            directory.mkdir(parents=True, exist_ok=True)
            ca = cls.generate()
            ca.directory = directory
            fd = os.open(key_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
            with os.fdopen(fd, "wb") as f:
                f.write(_key_pem(ca._key))
            os.chmod(key_path, 0o600)
            cert_path.write_bytes(ca.cert_pem)
            logger.info("Created new CA in %s", directory)
            return ca
        except CaUnavailable:
            raise
        except (OSError, ValueError) as e:
            raise CaUnavailable(f"cannot load or create CA in {directory}: {e}") from e

    # -- export -------------------------------------------------------------

    @property
    def cert_pem(self) -> bytes:
        return self.cert.public_bytes(serialization.Encoding.PEM)

    @property
    def fingerprint(self) -> str:
        return self.cert.fingerprint(hashes.SHA256()).hex(":")

    def export_ca_pem(self, path: Path) -> Path:
        """Write the CA certificate (never the key) for client install."""
        path = Path(path).expanduser()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.cert_pem)
        return path

    # -- leaves -------------------------------------------------------------

    def mint_leaf(self, host: str) -> LeafCredentials:
        if not host:
            raise ValueError("host must be non-empty")
        host = host.lower()
        with self._lock:
            cached = self._leaves.get(host)
            if cached is not None and cached.not_after - _now() > _CLOCK_SKEW:
                return cached
            try:
                leaf = self._sign_leaf(host)
            except Exception as e:
                raise CaUnavailable(f"cannot mint leaf for {host}: {e}") from e
            self._leaves[host] = leaf
            logger.debug("Minted leaf certificate for %s", host)
            return leaf

    def _sign_leaf(self, host: str) -> LeafCredentials:
        key = _new_key()
        try:
            san: x509.GeneralName = x509.IPAddress(ipaddress.ip_address(host))
        except ValueError:
            san = x509.DNSName(host)
        now = _now()
        not_after = now + LEAF_VALIDITY
        cert = (
            x509.CertificateBuilder()
            .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, host[:64])]))
            .issuer_name(self.cert.subject)
            .public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - _CLOCK_SKEW)
            .not_valid_after(not_after)
            .add_extension(x509.SubjectAlternativeName([san]), critical=False)
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .add_extension(
                x509.KeyUsage(
                    digital_signature=True,
                    content_commitment=False,
                    key_encipherment=False,
                    data_encipherment=False,
                    key_agreement=False,
                    key_cert_sign=False,
                    crl_sign=False,
                    encipher_only=False,
                    decipher_only=False,
                ),
                critical=True,
            )
            .add_extension(x509.ExtendedKeyUsage([ExtendedKeyUsageOID.SERVER_AUTH]), critical=False)
            .add_extension(
                x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False
            )
            .add_extension(
                x509.AuthorityKeyIdentifier.from_issuer_public_key(self._key.public_key()),
                critical=False,
            )
            .sign(self._key, hashes.SHA256())
        )
        cert_pem = cert.public_bytes(serialization.Encoding.PEM)
        return LeafCredentials(
            host=host,
            cert_pem=cert_pem,
            key_pem=_key_pem(key),
            chain_pem=cert_pem + self.cert_pem,
            not_after=not_after,
        )

    def server_context(self, host: str, alpn: Sequence[str] = ()) -> ssl.SSLContext:
        """Server-side context presenting the minted leaf for ``host``.

        Contexts are cached per (host, ALPN list) and rebuilt once the
        leaf behind them has been re-minted.
        """
        leaf = self.mint_leaf(host)
        cache_key = (leaf.host, tuple(alpn))
        with self._lock:
            cached = self._contexts.get(cache_key)
            if cached is not None and cached[0] is leaf:
                return cached[1]
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.minimum_version = ssl.TLSVersion.TLSv1_2
            # load_cert_chain only reads files; each call gets its own pair
            chain_fd, chain_file = tempfile.mkstemp(suffix=".chain.pem", dir=self._leaf_dir.name)
            key_fd, key_file = tempfile.mkstemp(suffix=".key.pem", dir=self._leaf_dir.name)
            try:
                with os.fdopen(chain_fd, "wb") as f:
                    f.write(leaf.chain_pem)
                with os.fdopen(key_fd, "wb") as f:
                    f.write(leaf.key_pem)
                ctx.load_cert_chain(chain_file, key_file)
            finally:
                os.unlink(chain_file)
                os.unlink(key_file)
            if alpn:
                ctx.set_alpn_protocols(list(alpn))
            self._contexts[cache_key] = (leaf, ctx)
        return ctx


def mint_leaf(host: str, ca: CaIdentity) -> LeafCredentials:
    return ca.mint_leaf(host)


def export_ca_pem(ca: CaIdentity, path: Path) -> Path:
    return ca.export_ca_pem(path)
