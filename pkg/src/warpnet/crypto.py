"""Identities, signatures, attribute keys and policy-tree encryption.

Attribute-based encryption is realized as key encapsulation down the policy
tree over per-(attribute, epoch) symmetric keys:

* OR    -- the node secret is wrapped independently under every child;
* AND   -- the node secret is split into XOR shares, one per child;
* k-of-n -- the node secret is split with Shamir sharing over GF(2**521 - 1);
* leaf  -- the share is sealed with AES-GCM under the attribute key.

Access semantics match CP-ABE; collusion resistance does not (two users can
pool symmetric attribute keys).  That limitation is deliberate.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import tlv
from .policy import (
    And,
    InvalidPolicy,
    Leaf,
    Or,
    Policy,
    alias_attribute,
    attributes_of,
    bucket_attribute,
    evaluate_policy,
    format_policy,
    parse_policy,
    validate,
)

DAY = 86400.0
DEFAULT_KEY_LIFETIME = 7 * DAY
DEFAULT_RETENTION = 2
DEFAULT_BUCKETS = 16

PRIME = 2**521 - 1
_CHUNK = 64  # bytes of secret per Shamir polynomial; 2**512 < PRIME
_SHARE_WIDTH = 66  # bytes needed for one field element
_NONCE = 12


class AccessDenied(Exception):
    pass


class IntegrityFailure(Exception):
    pass


class BadCertificate(Exception):
    pass


class UnknownPeer(KeyError):
    pass


def random_bytes(rng: Optional[random.Random], n: int) -> bytes:
    """``n`` bytes from ``rng`` when given (reproducible runs), else the OS."""
    return rng.randbytes(n) if rng is not None else os.urandom(n)


# --------------------------------------------------------------------------
# identities and signatures


def _raw_public(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def _ia_statement(ia: str, username: str, public_key: bytes) -> bytes:
    return b"warp-ia-cert\x00" + f"{ia}.{username}".encode() + b"\x00" + public_key


@dataclass(frozen=True)
class PublicIdentity:
    ia: str
    username: str
    public_key: bytes
    ia_certificate: bytes

    @property
    def name(self) -> str:
        return f"{self.ia}.{self.username}"


@dataclass(frozen=True, eq=False)
class Identity:
    ia: str
    username: str
    private_key: Ed25519PrivateKey = field(repr=False)
    public: PublicIdentity

    @property
    def name(self) -> str:
        return f"{self.ia}.{self.username}"

    @property
    def public_key(self) -> bytes:
        return self.public.public_key


class IdentityAuthority:
    """Stub IA: signs (name, public key) statements and nothing else."""

    def __init__(self, name: str, rng: Optional[random.Random] = None):
        self.name = name
        self._key = Ed25519PrivateKey.from_private_bytes(random_bytes(rng, 32))
        self.public_key = _raw_public(self._key.public_key())

    def register(self, username: str, rng: Optional[random.Random] = None) -> Identity:
        private = Ed25519PrivateKey.from_private_bytes(random_bytes(rng, 32))
        pub = _raw_public(private.public_key())
        cert = self._key.sign(_ia_statement(self.name, username, pub))
        return Identity(self.name, username, private, PublicIdentity(self.name, username, pub, cert))


def verify_identity(public: PublicIdentity, ia_public_key: bytes) -> bool:
    return verify_object(
        ia_public_key,
        _ia_statement(public.ia, public.username, public.public_key),
        public.ia_certificate,
    )


def sign_object(identity: Identity, canonical_bytes: bytes) -> bytes:
    return identity.private_key.sign(canonical_bytes)


def verify_object(public_key: bytes, canonical_bytes: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, canonical_bytes)
    except (InvalidSignature, ValueError):
        return False
    return True


# --------------------------------------------------------------------------
# attribute keys


@dataclass(frozen=True)
class AttributeKey:
    issuer: str
    attribute: str
    epoch: int
    expiry: float
    material: bytes = field(repr=False)


class KeyIssuer:
    """Per-user attribute master state: secret seed, epoch, aliases and buckets."""

    def __init__(
        self,
        name: str,
        seed: bytes,
        *,
        buckets: int = DEFAULT_BUCKETS,
        key_lifetime: float = DEFAULT_KEY_LIFETIME,
        retention: int = DEFAULT_RETENTION,
    ):
        if buckets < 1:
            raise ValueError("need at least one bucket")
        self.name = name
        self._seed = seed
        self.K = buckets
        self.key_lifetime = key_lifetime
        self.retention = retention
        self.epoch = 0
        self.buckets: dict[str, int] = {}

    def material(self, attribute: str, epoch: int) -> bytes:
        msg = f"{attribute}\x00{epoch}".encode()
        return hmac.new(self._seed, msg, hashlib.sha256).digest()

    def key(self, attribute: str, epoch: int, now: float = 0.0) -> AttributeKey:
        return AttributeKey(self.name, attribute, epoch, now + self.key_lifetime, self.material(attribute, epoch))

    def enroll(self, alias: str, bucket: int) -> None:
        if not 0 <= bucket < self.K:
            raise ValueError(f"bucket {bucket} outside [0, {self.K})")
        self.buckets[alias] = bucket

    def retained_epochs(self) -> range:
        return range(max(0, self.epoch - self.retention + 1), self.epoch + 1)

    def rotate_epoch(self) -> int:
        self.epoch += 1
        return self.epoch


def issue_attribute_keys(
    issuer: KeyIssuer,
    peer_alias: str,
    attributes: Iterable[str],
    epoch: int,
    now: float = 0.0,
) -> list[AttributeKey]:
    """Keys for ``attributes`` plus the peer's own bucket and alias attributes."""
    if peer_alias not in issuer.buckets:
        raise UnknownPeer(peer_alias)
    attrs = set(attributes)
    attrs.add(bucket_attribute(issuer.buckets[peer_alias]))
    attrs.add(alias_attribute(peer_alias))
    return [issuer.key(a, epoch, now) for a in sorted(attrs)]


@dataclass
class KeyRing:
    """Keys one holder received from one issuer."""

    holder: str
    issuer: str
    alias: Optional[str] = None
    bucket: Optional[int] = None
    keys: dict[tuple[str, int], AttributeKey] = field(default_factory=dict)

    def add(self, keys: Iterable[AttributeKey]) -> None:
        for k in keys:
            if k.issuer != self.issuer:
                raise ValueError(f"key from {k.issuer} does not belong on a ring for {self.issuer}")
            prior = self.keys.get((k.attribute, k.epoch))
            if prior is not None and prior.material != k.material:
                raise ValueError(f"conflicting key for {k.attribute}@{k.epoch}")
            if prior is None or k.expiry > prior.expiry:
                self.keys[(k.attribute, k.epoch)] = k

    def attributes(self, epoch: int, now: Optional[float] = None) -> set[str]:
        return {
            a for (a, e), k in self.keys.items() if e == epoch and (now is None or k.expiry >= now)
        }

    def epochs(self) -> set[int]:
        return {e for _, e in self.keys}

    def prune(self, keep_epochs: int) -> None:
        """Keep only the newest ``keep_epochs`` epochs (the pool of recent keys)."""
        live = sorted(self.epochs())[-keep_epochs:] if keep_epochs > 0 else []
        self.keys = {ae: k for ae, k in self.keys.items() if ae[1] in live}


# --------------------------------------------------------------------------
# secret sharing


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def _poly_shares(secret: int, k: int, n: int, rng) -> list[int]:
    coeffs = [secret] + [int.from_bytes(random_bytes(rng, _SHARE_WIDTH), "big") % PRIME for _ in range(k - 1)]
    out = []
    for x in range(1, n + 1):
        y = 0
        for c in reversed(coeffs):
            y = (y * x + c) % PRIME
        out.append(y)
    return out


def _interpolate_zero(points: dict[int, int]) -> int:
    total = 0
    for xi, yi in points.items():
        num, den = 1, 1
        for xj in points:
            if xj != xi:
                num = num * (-xj) % PRIME
                den = den * (xi - xj) % PRIME
        total = (total + yi * num * pow(den, -1, PRIME)) % PRIME
    return total


def split_secret(secret: bytes, k: int, n: int, rng=None) -> list[bytes]:
    """(k, n) threshold shares of an arbitrary byte string; share i is for x = i + 1."""
    chunks = [secret[i : i + _CHUNK] for i in range(0, len(secret), _CHUNK)] or [b""]
    per_chunk = [_poly_shares(int.from_bytes(c, "big"), k, n, rng) for c in chunks]
    return [
        b"".join(ys[i].to_bytes(_SHARE_WIDTH, "big") for ys in per_chunk) for i in range(n)
    ]


def recover_secret(shares: dict[int, bytes], secret_len: int) -> bytes:
    """Rebuild a secret from ``{x: share}`` with at least k entries."""
    n_chunks = max(1, -(-secret_len // _CHUNK))
    out = bytearray()
    for c in range(n_chunks):
        width = min(_CHUNK, secret_len - c * _CHUNK)
        pts = {
            x: int.from_bytes(s[c * _SHARE_WIDTH : (c + 1) * _SHARE_WIDTH], "big") for x, s in shares.items()
        }
        value = _interpolate_zero(pts)
        if value.bit_length() > 8 * max(width, 0):
            raise AccessDenied("threshold shares are inconsistent")
        out += value.to_bytes(max(width, 0), "big")
    return bytes(out)


# --------------------------------------------------------------------------
# policy ciphertexts


@dataclass(frozen=True)
class WrappedGate:
    secret_len: int
    children: tuple["Wrapped", ...]


Wrapped = Union[bytes, WrappedGate]


@dataclass(frozen=True)
class PolicyCiphertext:
    issuer: str
    policy: Policy
    epoch: int
    wrapped: Wrapped
    nonce: bytes
    payload: bytes

    def header(self) -> bytes:
        return tlv.encode(
            [(1, tlv.text(self.issuer)), (2, tlv.text(format_policy(self.policy))), (3, tlv.u64(self.epoch))]
        )

    def to_bytes(self) -> bytes:
        return tlv.encode(
            [
                (1, tlv.text(self.issuer)),
                (2, tlv.text(format_policy(self.policy))),
                (3, tlv.u64(self.epoch)),
                (4, _encode_wrapped(self.wrapped)),
                (5, self.nonce),
                (6, self.payload),
            ]
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PolicyCiphertext":
        f = tlv.decode(raw, {1: True, 2: True, 3: True, 4: True, 5: True, 6: True})
        try:
            policy = parse_policy(tlv.read_text(f[2]))
        except InvalidPolicy as exc:
            raise tlv.MalformedEncoding(f"bad policy header: {exc}") from exc
        wrapped = _decode_wrapped(f[4], policy)
        return cls(tlv.read_text(f[1]), policy, tlv.read_u64(f[3]), wrapped, f[5], f[6])


def _encode_wrapped(w: Wrapped) -> bytes:
    if isinstance(w, bytes):
        return w
    return w.secret_len.to_bytes(4, "big") + tlv.pack_list(_encode_wrapped(c) for c in w.children)


def _decode_wrapped(raw: bytes, policy: Policy) -> Wrapped:
    if isinstance(policy, Leaf):
        return raw
    if len(raw) < 4:
        raise tlv.MalformedEncoding("truncated wrapped gate")
    items = tlv.unpack_list(raw[4:])
    if len(items) != len(policy.children):
        raise tlv.MalformedEncoding("wrapped structure does not mirror the policy")
    kids = tuple(_decode_wrapped(i, c) for i, c in zip(items, policy.children))
    return WrappedGate(int.from_bytes(raw[:4], "big"), kids)


def _leaf_aad(issuer: str, attribute: str, epoch: int) -> bytes:
    return f"{issuer}\x00{attribute}\x00{epoch}".encode()


def _wrap(node: Policy, secret: bytes, issuer: KeyIssuer, epoch: int, rng) -> Wrapped:
    if isinstance(node, Leaf):
        nonce = random_bytes(rng, _NONCE)
        key = issuer.material(node.attribute, epoch)
        return nonce + AESGCM(key).encrypt(nonce, secret, _leaf_aad(issuer.name, node.attribute, epoch))
    if isinstance(node, Or):
        shares = [secret] * len(node.children)
    elif isinstance(node, And):
        shares = [random_bytes(rng, len(secret)) for _ in node.children[:-1]]
        last = secret
        for s in shares:
            last = _xor(last, s)
        shares.append(last)
    else:
        shares = split_secret(secret, node.k, len(node.children), rng)
    kids = tuple(_wrap(c, s, issuer, epoch, rng) for c, s in zip(node.children, shares))
    return WrappedGate(len(secret), kids)


def _unwrap(node: Policy, w: Wrapped, ring: KeyRing, attrs: set[str], epoch: int) -> bytes:
    if isinstance(node, Leaf):
        if not isinstance(w, bytes) or len(w) < _NONCE:
            raise AccessDenied("malformed leaf capsule")
        key = ring.keys[(node.attribute, epoch)].material
        try:
            return AESGCM(key).decrypt(w[:_NONCE], w[_NONCE:], _leaf_aad(ring.issuer, node.attribute, epoch))
        except InvalidTag as exc:
            raise AccessDenied(f"key for {node.attribute}@{epoch} does not open this capsule") from exc
    if not isinstance(w, WrappedGate) or len(w.children) != len(node.children):
        raise AccessDenied("capsule does not mirror the policy")
    usable = [i for i, c in enumerate(node.children) if evaluate_policy(c, attrs)]
    if isinstance(node, Or):
        return _unwrap(node.children[usable[0]], w.children[usable[0]], ring, attrs, epoch)
    if isinstance(node, And):
        out = bytes(w.secret_len)
        for c, cw in zip(node.children, w.children):
            out = _xor(out, _unwrap(c, cw, ring, attrs, epoch))
        return out
    chosen = usable[: node.k]
    shares = {i + 1: _unwrap(node.children[i], w.children[i], ring, attrs, epoch) for i in chosen}
    return recover_secret(shares, w.secret_len)


def encrypt_with_policy(
    plaintext: bytes,
    policy: Policy,
    epoch: int,
    issuer: KeyIssuer,
    rng: Optional[random.Random] = None,
) -> PolicyCiphertext:
    policy = validate(policy)
    sk = random_bytes(rng, 32)
    wrapped = _wrap(policy, sk, issuer, epoch, rng)
    nonce = random_bytes(rng, _NONCE)
    shell = PolicyCiphertext(issuer.name, policy, epoch, wrapped, nonce, b"")
    payload = AESGCM(sk).encrypt(nonce, plaintext, shell.header())
    return PolicyCiphertext(issuer.name, policy, epoch, wrapped, nonce, payload)


def decrypt_with_keyring(ct: PolicyCiphertext, ring: KeyRing, now: Optional[float] = None) -> bytes:
    if ring.issuer != ct.issuer:
        raise AccessDenied(f"ring holds keys of {ring.issuer}, ciphertext is from {ct.issuer}")
    attrs = ring.attributes(ct.epoch, now)
    if not evaluate_policy(ct.policy, attrs):
        raise AccessDenied(f"attributes at epoch {ct.epoch} do not satisfy {format_policy(ct.policy)}")
    sk = _unwrap(ct.policy, ct.wrapped, ring, attrs, ct.epoch)
    if len(sk) != 32:
        raise AccessDenied("recovered key has the wrong length")
    try:
        return AESGCM(sk).decrypt(ct.nonce, ct.payload, ct.header())
    except InvalidTag as exc:
        raise IntegrityFailure("payload authentication failed") from exc


def master_ring(issuer: KeyIssuer, policy: Policy, epoch: int, holder: Optional[str] = None) -> KeyRing:
    """A ring holding every key ``policy`` mentions; what the issuer itself uses."""
    ring = KeyRing(holder or issuer.name, issuer.name)
    ring.add(issuer.key(a, epoch) for a in attributes_of(policy))
    return ring
