"""Network objects and the structures built from them.

An object has three field groups.  The public group (name, version,
application, signature) is in clear.  The follower group carries the data key
and link fields sealed under the follower policy (FP); the data itself is
encrypted under that key and stored alongside.  The distributor group carries
the thread-update name and pointer sealed under the distributor policy (DP).

Butlers keep plaintext :class:`ObjectDraft` records and seal them into
:class:`NetworkObject` on publication; feeds, fragments and indexes are
manipulated as drafts.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import random
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping, Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import tlv
from .crypto import (
    AttributeKey,
    Identity,
    IntegrityFailure,
    KeyIssuer,
    KeyRing,
    PolicyCiphertext,
    decrypt_with_keyring,
    encrypt_with_policy,
    random_bytes,
    sign_object,
    verify_object,
)
from .naming import (
    ContentName,
    FolderName,
    MalformedName,
    index_name,
    parse_folder,
    parse_name,
)
from .policy import Policy
from .tlv import MalformedEncoding

DEFAULT_CHUNK_SIZE = 64 * 1024
FRAGMENT_HASH = "sha256"


class NameNotOwned(ValueError):
    pass


class NotTail(ValueError):
    pass


class NotInFeed(KeyError):
    pass


class OrderViolation(ValueError):
    pass


class EmptyData(ValueError):
    pass


def _name_bytes(name: Optional[ContentName]) -> Optional[bytes]:
    return None if name is None else str(name).encode()


def _read_name(raw: bytes) -> ContentName:
    try:
        return parse_name(tlv.read_text(raw))
    except MalformedName as exc:
        raise MalformedEncoding(str(exc)) from exc


@dataclass(frozen=True)
class Links:
    reference: Optional[ContentName] = None
    next: Optional[ContentName] = None
    previous: Optional[ContentName] = None
    segment_seed: Optional[bytes] = None
    number_of_segments: Optional[int] = None

    def __post_init__(self):
        if (self.segment_seed is None) != (self.number_of_segments is None):
            raise ValueError("segment_seed and number_of_segments go together")
        if self.segment_seed is not None and len(self.segment_seed) != 16:
            raise ValueError("segment_seed must be 16 bytes")
        if self.number_of_segments is not None and self.number_of_segments < 1:
            raise ValueError("number_of_segments must be >= 1")


@dataclass(frozen=True)
class TuRef:
    name: ContentName
    pointer: ContentName


@dataclass(frozen=True)
class ObjectDraft:
    name: ContentName
    payload: bytes
    fp: Policy
    dp: Policy
    tu: TuRef
    links: Links = Links()
    version: int = 1


@dataclass(frozen=True)
class NetworkObject:
    content_name: ContentName
    version: int
    application: str
    follower: bytes
    distributor: bytes
    payload: bytes
    signature: bytes = b""

    @property
    def producer(self) -> str:
        return self.content_name.producer

    def signing_bytes(self) -> bytes:
        return encode_object(replace(self, signature=b""))


@dataclass(frozen=True)
class FollowerView:
    secret_key: bytes = field(repr=False)
    links: Links
    data: bytes


_OBJECT_FIELDS = {i: True for i in range(1, 8)}


def encode_object(obj: NetworkObject) -> bytes:
    return tlv.encode(
        [
            (1, _name_bytes(obj.content_name)),
            (2, tlv.u64(obj.version)),
            (3, tlv.text(obj.application)),
            (4, obj.follower),
            (5, obj.distributor),
            (6, obj.payload),
            (7, obj.signature),
        ]
    )


def decode_object(raw: bytes) -> NetworkObject:
    f = tlv.decode(raw, _OBJECT_FIELDS)
    version = tlv.read_u64(f[2])
    if version < 1:
        raise MalformedEncoding("version must be >= 1")
    return NetworkObject(
        _read_name(f[1]), version, tlv.read_text(f[3]), f[4], f[5], f[6], f[7]
    )


def _encode_follower(sk: bytes, links: Links) -> bytes:
    count = links.number_of_segments
    return tlv.encode(
        [
            (1, sk),
            (2, _name_bytes(links.reference)),
            (3, _name_bytes(links.next)),
            (4, _name_bytes(links.previous)),
            (5, links.segment_seed),
            (6, None if count is None else tlv.u64(count)),
        ]
    )


def _decode_follower(raw: bytes) -> tuple[bytes, Links]:
    f = tlv.decode(raw, {1: True, 2: False, 3: False, 4: False, 5: False, 6: False})
    opt = lambda i: _read_name(f[i]) if i in f else None  # noqa: E731
    try:
        links = Links(
            opt(2), opt(3), opt(4), f.get(5), tlv.read_u64(f[6]) if 6 in f else None
        )
    except ValueError as exc:
        raise MalformedEncoding(str(exc)) from exc
    return f[1], links


def seal(
    draft: ObjectDraft,
    producer: Identity,
    issuer: KeyIssuer,
    epoch: int,
    rng: Optional[random.Random] = None,
) -> NetworkObject:
    """Encrypt and sign a draft."""
    if draft.name.producer != producer.name:
        raise NameNotOwned(f"{draft.name} is not owned by {producer.name}")
    if draft.version < 1:
        raise ValueError("version must be >= 1")
    sk = random_bytes(rng, 32)
    nonce = random_bytes(rng, 12)
    payload = nonce + AESGCM(sk).encrypt(nonce, draft.payload, str(draft.name).encode())
    follower = encrypt_with_policy(_encode_follower(sk, draft.links), draft.fp, epoch, issuer, rng)
    dist_plain = tlv.encode([(1, _name_bytes(draft.tu.name)), (2, _name_bytes(draft.tu.pointer))])
    distributor = encrypt_with_policy(dist_plain, draft.dp, epoch, issuer, rng)
    unsigned = NetworkObject(
        draft.name,
        draft.version,
        draft.name.application,
        follower.to_bytes(),
        distributor.to_bytes(),
        payload,
    )
    return replace(unsigned, signature=sign_object(producer, unsigned.signing_bytes()))


def build_object(
    producer: Identity,
    issuer: KeyIssuer,
    name: ContentName,
    payload: bytes,
    fp: Policy,
    dp: Policy,
    links: Links,
    tu: TuRef,
    epoch: int,
    rng: Optional[random.Random] = None,
) -> NetworkObject:
    return seal(ObjectDraft(name, payload, fp, dp, tu, links), producer, issuer, epoch, rng)


def verify_signature(obj: NetworkObject, public_key: bytes) -> bool:
    return verify_object(public_key, obj.signing_bytes(), obj.signature)


def follower_ciphertext(obj: NetworkObject) -> PolicyCiphertext:
    return PolicyCiphertext.from_bytes(obj.follower)


def distributor_ciphertext(obj: NetworkObject) -> PolicyCiphertext:
    return PolicyCiphertext.from_bytes(obj.distributor)


def open_follower(obj: NetworkObject, ring: KeyRing, now: Optional[float] = None) -> FollowerView:
    """Decrypt the follower group and the data; raises AccessDenied / IntegrityFailure."""
    sk, links = _decode_follower(decrypt_with_keyring(follower_ciphertext(obj), ring, now))
    nonce, body = obj.payload[:12], obj.payload[12:]
    try:
        data = AESGCM(sk).decrypt(nonce, body, str(obj.content_name).encode())
    except InvalidTag as exc:
        raise IntegrityFailure("object payload authentication failed") from exc
    return FollowerView(sk, links, data)


def open_distributor(obj: NetworkObject, ring: KeyRing, now: Optional[float] = None) -> TuRef:
    raw = decrypt_with_keyring(distributor_ciphertext(obj), ring, now)
    f = tlv.decode(raw, {1: True, 2: True})
    return TuRef(_read_name(f[1]), _read_name(f[2]))


# --------------------------------------------------------------------------
# thread-update commands


class TuKind(str, enum.Enum):
    ADD = "ADD"
    DELETE = "DELETE"
    UPDATE = "UPDATE"
    CUT = "CUT"


@dataclass(frozen=True)
class ThreadUpdateCommand:
    """One control command.  ``span`` lists the names a CUT removes, in chain order."""

    kind: TuKind
    x: ContentName
    y: Optional[ContentName] = None
    x2: Optional[ContentName] = None
    y2: Optional[ContentName] = None
    span: tuple[ContentName, ...] = ()
    seq: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TuKind(self.kind))
        if self.kind in (TuKind.UPDATE, TuKind.CUT) and self.y is None:
            raise ValueError(f"{self.kind.value} needs two names")
        if self.kind in (TuKind.ADD, TuKind.DELETE) and (self.y or self.x2 or self.y2):
            raise ValueError(f"{self.kind.value} takes one name")

    def names(self) -> tuple[ContentName, ...]:
        return tuple(n for n in (self.x, self.y, self.x2, self.y2, *self.span) if n is not None)

    def to_bytes(self) -> bytes:
        return tlv.encode(
            [
                (1, tlv.text(self.kind.value)),
                (2, tlv.u64(self.seq)),
                (3, _name_bytes(self.x)),
                (4, _name_bytes(self.y)),
                (5, _name_bytes(self.x2)),
                (6, _name_bytes(self.y2)),
                (7, tlv.pack_list(str(n).encode() for n in self.span) if self.span else None),
            ]
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ThreadUpdateCommand":
        f = tlv.decode(raw, {1: True, 2: True, 3: True, 4: False, 5: False, 6: False, 7: False})
        opt = lambda i: _read_name(f[i]) if i in f else None  # noqa: E731
        span = tuple(_read_name(s) for s in tlv.unpack_list(f[7])) if 7 in f else ()
        try:
            return cls(TuKind(tlv.read_text(f[1])), _read_name(f[3]), opt(4), opt(5), opt(6), span, tlv.read_u64(f[2]))
        except ValueError as exc:
            raise MalformedEncoding(str(exc)) from exc

    def __str__(self) -> str:
        args = ",".join(str(n) for n in (self.x, self.y, self.x2, self.y2) if n is not None)
        return f"{self.kind.value}({args})"


# --------------------------------------------------------------------------
# feeds


def append_feed_entry(tail: ObjectDraft, entry: ObjectDraft) -> tuple[ObjectDraft, ObjectDraft]:
    """Link ``entry`` after ``tail``; returns the re-issued tail and the linked entry."""
    if tail.links.next is not None:
        raise NotTail(f"{tail.name} already has a successor")
    entry = replace(entry, links=replace(entry.links, previous=tail.name, next=None))
    tail = replace(tail, links=replace(tail.links, next=entry.name), version=tail.version + 1)
    return tail, entry


class Feed:
    """A doubly-linked chain of drafts held by its producer."""

    def __init__(self, head: Optional[ObjectDraft] = None):
        self.entries: dict[ContentName, ObjectDraft] = {}
        self.head: Optional[ContentName] = None
        self.tail: Optional[ContentName] = None
        if head is not None:
            self.start(head)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name) -> bool:
        return name in self.entries

    def __getitem__(self, name: ContentName) -> ObjectDraft:
        return self.entries[name]

    def start(self, head: ObjectDraft) -> ObjectDraft:
        if self.entries:
            raise ValueError("feed already started")
        head = replace(head, links=replace(head.links, previous=None, next=None))
        self.entries[head.name] = head
        self.head = self.tail = head.name
        return head

    def append(self, entry: ObjectDraft) -> tuple[Optional[ObjectDraft], ObjectDraft]:
        """Append; returns (re-issued old tail or None, new entry)."""
        if self.tail is None:
            return None, self.start(entry)
        old_tail, entry = append_feed_entry(self.entries[self.tail], entry)
        self.entries[old_tail.name] = old_tail
        self.entries[entry.name] = entry
        self.tail = entry.name
        return old_tail, entry

    def replace(self, draft: ObjectDraft) -> None:
        """Store a re-issued draft under its existing name, keeping the links."""
        old = self.entries[draft.name]
        self.entries[draft.name] = replace(draft, links=replace(draft.links, next=old.links.next, previous=old.links.previous))

    def forward(self) -> Iterator[ContentName]:
        cur = self.head
        while cur is not None:
            yield cur
            cur = self.entries[cur].links.next

    def backward(self) -> Iterator[ContentName]:
        cur = self.tail
        while cur is not None:
            yield cur
            cur = self.entries[cur].links.previous

    def check(self) -> None:
        """Raise AssertionError unless the chain is a consistent doubly-linked list."""
        if not self.entries:
            assert self.head is None and self.tail is None
            return
        heads = [n for n, d in self.entries.items() if d.links.previous is None]
        tails = [n for n, d in self.entries.items() if d.links.next is None]
        assert heads == [self.head] and tails == [self.tail], (heads, tails)
        for name, d in self.entries.items():
            if d.links.next is not None:
                assert self.entries[d.links.next].links.previous == name
            if d.links.previous is not None:
                assert self.entries[d.links.previous].links.next == name
        fwd = list(self.forward())
        assert len(fwd) == len(self.entries) and fwd[::-1] == list(self.backward())

    def cut(
        self, x: ContentName, y: ContentName
    ) -> tuple[Optional[ObjectDraft], Optional[ObjectDraft], ThreadUpdateCommand]:
        return cut_feed(self, x, y)


def cut_feed(
    feed: Feed, x: ContentName, y: ContentName
) -> tuple[Optional[ObjectDraft], Optional[ObjectDraft], ThreadUpdateCommand]:
    """Remove the interval [x, y] and relink its neighbours.

    Returns the re-issued predecessor, the re-issued successor (either may be
    None at a boundary) and the CUT command to announce.
    """
    if x not in feed:
        raise NotInFeed(x)
    if y not in feed:
        raise NotInFeed(y)
    span = []
    cur = x
    while True:
        span.append(cur)
        if cur == y:
            break
        cur = feed[cur].links.next
        if cur is None:
            raise OrderViolation(f"{y} does not follow {x}")
    before = feed[x].links.previous
    after = feed[y].links.next
    for n in span:
        del feed.entries[n]
    pred = succ = None
    if before is not None:
        d = feed.entries[before]
        pred = replace(d, links=replace(d.links, next=after), version=d.version + 1)
        feed.entries[before] = pred
    else:
        feed.head = after
    if after is not None:
        d = feed.entries[after]
        succ = replace(d, links=replace(d.links, previous=before), version=d.version + 1)
        feed.entries[after] = succ
    else:
        feed.tail = before
    cmd = ThreadUpdateCommand(TuKind.CUT, x, y, before, after, tuple(span))
    return pred, succ, cmd


# --------------------------------------------------------------------------
# fragmented files


def fragment_name(seed: bytes, i: int, hash_name: str = FRAGMENT_HASH) -> str:
    """Appendix of fragment ``i`` (1-based): H(seed || be32(i)) truncated to 32 hex."""
    if i < 1:
        raise ValueError("fragments are numbered from 1")
    return hashlib.new(hash_name, seed + i.to_bytes(4, "big")).hexdigest()[:32]


@dataclass(frozen=True)
class FragmentSet:
    folder: FolderName
    seed: bytes
    count: int

    def names(self, hash_name: str = FRAGMENT_HASH) -> list[ContentName]:
        return [self.folder.name(fragment_name(self.seed, i, hash_name)) for i in range(1, self.count + 1)]


def fragment_file(
    data: bytes,
    chunk_size: int,
    folder: FolderName,
    seed: bytes,
    *,
    fp: Policy,
    dp: Policy,
    tu: TuRef,
    hash_name: str = FRAGMENT_HASH,
) -> tuple[FragmentSet, list[ObjectDraft]]:
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if not data:
        raise EmptyData("nothing to fragment")
    count = math.ceil(len(data) / chunk_size)
    fs = FragmentSet(folder, seed, count)
    links = Links(segment_seed=seed, number_of_segments=count)
    drafts = [
        ObjectDraft(name, data[i * chunk_size : (i + 1) * chunk_size], fp, dp, tu, links)
        for i, name in enumerate(fs.names(hash_name))
    ]
    return fs, drafts


def reassemble(fragments: FragmentSet, chunks: Mapping[ContentName, bytes], hash_name: str = FRAGMENT_HASH) -> bytes:
    """Concatenate fragment payloads in index order, whatever order they arrived in."""
    names = fragments.names(hash_name)
    missing = [n for n in names if n not in chunks]
    if missing:
        raise KeyError(f"{len(missing)} fragment(s) missing")
    return b"".join(chunks[n] for n in names)


# --------------------------------------------------------------------------
# index objects


def encode_index(entries: Mapping[str, ContentName]) -> bytes:
    return json.dumps({k: str(v) for k, v in entries.items()}, sort_keys=True).encode()


def decode_index(raw: bytes) -> dict[str, ContentName]:
    try:
        return {k: parse_name(v) for k, v in json.loads(raw.decode()).items()}
    except (ValueError, AttributeError) as exc:
        raise MalformedEncoding(f"bad index payload: {exc}") from exc


def build_index(
    prefix: FolderName,
    entries: Mapping[str, ContentName],
    *,
    fp: Policy,
    dp: Policy,
    tu: TuRef,
    previous: Optional[ObjectDraft] = None,
) -> ObjectDraft:
    """Draft the index object of an application prefix.

    Passing the prior index draft re-issues it with the version bumped.
    """
    prefix = prefix.application_prefix
    for label, name in entries.items():
        if not label:
            raise ValueError("index labels must be non-empty")
        if name.producer != prefix.producer:
            raise ValueError(f"{name} is not under {prefix.producer}")
    version = 1 if previous is None else previous.version + 1
    return ObjectDraft(index_name(prefix), encode_index(entries), fp, dp, tu, Links(), version)


# --------------------------------------------------------------------------
# distribution certificates


def _encode_key(k: AttributeKey) -> bytes:
    return tlv.encode(
        [
            (1, tlv.text(k.issuer)),
            (2, tlv.text(k.attribute)),
            (3, tlv.u64(k.epoch)),
            (4, struct.pack(">d", k.expiry)),
            (5, k.material),
        ]
    )


def _decode_key(raw: bytes) -> AttributeKey:
    f = tlv.decode(raw, {1: True, 2: True, 3: True, 4: True, 5: True})
    return AttributeKey(
        tlv.read_text(f[1]), tlv.read_text(f[2]), tlv.read_u64(f[3]), _read_float(f[4]), f[5]
    )


def _read_float(raw: bytes) -> float:
    if len(raw) != 8:
        raise MalformedEncoding("float field must be 8 bytes")
    return struct.unpack(">d", raw)[0]


@dataclass(frozen=True)
class DistributionCertificate:
    """Signed grant letting ``holder`` cache and serve ``folder`` until ``expiry``.

    ``distributors`` lists every distributor of the folder and its subfolders;
    ``keys`` is the key material that satisfies the folder's distributor policy.
    """

    identity: str
    folder: FolderName
    holder: str
    distributors: tuple[str, ...]
    keys: tuple[AttributeKey, ...]
    expiry: float
    signature: bytes = b""

    def to_bytes(self) -> bytes:
        return tlv.encode(
            [
                (1, tlv.text(self.identity)),
                (2, tlv.text(str(self.folder))),
                (3, tlv.text(self.holder)),
                (4, tlv.pack_list(d.encode() for d in self.distributors)),
                (5, tlv.pack_list(_encode_key(k) for k in self.keys)),
                (6, struct.pack(">d", self.expiry)),
                (7, self.signature),
            ]
        )

    def signing_bytes(self) -> bytes:
        return replace(self, signature=b"").to_bytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "DistributionCertificate":
        f = tlv.decode(raw, {i: True for i in range(1, 8)})
        try:
            folder = parse_folder(tlv.read_text(f[2]))
        except MalformedName as exc:
            raise MalformedEncoding(str(exc)) from exc
        return cls(
            tlv.read_text(f[1]),
            folder,
            tlv.read_text(f[3]),
            tuple(tlv.read_text(d) for d in tlv.unpack_list(f[4])),
            tuple(_decode_key(k) for k in tlv.unpack_list(f[5])),
            _read_float(f[6]),
            f[7],
        )

    def sign(self, identity: Identity) -> "DistributionCertificate":
        return replace(self, signature=sign_object(identity, self.signing_bytes()))

    def verify(self, public_key: bytes) -> bool:
        return verify_object(public_key, self.signing_bytes(), self.signature)
