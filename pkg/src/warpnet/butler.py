"""Butlers: each user's authoritative node.

A butler holds its owner's identity, attribute issuer and social graph, keeps
every object the owner produced, and is the root source for all of them.  It
also acts as the owner's client when reading other users' content.

Conventions used throughout:

* Every folder ``F`` has a thread-update feed at ``F/tu`` whose genesis entry
  is ``F/tu/000...0``.  A command emitted for ``F`` is appended to the TU of
  ``F`` and to the TU of every ancestor, so following a parent TU covers the
  whole subtree.
* Standalone content that changes (update, re-encryption) moves to a fresh
  name ``Y`` and the TU carries ``UPDATE(X, Y)``.  Structural objects (feed
  entries, fragments, the index) are re-issued in place and carry
  ``UPDATE(X, X)`` with the version bumped.
* Feeds are chains of thin entries whose ``reference`` points at the post, so
  a reader can walk a feed even past posts it may not decrypt.
"""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Optional

from .crypto import (
    DAY,
    AccessDenied,
    AttributeKey,
    BadCertificate,
    Identity,
    IntegrityFailure,
    KeyIssuer,
    KeyRing,
    PublicIdentity,
    UnknownPeer,
    issue_attribute_keys,
    sign_object,
    verify_identity,
    verify_object,
)
from .distributor import DEFAULT_POPULARITY_WINDOW, PopularityCounter
from .naming import (
    INDEX_SEGMENT,
    ContentName,
    FolderName,
    MalformedName,
    generate_segment,
    index_name,
    parse_folder,
    parse_name,
    tu_folder,
    tu_head,
)
from .netsim import DEFAULT_ROUTE_TTL, Call, Message, MsgKind, Node, RoutingTable, Sleep, Unresolvable
from .objects import (
    DEFAULT_CHUNK_SIZE,
    DistributionCertificate,
    Feed,
    FragmentSet,
    Links,
    NetworkObject,
    ObjectDraft,
    ThreadUpdateCommand,
    TuKind,
    TuRef,
    decode_index,
    decode_object,
    encode_index,
    encode_object,
    follower_ciphertext,
    fragment_file,
    open_follower,
    reassemble,
    seal,
    verify_signature,
)
from .policy import (
    Leaf,
    Or,
    Policy,
    alias_attribute,
    any_of,
    attributes_of,
    bucket_attribute,
    rewrite_policy_for_revocation,
    validate,
)
from .tlv import MalformedEncoding

log = logging.getLogger(__name__)


class Unauthorized(PermissionError):
    pass


class NotFound(KeyError):
    pass


class NotOwned(ValueError):
    pass


class NoSuchApplication(KeyError):
    pass


class BadSignature(ValueError):
    pass


# kinds of owned records
POST = "post"  # standalone content: moves to a new name when it changes
ENTRY = "entry"  # feed entry
FRAGMENT = "fragment"
INDEX = "index"
IN_PLACE = frozenset({ENTRY, FRAGMENT, INDEX})


def dist_attribute(folder: FolderName) -> str:
    """Attribute a distributor of ``folder`` holds."""
    if folder.folders:
        return f"dist:{folder.application}:{folder.folders[-1]}"
    return f"dist:{folder.application}"


def distributor_policy(folder: FolderName) -> Policy:
    """DP of objects in ``folder``: any distributor of it or of an ancestor."""
    return any_of(dist_attribute(f) for f in folder.ancestors())


def notify_statement(content_name: ContentName, checksum: bytes) -> bytes:
    return b"warp-notify\x00" + str(content_name).encode() + b"\x00" + checksum


@dataclass
class ButlerConfig:
    lazy_reencryption: bool = True
    certificate_lifetime: float = 30 * DAY
    route_ttl: float = DEFAULT_ROUTE_TTL
    chunk_size: int = DEFAULT_CHUNK_SIZE
    max_attempts: int = 5
    popularity_window: float = DEFAULT_POPULARITY_WINDOW


# --------------------------------------------------------------------------
# social graph


@dataclass
class Peer:
    identity: PublicIdentity
    alias: str
    bucket: int
    categories: set[str] = field(default_factory=set)

    @property
    def name(self) -> str:
        return self.identity.name


class SocialGraph:
    """Peers the owner has categorized, each with one alias and one bucket."""

    def __init__(self, issuer: KeyIssuer, rng: random.Random):
        self.issuer = issuer
        self.rng = rng
        self.peers: dict[str, Peer] = {}
        self.self_alias = self._fresh_alias()
        issuer.enroll(self.self_alias, rng.randrange(issuer.K))

    def _fresh_alias(self) -> str:
        while True:
            alias = generate_segment(self.rng)
            if alias not in self.issuer.buckets:
                return alias

    def categorize(self, peer: PublicIdentity, categories: Iterable[str]) -> Peer:
        cats = set(categories)
        for c in cats:
            validate(Leaf(c))
        existing = self.peers.get(peer.name)
        if existing is not None:
            existing.categories = cats
            return existing
        alias = self._fresh_alias()
        bucket = self.rng.randrange(self.issuer.K)
        self.issuer.enroll(alias, bucket)
        p = Peer(peer, alias, bucket, cats)
        self.peers[peer.name] = p
        return p

    def peer(self, name: str) -> Peer:
        try:
            return self.peers[name]
        except KeyError:
            raise UnknownPeer(name) from None

    def attributes(self, name: str) -> set[str]:
        """Every attribute ``name`` can hold: categories, bucket and alias."""
        p = self.peer(name)
        return p.categories | {bucket_attribute(p.bucket), alias_attribute(p.alias)}

    def members(self, category: str) -> list[Peer]:
        return [p for p in self.peers.values() if category in p.categories]


# --------------------------------------------------------------------------
# owned state


@dataclass
class OwnedContentRecord:
    name: ContentName
    kind: str
    draft: ObjectDraft
    fp_original: Policy
    epoch: int = 0
    sealed: bool = False
    shrinkable: bool = False
    pinned: bool = False  # name-scoped exclusions never shrink back
    feed: Optional[tuple[str, str]] = None

    @property
    def fp(self) -> Policy:
        return self.draft.fp


@dataclass
class TuFeed:
    folder: FolderName
    feed: Feed
    seq: int = 0


@dataclass
class FeedState:
    folder: FolderName
    fp: Policy
    feed: Feed = field(default_factory=Feed)


@dataclass
class Application:
    name: str
    records: dict[int, tuple[Any, Any]] = field(default_factory=dict)  # id -> (owner app, value)
    inbox: list[dict] = field(default_factory=list)
    subscribed: bool = False
    accept: Optional[Callable[[str, dict], bool]] = None
    index: dict[str, ContentName] = field(default_factory=dict)
    index_fp: Optional[Policy] = None


@dataclass
class FetchResult:
    requested: ContentName
    status: str  # ok | denied | not_found | unreachable | invalid
    name: Optional[ContentName] = None
    version: Optional[int] = None
    data: Optional[bytes] = None
    links: Optional[Links] = None
    via: Optional[str] = None
    time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def visible(self) -> bool:
        return self.name is not None


class Butler(Node):
    def __init__(
        self,
        node_id: str,
        identity: Identity,
        issuer: KeyIssuer,
        rng: random.Random,
        config: Optional[ButlerConfig] = None,
    ):
        super().__init__(node_id)
        if issuer.name != identity.name:
            raise ValueError("issuer must belong to the identity")
        self.identity = identity
        self.issuer = issuer
        self.rng = rng
        self.config = config or ButlerConfig()
        self.social = SocialGraph(issuer, rng)
        self.apps: dict[str, Application] = {}
        self.folders: dict[tuple[str, str], FolderName] = {}
        self.tus: dict[FolderName, TuFeed] = {}
        self.feeds: dict[tuple[str, str], FeedState] = {}
        self.records: dict[ContentName, OwnedContentRecord] = {}
        self.objects: dict[ContentName, NetworkObject] = {}
        self.lineage: dict[ContentName, ContentName] = {}
        self.deleted: set[ContentName] = set()
        self.fragment_sets: dict[ContentName, FragmentSet] = {}
        # (time, name, lowest valid version); removal uses infinity
        self.invalidations: list[tuple[float, ContentName, float]] = []
        self.emitted: list[tuple[FolderName, ThreadUpdateCommand]] = []
        self.certificates: dict[FolderName, dict[str, DistributionCertificate]] = {}
        self.popularity = PopularityCounter(self.config.popularity_window)
        self._used: set[ContentName] = set()
        self._next_record = 1
        # consumer side
        self.rings: dict[str, KeyRing] = {}
        self.routes = RoutingTable()
        self.known_distributors: dict[FolderName, set[str]] = {}
        self.next_allowed: dict[str, float] = {}
        self.fetch_log: list[FetchResult] = []

    @property
    def name(self) -> str:
        return self.identity.name

    def attach(self, net) -> None:
        super().attach(net)
        net.address_book[self.name] = self.node_id
        net.directory[self.name] = self.identity.public

    # ------------------------------------------------------------------
    # social graph and keys

    def categorize_user(self, peer: PublicIdentity, categories: Iterable[str]) -> Peer:
        ia_key = self.net.authorities.get(peer.ia) if self.net else None
        if ia_key is None or not verify_identity(peer, ia_key):
            raise BadCertificate(f"{peer.name} is not certified by a known IA")
        return self.social.categorize(peer, categories)

    def handle_key_request(self, peer_name: str, epoch: Optional[int] = None) -> list[AttributeKey]:
        """Keys implied by the peer's categories, alias and bucket."""
        if peer_name not in self.social.peers:
            raise Unauthorized(f"{peer_name} is not categorized by {self.name}")
        peer = self.social.peers[peer_name]
        if epoch is None or epoch not in self.issuer.retained_epochs():
            epoch = self.issuer.epoch
        return issue_attribute_keys(self.issuer, peer.alias, peer.categories, epoch, self.now)

    def distributor_keys(self, holder: str) -> list[AttributeKey]:
        keys = []
        for folder, certs in self.certificates.items():
            cert = certs.get(holder)
            if cert is not None and cert.expiry > self.now:
                keys += [self.issuer.key(dist_attribute(folder), e, self.now) for e in self.issuer.retained_epochs()]
        return keys

    def on_key_request(self, msg: Message) -> None:
        body = msg.body or {}
        if body.get("role") == "distributor":
            keys = self.distributor_keys(msg.src)
        else:
            identity = body.get("identity", "")
            # the address book stands in for transport authentication
            if self.net.address_book.get(identity) != msg.src:
                self.reply(msg, MsgKind.NACK, msg.name, {"reason": "unauthorized"})
                return
            try:
                keys = self.handle_key_request(identity, body.get("epoch"))
            except Unauthorized:
                self.reply(msg, MsgKind.NACK, msg.name, {"reason": "unauthorized"})
                return
        self.count("keys_issued", len(keys))
        self.reply(msg, MsgKind.KEY_REPLY, msg.name, {"keys": keys})

    # ------------------------------------------------------------------
    # applications, folders, TU feeds

    def register_app(self, app: str, accept: Optional[Callable[[str, dict], bool]] = None) -> FolderName:
        if app not in self.apps:
            self.apps[app] = Application(app, accept=accept)
        return self.folder(app)

    def application(self, app: str) -> Application:
        try:
            return self.apps[app]
        except KeyError:
            raise NoSuchApplication(app) from None

    def folder(self, app: str, label: str = "") -> FolderName:
        """Folder for a ``/``-separated label path, created on first use."""
        self.application(app)
        key = (app, label)
        if key in self.folders:
            return self.folders[key]
        if label:
            parent_label, _, _ = label.rpartition("/")
            parent = self.folder(app, parent_label)
            while True:
                f = parent.child(generate_segment(self.rng))
                if f not in self.tus:
                    break
        else:
            f = FolderName(self.identity.ia, self.identity.username, app)
        self.folders[key] = f
        self._tu(f)
        return f

    def _tu(self, folder: FolderName) -> TuFeed:
        tu = self.tus.get(folder)
        if tu is not None:
            return tu
        if folder.folders:
            self._tu(folder.ancestors()[1])
        dp = distributor_policy(folder)
        head = tu_head(folder)
        genesis = ObjectDraft(head, b"", dp, dp, TuRef(head, head))
        tu = TuFeed(folder, Feed(genesis))
        self.tus[folder] = tu
        self._used.add(head)
        self._seal_tu_entry(tu.feed[head])
        return tu

    def _seal_tu_entry(self, draft: ObjectDraft) -> None:
        self.objects[draft.name] = seal(draft, self.identity, self.issuer, self.issuer.epoch, self.rng)

    def _emit(self, folder: FolderName, kind: TuKind, x, y=None, x2=None, y2=None, span=()) -> None:
        """Append one command to the TU of ``folder`` and mirror it up the tree."""
        for f in folder.ancestors():
            tu = self._tu(f)
            tu.seq += 1
            cmd = ThreadUpdateCommand(kind, x, y, x2, y2, tuple(span), tu.seq)
            dp = distributor_policy(f)
            head = tu_head(f)
            name = self._fresh_name(tu_folder(f))
            old_tail, entry = tu.feed.append(ObjectDraft(name, cmd.to_bytes(), dp, dp, TuRef(head, head)))
            if old_tail is not None:
                self._seal_tu_entry(old_tail)
            self._seal_tu_entry(entry)
            if f == folder:
                self.emitted.append((folder, cmd))
        self.count("tu_commands_emitted")

    def _log_invalidation(self, name: ContentName, below: float = float("inf")) -> None:
        self.invalidations.append((self.now, name, below))

    # ------------------------------------------------------------------
    # sealing

    def _fresh_name(self, folder: FolderName) -> ContentName:
        while True:
            name = folder.name(generate_segment(self.rng))
            if name not in self._used and name.appendix != INDEX_SEGMENT:
                self._used.add(name)
                return name

    def _tu_ref(self, name: ContentName) -> TuRef:
        folder = name.folder
        tu = self._tu(folder)
        return TuRef(tu_head(folder), tu.feed.tail)

    def _seal(self, rec: OwnedContentRecord) -> NetworkObject:
        draft = replace(rec.draft, tu=self._tu_ref(rec.name))
        obj = seal(draft, self.identity, self.issuer, self.issuer.epoch, self.rng)
        self._set_draft(rec, draft)
        rec.epoch = self.issuer.epoch
        rec.sealed = True
        self.objects[rec.name] = obj
        return obj

    def _set_draft(self, rec: OwnedContentRecord, draft: ObjectDraft) -> None:
        rec.draft = draft
        if rec.feed is not None:
            self.feeds[rec.feed].feed.entries[rec.name] = draft

    def _add_record(self, draft: ObjectDraft, kind: str, feed=None) -> OwnedContentRecord:
        rec = OwnedContentRecord(draft.name, kind, draft, draft.fp, feed=feed)
        self.records[draft.name] = rec
        self._seal(rec)
        return rec

    def _sync_from_feed(self, key: tuple[str, str], name: ContentName) -> OwnedContentRecord:
        rec = self.records[name]
        rec.draft = self.feeds[key].feed[name]
        return rec

    # ------------------------------------------------------------------
    # publication

    def publish(
        self,
        app: str,
        payload: bytes,
        fp: Policy,
        *,
        folder: str = "",
        dp: Optional[Policy] = None,
        feed: Optional[str] = None,
        feed_fp: Optional[Policy] = None,
        fragment: bool = False,
        chunk_size: Optional[int] = None,
    ) -> ContentName:
        """Publish ``payload``; returns the post name (first fragment for files)."""
        fp = validate(fp)
        f = self.folder(app, folder)
        dp = distributor_policy(f) if dp is None else validate(dp)
        if fragment:
            return self._publish_fragments(f, payload, fp, dp, chunk_size or self.config.chunk_size)
        name = self._fresh_name(f)
        self._add_record(ObjectDraft(name, payload, fp, dp, self._tu_ref(name)), POST)
        self._emit(f, TuKind.ADD, name)
        if feed is not None:
            self._append_to_feed(app, feed, f, name, feed_fp or fp, dp)
        self.count("published")
        return name

    def _publish_fragments(self, f: FolderName, payload: bytes, fp, dp, chunk_size: int) -> ContentName:
        while True:
            seed = self.rng.randbytes(16)
            fs = FragmentSet(f, seed, -(-len(payload) // chunk_size) or 1)
            if not any(n in self._used for n in fs.names()):
                break
        fs, drafts = fragment_file(payload, chunk_size, f, seed, fp=fp, dp=dp, tu=TuRef(tu_head(f), tu_head(f)))
        for d in drafts:
            self._used.add(d.name)
            self._add_record(d, FRAGMENT)
            self.fragment_sets[d.name] = fs
            self._emit(f, TuKind.ADD, d.name)
        self.count("published")
        return drafts[0].name

    def _append_to_feed(self, app: str, label: str, f: FolderName, post: ContentName, fp: Policy, dp: Policy) -> ContentName:
        key = (app, label)
        state = self.feeds.get(key)
        if state is None:
            state = self.feeds[key] = FeedState(f, fp)
        name = self._fresh_name(state.folder)
        draft = ObjectDraft(name, b"", state.fp, distributor_policy(state.folder), self._tu_ref(name), Links(reference=post))
        old_tail, entry = state.feed.append(draft)
        if old_tail is not None:
            rec = self._sync_from_feed(key, old_tail.name)
            self._seal(rec)
            self._log_invalidation(rec.name, rec.draft.version)
            self._emit(state.folder, TuKind.UPDATE, rec.name, rec.name)
        self.records[name] = OwnedContentRecord(name, ENTRY, entry, entry.fp, feed=key)
        self._seal(self.records[name])
        self._emit(state.folder, TuKind.ADD, name)
        idx = self.application(app).index
        idx[label] = idx["latest"] = state.feed.tail
        self._rebuild_index(app)
        return name

    def _rebuild_index(self, app: str, fp: Optional[Policy] = None) -> ContentName:
        a = self.application(app)
        root = self.folder(app)
        if fp is not None:
            a.index_fp = validate(fp)
        fps = []
        for (fa, _), st in sorted(self.feeds.items(), key=lambda kv: kv[0]):
            if fa == app and st.fp not in fps:
                fps.append(st.fp)
        if a.index_fp is not None:
            ifp = a.index_fp
        elif not fps:
            ifp = Leaf(alias_attribute(self.social.self_alias))
        else:
            ifp = fps[0] if len(fps) == 1 else Or(tuple(fps))
        name = index_name(root)
        payload = encode_index(a.index)
        dp = distributor_policy(root)
        rec = self.records.get(name)
        if rec is None:
            self._used.add(name)
            self._add_record(ObjectDraft(name, payload, ifp, dp, self._tu_ref(name)), INDEX)
            self._emit(root, TuKind.ADD, name)
        else:
            self._set_draft(rec, replace(rec.draft, payload=payload, fp=ifp, version=rec.draft.version + 1))
            rec.fp_original = ifp
            self._seal(rec)
            self._log_invalidation(name, rec.draft.version)
            self._emit(root, TuKind.UPDATE, name, name)
        return name

    def compile_index(self, app: str, entries: dict[str, ContentName], fp: Optional[Policy] = None) -> ContentName:
        a = self.application(app)
        for label, n in entries.items():
            if n.producer != self.name:
                raise NotOwned(f"{n} is not owned by {self.name}")
        a.index.update(entries)
        return self._rebuild_index(app, fp)

    # ------------------------------------------------------------------
    # mutation

    def head_of(self, name: ContentName) -> ContentName:
        """Newest name in ``name``'s lineage."""
        seen = set()
        while name in self.lineage and name not in seen:
            seen.add(name)
            name = self.lineage[name]
        return name

    def _owned(self, name: ContentName) -> OwnedContentRecord:
        if name.producer != self.name:
            raise NotOwned(f"{name} is not owned by {self.name}")
        rec = self.records.get(self.head_of(name))
        if rec is None:
            raise NotFound(str(name))
        return rec

    def _reissue(self, rec: OwnedContentRecord, *, payload: Optional[bytes] = None, fp: Optional[Policy] = None, seal_now: bool = True) -> ContentName:
        """Bump the version; standalone content moves to a new name.  Emits the UPDATE."""
        draft = rec.draft
        changes = {"version": draft.version + 1}
        if payload is not None:
            changes["payload"] = payload
        if fp is not None:
            changes["fp"] = fp
        old = rec.name
        folder = old.folder
        if rec.kind in IN_PLACE:
            self._set_draft(rec, replace(draft, **changes))
            self.objects.pop(old, None)
            rec.sealed = False
            if seal_now:
                self._seal(rec)
            self._log_invalidation(old, rec.draft.version)
            self._emit(folder, TuKind.UPDATE, old, old)
            return old
        new = self._fresh_name(folder)
        changes["name"] = new
        del self.records[old]
        self.objects.pop(old, None)
        rec.name = new
        rec.draft = replace(draft, **changes)
        rec.sealed = False
        self.records[new] = rec
        self.lineage[old] = new
        if seal_now:
            self._seal(rec)
        self._log_invalidation(old)
        self._emit(folder, TuKind.UPDATE, old, new)
        return new

    def update_content(self, name: ContentName, payload: bytes) -> ContentName:
        rec = self._owned(name)
        return self._reissue(rec, payload=payload)

    def delete_content(self, name: ContentName) -> list[ThreadUpdateCommand]:
        rec = self._owned(name)
        if rec.kind == ENTRY:
            return [self.cut(rec.feed[0], rec.feed[1], rec.name, rec.name)]
        if rec.kind == INDEX:
            raise NotOwned("the index is maintained by the butler")
        victims = [rec.name]
        if rec.kind == FRAGMENT:
            victims = self.fragment_sets[rec.name].names()
        out = []
        for v in victims:
            self.records.pop(v, None)
            self.objects.pop(v, None)
            self.deleted.add(v)
            self._log_invalidation(v)
            self._emit(v.folder, TuKind.DELETE, v)
            out.append(self.emitted[-1][1])
        return out

    def cut(self, app: str, label: str, x: ContentName, y: ContentName) -> ThreadUpdateCommand:
        key = (app, label)
        state = self.feeds.get(key)
        if state is None:
            raise NotFound(f"no feed {label!r} in {app}")
        pred, succ, cmd = state.feed.cut(x, y)
        for n in cmd.span:
            self.records.pop(n, None)
            self.objects.pop(n, None)
            self.deleted.add(n)
            self._log_invalidation(n)
        for d in (pred, succ):
            if d is not None:
                rec = self._sync_from_feed(key, d.name)
                self._seal(rec)
                self._log_invalidation(rec.name, rec.draft.version)
        self._emit(state.folder, TuKind.CUT, cmd.x, cmd.y, cmd.x2, cmd.y2, cmd.span)
        idx = self.application(app).index
        for lbl in [lbl for lbl, n in idx.items() if n in cmd.span]:
            if state.feed.tail is None:
                del idx[lbl]
            else:
                idx[lbl] = state.feed.tail
        self._rebuild_index(app)
        return self.emitted[-1][1]

    def mutate_content(self, name: ContentName, action: str, payload: Optional[bytes] = None, until: Optional[ContentName] = None):
        """``action`` is ``update``, ``delete`` or ``cut`` (from ``name`` to ``until``)."""
        if action == "update":
            return self.update_content(name, payload or b"")
        if action == "delete":
            return self.delete_content(name)
        if action == "cut":
            rec = self._owned(name)
            if rec.feed is None:
                raise NotFound(f"{name} is not a feed entry")
            return self.cut(rec.feed[0], rec.feed[1], rec.name, until or rec.name)
        raise ValueError(f"unknown action {action!r}")

    # ------------------------------------------------------------------
    # revocation and epochs

    def revoke_access(
        self,
        peer_name: str,
        attribute: Optional[str] = None,
        names: Optional[Iterable[ContentName]] = None,
    ) -> list[ContentName]:
        """Oust ``peer_name`` from content.

        With ``attribute``: the peer loses that category and every record whose
        FP mentions it is rewritten.  With ``names`` only: those records are
        rewritten for every attribute the peer holds.  Returns the new names.
        """
        peer = self.social.peer(peer_name)
        held = self.social.attributes(peer_name)
        if attribute is not None:
            peer.categories.discard(attribute)
            scope = [attribute]
        else:
            scope = sorted(held)
        if names is None:
            targets = [r for r in self.records.values() if attribute in attributes_of(r.fp)]
        else:
            targets = [self._owned(n) for n in names]
        out = []
        for rec in sorted(targets, key=lambda r: str(r.name)):
            fp = rec.fp
            for a in scope:
                if a in attributes_of(fp):
                    fp = rewrite_policy_for_revocation(fp, a, peer.alias, self.issuer.buckets, self.issuer.K)
            if fp == rec.fp:
                continue
            if names is not None:
                rec.pinned = True
            rec.shrinkable = False
            out.append(self._reissue(rec, fp=fp, seal_now=not self.config.lazy_reencryption))
        self.count("revocations")
        return out

    def rotate_epoch(self) -> int:
        epoch = self.issuer.rotate_epoch()
        for rec in self.records.values():
            if rec.fp != rec.fp_original and not rec.pinned:
                rec.shrinkable = True
        return epoch

    def reencrypt(self, name: ContentName) -> ContentName:
        """Re-encrypt at the current epoch, shrinking a rewritten FP when allowed."""
        rec = self._owned(name)
        fp = rec.fp_original if rec.shrinkable else rec.fp
        rec.shrinkable = False
        self.count("reencryptions")
        return self._reissue(rec, fp=fp)

    # ------------------------------------------------------------------
    # serving

    def serve_local(self, name: ContentName) -> Optional[NetworkObject]:
        """Current object for ``name`` (following the lineage), or None."""
        if name.producer != self.name:
            return None
        head = self.head_of(name)
        rec = self.records.get(head)
        if rec is None:
            return None if head in self.deleted else self.objects.get(head)
        self.popularity.record(rec.name, self.now)
        if not rec.sealed:
            self.count("reencryptions")
            self._seal(rec)
        elif rec.epoch not in self.issuer.retained_epochs():
            head = self.reencrypt(rec.name)
            rec = self.records[head]
        return self.objects[rec.name]

    def on_request(self, msg: Message) -> None:
        try:
            name = parse_name(msg.name)
        except MalformedName:
            self.reply(msg, MsgKind.NACK, msg.name, {"reason": "malformed", "retry_after": 0.0})
            return
        obj = self.serve_local(name)
        if obj is None:
            self.reply(msg, MsgKind.NACK, msg.name, {"reason": "not_found", "retry_after": 0.0})
            return
        self.count("butler_serves")
        self.reply(msg, MsgKind.DATA, msg.name, {"object": encode_object(obj), "retry_after": 0.0})

    # ------------------------------------------------------------------
    # certificates and resolution

    def issue_certificate(self, holder: str, folder: FolderName, expiry: Optional[float] = None, *, send: bool = True) -> DistributionCertificate:
        if folder.producer != self.name or folder not in self.tus:
            raise NotOwned(f"{folder} is not a folder of {self.name}")
        expiry = self.now + self.config.certificate_lifetime if expiry is None else expiry
        self.certificates.setdefault(folder, {})
        holders = {holder}
        for f, certs in self.certificates.items():
            if f.segments[: len(folder.segments)] == folder.segments:
                holders |= {h for h, c in certs.items() if c.expiry > self.now}
        keys = tuple(self.issuer.key(dist_attribute(folder), e, self.now) for e in self.issuer.retained_epochs())
        cert = DistributionCertificate(self.name, folder, holder, tuple(sorted(holders)), keys, expiry).sign(self.identity)
        self.certificates[folder][holder] = cert
        if send:
            self.send(holder, Message(MsgKind.CERTIFICATE, str(folder), cert.to_bytes()))
        return cert

    def distributors_for(self, folder: FolderName) -> tuple[list[str], FolderName, float]:
        """Live distributors of the nearest certified folder covering ``folder``."""
        for f in folder.ancestors():
            live = {h: c for h, c in self.certificates.get(f, {}).items() if c.expiry > self.now}
            if live:
                return sorted(live), f, min(c.expiry for c in live.values())
        return [], folder, float("inf")

    def on_resolve(self, msg: Message) -> None:
        try:
            folder = parse_folder(msg.name)
        except MalformedName:
            self.reply(msg, MsgKind.NACK, msg.name, {"reason": "malformed"})
            return
        if folder.producer != self.name:
            self.reply(msg, MsgKind.NACK, msg.name, {"reason": "unauthorized"})
            return
        dists, at, expiry = self.distributors_for(folder)
        body = {"folder": str(at), "distributors": dists, "expiry": min(expiry, self.now + self.config.route_ttl)}
        self.reply(msg, MsgKind.RESOLVE_REPLY, msg.name, body)

    # ------------------------------------------------------------------
    # NOTIFY

    def subscribe_notify(self, app: str) -> Application:
        a = self.application(app)
        a.subscribed = True
        return a

    def unsubscribe_notify(self, app: str) -> None:
        self.application(app).subscribed = False

    def handle_notify(self, sender: str, body: dict) -> Optional[ContentName]:
        """Check and deliver a NOTIFY; returns the link created, if any."""
        a = self.application(body.get("application", ""))
        content = body["content_name"]
        if isinstance(content, str):
            content = parse_name(content)
        try:
            pub = self.net.identity(content.producer)
        except (LookupError, BadCertificate) as exc:
            raise BadSignature(str(exc)) from exc
        if not verify_object(pub.public_key, notify_statement(content, body["checksum"]), body["signature"]):
            raise BadSignature(f"NOTIFY for {content} does not verify")
        self.count("notifies")
        if a.subscribed:
            a.inbox.append(dict(body, content_name=content))
        accept = a.accept or (lambda who, _b: who in self.social.peers)
        if not accept(content.producer, body):
            return None
        target = body.get("target")
        if isinstance(target, str):
            target = parse_name(target)
        if target is not None and target.producer == self.name and self.head_of(target) in self.records:
            trec = self.records[self.head_of(target)]
            f, fp = trec.name.folder, trec.fp_original
        else:
            f, fp = self.folder(a.name), Leaf(alias_attribute(self.social.self_alias))
        link = self._fresh_name(f)
        self._add_record(ObjectDraft(link, b"", fp, distributor_policy(f), self._tu_ref(link), Links(reference=content)), POST)
        self._emit(f, TuKind.ADD, link)
        return link

    def on_notify(self, msg: Message) -> None:
        try:
            link = self.handle_notify(msg.src, msg.body or {})
        except (BadSignature, NoSuchApplication, KeyError, MalformedName) as exc:
            self.reply(msg, MsgKind.NOTIFY_ACK, msg.name, {"accepted": False, "error": type(exc).__name__})
            return
        self.reply(msg, MsgKind.NOTIFY_ACK, msg.name, {"accepted": link is not None, "link": link})

    def comment(self, target: ContentName, payload: bytes, fp: Policy, *, app: Optional[str] = None):
        """Process: publish a comment and NOTIFY the target's producer.

        Returns ``(comment name, link name or None)``.
        """
        app = app or target.application
        self.register_app(app)
        name = self.publish(app, payload, fp)
        obj = self.objects[name]
        checksum = hashlib.sha256(encode_object(obj)).digest()
        body = {
            "content_name": name,
            "checksum": checksum,
            "signature": sign_object(self.identity, notify_statement(name, checksum)),
            "application": target.application,
            "target": target,
        }
        butler = self.net.address_book.get(target.producer)
        if butler is None:
            return name, None
        reply = yield Call(butler, Message(MsgKind.NOTIFY, str(name), body))
        if reply is None or not reply.body.get("accepted"):
            return name, None
        return name, reply.body.get("link")

    # ------------------------------------------------------------------
    # application CRUD (local database; never exposed on the network)

    def app_create(self, app: str, value: Any) -> int:
        a = self.application(app)
        rid = self._next_record
        self._next_record += 1
        a.records[rid] = (app, value)
        return rid

    def _app_record(self, app: str, rid: int):
        self.application(app)
        for a in self.apps.values():
            if rid in a.records:
                if a.name != app:
                    raise Unauthorized(f"record {rid} belongs to another application")
                return a
        raise NotFound(rid)

    def app_read(self, app: str, rid: int) -> Any:
        return self._app_record(app, rid).records[rid][1]

    def app_update(self, app: str, rid: int, value: Any) -> None:
        self._app_record(app, rid).records[rid] = (app, value)

    def app_delete(self, app: str, rid: int) -> None:
        del self._app_record(app, rid).records[rid]

    # ------------------------------------------------------------------
    # consumer side

    def _ring(self, producer: str) -> KeyRing:
        return self.rings.setdefault(producer, KeyRing(self.name, producer))

    def resolve(self, name: ContentName):
        """Process: node to ask for ``name``; raises Unresolvable."""
        route = self.routes.lookup(name, self.now, self.node_id)
        if route is not None:
            self.net.record_resolve(0)
            return route.distributor
        butler = self.net.address_book.get(name.producer)
        candidates = [butler] if butler else []
        for f in name.folder.ancestors():
            candidates += sorted(self.known_distributors.get(f, ()))
        round_trips = 0
        limit = 1 + name.folder.depth
        for node in candidates[:limit]:
            round_trips += 1
            self.count("resolve_round_trips")
            reply = yield Call(node, Message(MsgKind.RESOLVE, str(name.folder)))
            if reply is None or reply.kind is not MsgKind.RESOLVE_REPLY:
                continue
            body = reply.body
            folder = parse_folder(body["folder"])
            expiry = min(body.get("expiry", float("inf")), self.now + self.config.route_ttl)
            dists = list(body.get("distributors") or [])
            if dists:
                self.known_distributors.setdefault(folder, set()).update(dists)
            for d in dists or [node]:
                self.routes.install(folder, d, expiry)
            route = self.routes.lookup(name, self.now, self.node_id)
            if route is not None:
                self.count("resolves")
                self.net.record_resolve(round_trips)
                return route.distributor
        self.net.record_resolve(round_trips)
        raise Unresolvable(str(name))

    def _request(self, node: str, name: ContentName):
        """Process: REQUEST ``name`` at ``node`` honouring its ban window."""
        for _ in range(self.config.max_attempts):
            wait = self.next_allowed.get(node, 0.0) - self.now
            if wait > 0:
                yield Sleep(wait)
            reply = yield Call(node, Message(MsgKind.REQUEST, str(name)))
            if reply is None:
                return None, "unreachable"
            body = reply.body or {}
            self.next_allowed[node] = body.get("retry_after", 0.0)
            if reply.kind is MsgKind.DATA:
                try:
                    obj = decode_object(body["object"])
                except MalformedEncoding:
                    return None, "invalid"
                if obj.producer != name.producer or not self._verify(obj):
                    return None, "invalid"
                return obj, "ok"
            if body.get("reason") != "banned":
                return None, body.get("reason", "not_found")
        return None, "banned"

    def _verify(self, obj: NetworkObject) -> bool:
        try:
            pub = self.net.identity(obj.producer)
        except (LookupError, BadCertificate):
            return False
        return verify_signature(obj, pub.public_key)

    def _request_keys(self, producer: str, epoch: int):
        butler = self.net.address_book.get(producer)
        if butler is None:
            return False
        self.count("key_requests")
        body = {"identity": self.name, "epoch": epoch}
        reply = yield Call(butler, Message(MsgKind.KEY_REQUEST, producer, body))
        if reply is None or reply.kind is not MsgKind.KEY_REPLY:
            return False
        self._ring(producer).add(reply.body["keys"])
        return True

    def _open(self, obj: NetworkObject):
        ring = self._ring(obj.producer)
        try:
            return open_follower(obj, ring, self.now), "ok"
        except IntegrityFailure:
            return None, "invalid"
        except AccessDenied:
            pass
        epoch = follower_ciphertext(obj).epoch
        if (yield from self._request_keys(obj.producer, epoch)):
            try:
                return open_follower(obj, ring, self.now), "ok"
            except IntegrityFailure:
                return None, "invalid"
            except AccessDenied:
                pass
        return None, "denied"

    def fetch(self, name: ContentName):
        """Process: resolve, request, verify and decrypt ``name``; returns a FetchResult."""
        self.count("fetches")
        result = yield from self._fetch(name)
        result.time = self.now
        if result.status == "ok":
            self.count("decrypt_ok")
        elif result.status == "denied":
            self.count("decrypt_denied")
        self.fetch_log.append(result)
        return result

    def _fetch(self, name: ContentName):
        if name.producer == self.name:
            obj = self.serve_local(name)
            if obj is None:
                return FetchResult(name, "not_found")
            rec = self.records[obj.content_name] if obj.content_name in self.records else None
            draft = rec.draft if rec else None
            return FetchResult(
                name, "ok", obj.content_name, obj.version, draft.payload if draft else None, draft.links if draft else None, self.node_id
            )
        butler = self.net.address_book.get(name.producer)
        try:
            node = yield from self.resolve(name)
        except Unresolvable:
            return FetchResult(name, "unreachable")
        obj, status = yield from self._request(node, name)
        if obj is None and status in ("not_found", "unreachable") and butler is not None and node != butler:
            self.count("butler_fallbacks")
            node = butler
            obj, status = yield from self._request(node, name)
        if obj is None:
            return FetchResult(name, status, via=node)
        view, status = yield from self._open(obj)
        if view is None:
            return FetchResult(name, status, obj.content_name, obj.version, via=node)
        return FetchResult(name, "ok", obj.content_name, obj.version, view.data, view.links, node)

    def fetch_file(self, first: ContentName):
        """Process: fetch a fragmented file from its first fragment."""
        head = yield from self.fetch(first)
        if not head.ok or head.links is None or head.links.segment_seed is None:
            return head
        fs = FragmentSet(first.folder, head.links.segment_seed, head.links.number_of_segments)
        chunks = {first: head.data}
        for n in fs.names()[1:]:
            r = yield from self.fetch(n)
            if not r.ok:
                return r
            chunks[n] = r.data
        return FetchResult(first, "ok", first, head.version, reassemble(fs, chunks), head.links, head.via, self.now)

    def read_index(self, producer: str, app: str):
        """Process: fetch and decode a producer's index; returns (FetchResult, entries)."""
        ia, _, user = producer.partition(".")
        r = yield from self.fetch(index_name(FolderName(ia, user, app)))
        if not r.ok:
            return r, {}
        try:
            return r, decode_index(r.data)
        except MalformedEncoding:
            return replace(r, status="invalid"), {}

    def read_feed(self, producer: str, app: str, label: str, limit: Optional[int] = None):
        """Process: walk a feed from its tail; returns post results oldest first."""
        r, entries = yield from self.read_index(producer, app)
        if not r.ok or label not in entries:
            return []
        posts = []
        cursor = entries[label]
        seen = set()
        while cursor is not None and cursor not in seen and (limit is None or len(posts) < limit):
            seen.add(cursor)
            entry = yield from self.fetch(cursor)
            if not entry.ok or entry.links is None:
                break
            if entry.links.reference is not None:
                posts.append((yield from self.fetch(entry.links.reference)))
            cursor = entry.links.previous
        posts.reverse()
        return posts

    def describe(self) -> str:
        return f"{self.name}@{self.node_id} records={len(self.records)} epoch={self.issuer.epoch}"

