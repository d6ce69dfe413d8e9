"""Distributor nodes: certified caches governed by thread updates.

A distributor stores objects of the folders it is certified for, follows the
thread-update (TU) feeds of what it caches, and answers REQUESTs with the
serving procedure:

1. look the content up in the content store (miss -> 5);
2. if its governing TU was read within ``tau_freshness`` -> 6;
3. fetch the TU;  4. apply it; if the content survived -> 6, else -> 5;
5. fetch the content from the producer's butler (one upstream fetch);
6. serve;  7. stop unless the content is popular;
8. follow its TU unless the TU or a parent TU is already followed;
10. cache it.

Continuous polling is throttled by a per-peer Request Ban Window.
"""

from __future__ import annotations

import logging
from collections import OrderedDict, defaultdict, deque
from dataclasses import dataclass, field
from typing import Optional

from .crypto import AccessDenied, Identity, IntegrityFailure, KeyRing
from .naming import (
    ContentName,
    FolderName,
    MalformedName,
    is_prefix_of,
    parse_folder,
    parse_name,
    tu_owner,
)
from .netsim import Call, Message, MsgKind, Node, Process, ServeEvent
from .objects import (
    DistributionCertificate,
    NetworkObject,
    ThreadUpdateCommand,
    TuKind,
    TuRef,
    decode_object,
    encode_object,
    open_distributor,
    open_follower,
    verify_signature,
)
from .tlv import MalformedEncoding

log = logging.getLogger(__name__)

DEFAULT_TAU = 30 * 60.0
DEFAULT_DELTA = 10.0
DEFAULT_P_MIN = 3
DEFAULT_POPULARITY_WINDOW = 3600.0


class Expired(Exception):
    pass


class BadSignature(Exception):
    pass


class OutOfOrderCommand(Exception):
    pass


class TuUnreachable(Exception):
    pass


# --------------------------------------------------------------------------
# request ban window


def rbw_deadline(now: float, fail: int, succ: int, delta: float) -> float:
    """Earliest next request time: now + fail / (1 + succ) * delta."""
    return now + fail / (1 + succ) * delta


@dataclass
class RbwState:
    next_allowed: float = 0.0
    log: deque = field(default_factory=deque)  # (time, success)


class RequestBanWindow:
    """Per-peer earliest-allowed request time, scaled by the recent hit ratio."""

    def __init__(self, delta: float = DEFAULT_DELTA):
        self.delta = delta
        self.peers: dict[str, RbwState] = defaultdict(RbwState)

    def allowed(self, peer: str, now: float) -> bool:
        return now >= self.peers[peer].next_allowed

    def counts(self, peer: str, now: float) -> tuple[int, int]:
        """(failures, successes) recorded in the window (now - delta, now]."""
        state = self.peers[peer]
        while state.log and state.log[0][0] <= now - self.delta:
            state.log.popleft()
        fail = sum(1 for _, ok in state.log if not ok)
        return fail, len(state.log) - fail

    def on_request(self, peer: str, success: bool, now: float) -> float:
        state = self.peers[peer]
        state.log.append((now, success))
        fail, succ = self.counts(peer, now)
        state.next_allowed = max(state.next_allowed, rbw_deadline(now, fail, succ, self.delta))
        return state.next_allowed


class PopularityCounter:
    """Request counts per key over a trailing window."""

    def __init__(self, window: float = DEFAULT_POPULARITY_WINDOW, threshold: int = DEFAULT_P_MIN):
        self.window = window
        self.threshold = threshold
        self._hits: dict[object, deque] = defaultdict(deque)

    def record(self, key, now: float) -> None:
        self._hits[key].append(now)

    def count(self, key, now: float) -> int:
        hits = self._hits.get(key)
        if not hits:
            return 0
        while hits and hits[0] <= now - self.window:
            hits.popleft()
        return len(hits)

    def is_popular(self, key, now: float) -> bool:
        return self.count(key, now) >= self.threshold


# --------------------------------------------------------------------------
# cache state


@dataclass
class CacheEntry:
    obj: NetworkObject
    cached_at: float
    tu: Optional[TuRef] = None


class ContentStore:
    """Name -> cached object, LRU-evicted when a capacity is set."""

    def __init__(self, capacity: Optional[int] = None):
        self.capacity = capacity
        self._items: OrderedDict[ContentName, CacheEntry] = OrderedDict()

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, name) -> bool:
        return name in self._items

    def names(self) -> list[ContentName]:
        return list(self._items)

    def get(self, name: ContentName) -> Optional[CacheEntry]:
        entry = self._items.get(name)
        if entry is not None:
            self._items.move_to_end(name)
        return entry

    def put(self, name: ContentName, entry: CacheEntry) -> None:
        self._items[name] = entry
        self._items.move_to_end(name)
        if self.capacity is not None:
            while len(self._items) > self.capacity:
                self._items.popitem(last=False)

    def purge(self, name: ContentName) -> bool:
        return self._items.pop(name, None) is not None


@dataclass
class TuFollowState:
    folder: FolderName
    cursor: ContentName
    seq: Optional[int] = None
    last_checked: float = float("-inf")
    following: bool = True
    inflight: Optional[Process] = None  # a refresh already under way


@dataclass
class DistributorConfig:
    tau_freshness: float = DEFAULT_TAU
    delta_rbw: float = DEFAULT_DELTA
    p_min: int = DEFAULT_P_MIN
    popularity_window: float = DEFAULT_POPULARITY_WINDOW
    prefetch: bool = False
    capacity: Optional[int] = None


def _nack(reason: str, retry_after: float = 0.0) -> dict:
    return {"reason": reason, "retry_after": retry_after}


class Distributor(Node):
    def __init__(self, node_id: str, identity: Optional[Identity] = None, config: Optional[DistributorConfig] = None):
        super().__init__(node_id)
        self.identity = identity
        self.config = config or DistributorConfig()
        self.certificates: dict[FolderName, DistributionCertificate] = {}
        self.rings: dict[str, KeyRing] = {}
        self.store = ContentStore(self.config.capacity)
        self.follows: dict[FolderName, TuFollowState] = {}
        self.redirects: dict[ContentName, ContentName] = {}
        self.blocklist: set[ContentName] = set()
        # name -> local time a TU command last touched it
        self.touched: dict[ContentName, float] = {}
        self.rbw = RequestBanWindow(self.config.delta_rbw)
        self.popularity = PopularityCounter(self.config.popularity_window, self.config.p_min)

    # -- certificates -------------------------------------------------------

    def accept_certificate(self, cert: DistributionCertificate, now: Optional[float] = None) -> None:
        now = self.now if now is None else now
        producer = self.net.identity(cert.identity)
        if not cert.verify(producer.public_key) or cert.folder.producer != cert.identity:
            raise BadSignature(f"certificate for {cert.folder} does not verify")
        if now >= cert.expiry:
            raise Expired(f"certificate for {cert.folder} expired at {cert.expiry}")
        self.certificates[cert.folder] = cert
        ring = self.rings.setdefault(cert.identity, KeyRing(self.node_id, cert.identity))
        ring.add(cert.keys)

    def covering_certificate(self, name, now: float) -> Optional[DistributionCertificate]:
        best = None
        for folder, cert in self.certificates.items():
            if cert.expiry > now and is_prefix_of(folder, name):
                if best is None or len(folder.segments) > len(best.folder.segments):
                    best = cert
        return best

    def on_certificate(self, msg: Message):
        try:
            self.accept_certificate(DistributionCertificate.from_bytes(msg.body))
            self.reply(msg, MsgKind.CERT_ACK, msg.name, {"ok": True})
        except (BadSignature, Expired, MalformedEncoding, LookupError) as exc:
            self.reply(msg, MsgKind.CERT_ACK, msg.name, {"ok": False, "error": type(exc).__name__})

    # -- resolution ---------------------------------------------------------

    def on_resolve(self, msg: Message):
        try:
            folder = parse_folder(msg.name)
        except MalformedName:
            self.reply(msg, MsgKind.NACK, msg.name, _nack("malformed"))
            return
        cert = self.covering_certificate(folder, self.now)
        if cert is None:
            self.reply(msg, MsgKind.NACK, msg.name, _nack("unauthorized"))
            return
        body = {"folder": str(cert.folder), "distributors": list(cert.distributors), "expiry": cert.expiry}
        self.reply(msg, MsgKind.RESOLVE_REPLY, msg.name, body)

    # -- thread updates -----------------------------------------------------

    def governing_tu(self, name) -> Optional[TuFollowState]:
        """The nearest followed TU whose folder covers ``name``."""
        folder = name.folder if isinstance(name, ContentName) else name
        for f in folder.ancestors():
            state = self.follows.get(f)
            if state is not None:
                return state
        return None

    def follow(self, tu: TuRef, since: Optional[float] = None) -> TuFollowState:
        """Follow ``tu`` from its pointer unless it or a parent TU is already followed."""
        folder = tu_owner(tu.name)
        existing = self.governing_tu(folder)
        if existing is not None:
            return existing
        since = self.now if since is None else since
        state = TuFollowState(folder, tu.pointer, last_checked=since)
        self.follows[folder] = state
        return state

    def _retarget(self, old: ContentName, new: Optional[ContentName]) -> None:
        for src, dst in list(self.redirects.items()):
            if dst == old:
                if new is None:
                    del self.redirects[src]
                else:
                    self.redirects[src] = new

    def _invalidate(self, name: ContentName) -> None:
        self.store.purge(name)
        self.blocklist.add(name)
        self.redirects.pop(name, None)
        self._retarget(name, None)

    def flush(self, folder: FolderName) -> int:
        """Drop every cached object under ``folder``."""
        doomed = [n for n in self.store.names() if is_prefix_of(folder, n)]
        for n in doomed:
            self.store.purge(n)
        return len(doomed)

    def process_tu_command(self, cmd: ThreadUpdateCommand, state: Optional[TuFollowState] = None) -> None:
        if state is not None:
            if state.seq is not None and cmd.seq != state.seq + 1:
                raise OutOfOrderCommand(f"expected seq {state.seq + 1}, got {cmd.seq}")
            state.seq = cmd.seq
        self.count("tu_commands_applied")
        for n in (cmd.x, cmd.y, cmd.x2, cmd.y2, *cmd.span):
            if n is not None:
                self.touched[n] = self.now
        if cmd.kind is TuKind.ADD:
            if self.config.prefetch:
                self.net.spawn(self._prefetch(cmd.x), self.node_id)
        elif cmd.kind is TuKind.DELETE:
            self._invalidate(cmd.x)
        elif cmd.kind is TuKind.UPDATE:
            self.store.purge(cmd.x)
            if cmd.y != cmd.x:
                self.redirects[cmd.x] = cmd.y
                self._retarget(cmd.x, cmd.y)
            if self.config.prefetch:
                self.net.spawn(self._prefetch(cmd.y), self.node_id)
        elif cmd.kind is TuKind.CUT:
            for name in cmd.span or (cmd.x, cmd.y):
                self._invalidate(name)
            for name in (cmd.x2, cmd.y2):
                if name is not None:
                    self.store.purge(name)

    def refresh_tu(self, state: TuFollowState):
        """Process: read the TU forward from the cursor; returns commands applied or None."""
        started = self.now
        butler = self.net.address_book.get(state.folder.producer)
        self.count("tu_refreshes")
        cursor, applied = state.cursor, 0
        try:
            while True:
                obj = yield from self._fetch_tu_entry(butler, cursor)
                view = yield from self._open_follower(obj)
                if cursor != state.cursor:
                    cmd = ThreadUpdateCommand.from_bytes(view.data)
                    try:
                        self.process_tu_command(cmd, state)
                    except OutOfOrderCommand as exc:
                        # a gap means lost commands: drop the whole folder and resync
                        log.warning("%s: %s on TU %s", self.node_id, exc, state.folder)
                        self.count("tu_resyncs")
                        self.flush(state.folder)
                        state.seq = None
                        self.process_tu_command(cmd, state)
                    state.cursor = cursor
                    applied += 1
                elif state.seq is None:
                    state.seq = ThreadUpdateCommand.from_bytes(view.data).seq if view.data else 0
                if view.links.next is None:
                    break
                cursor = view.links.next
        except (TuUnreachable, MalformedEncoding) as exc:
            log.info("%s: TU %s unreachable: %s", self.node_id, state.folder, exc)
            self.count("tu_unreachable")
            return None
        state.last_checked = started
        return applied

    def _shared_refresh(self, state: TuFollowState):
        """Join the refresh already running for ``state`` or start one."""
        if state.inflight is None or state.inflight.done:
            state.inflight = self.net.spawn(self.refresh_tu(state), self.node_id)
        return (yield state.inflight)

    def _fetch_tu_entry(self, butler: Optional[str], name: ContentName):
        if butler is None:
            raise TuUnreachable(str(name))
        self.count("tu_fetches")
        reply = yield Call(butler, Message(MsgKind.REQUEST, str(name)))
        if reply is None or reply.kind is not MsgKind.DATA:
            raise TuUnreachable(str(name))
        try:
            obj = decode_object(reply.body["object"])
        except MalformedEncoding as exc:
            raise TuUnreachable(str(exc)) from exc
        if obj.content_name != name or not self._verify(obj):
            raise TuUnreachable(f"bad TU entry {name}")
        return obj

    def _ring(self, producer: str) -> KeyRing:
        return self.rings.setdefault(producer, KeyRing(self.node_id, producer))

    def _request_keys(self, producer: str):
        butler = self.net.address_book.get(producer)
        if butler is None:
            return False
        self.count("key_requests")
        reply = yield Call(butler, Message(MsgKind.KEY_REQUEST, producer, {"role": "distributor"}))
        if reply is None or reply.kind is not MsgKind.KEY_REPLY or not reply.body.get("keys"):
            return False
        self._ring(producer).add(reply.body["keys"])
        return True

    def _open_follower(self, obj: NetworkObject):
        ring = self._ring(obj.producer)
        try:
            return open_follower(obj, ring)
        except AccessDenied:
            pass
        if (yield from self._request_keys(obj.producer)):
            try:
                return open_follower(obj, ring)
            except (AccessDenied, IntegrityFailure):
                pass
        raise TuUnreachable(f"cannot read TU entry {obj.content_name}")

    def _open_tu_ref(self, obj: NetworkObject):
        ring = self._ring(obj.producer)
        try:
            return open_distributor(obj, ring)
        except AccessDenied:
            pass
        if (yield from self._request_keys(obj.producer)):
            try:
                return open_distributor(obj, ring)
            except AccessDenied:
                pass
        return None

    def _verify(self, obj: NetworkObject) -> bool:
        try:
            producer = self.net.identity(obj.producer)
        except LookupError:
            return False
        return verify_signature(obj, producer.public_key)

    # -- serving ------------------------------------------------------------

    def canonical(self, name: ContentName) -> ContentName:
        seen = set()
        while name in self.redirects and name not in seen:
            seen.add(name)
            name = self.redirects[name]
        return name

    def should_cache(self, name: ContentName, now: Optional[float] = None) -> bool:
        return self.popularity.is_popular(name, self.now if now is None else now)

    def on_request(self, msg: Message):
        return self.serve_request(msg)

    def serve_request(self, msg: Message):
        """Process answering one REQUEST with DATA or NACK."""
        peer, arrived = msg.src, self.now
        try:
            requested = parse_name(msg.name)
        except MalformedName:
            self.reply(msg, MsgKind.NACK, msg.name, _nack("malformed"))
            return
        if not self.rbw.allowed(peer, arrived):
            self.count("rbw_bans")
            retry = self.rbw.on_request(peer, False, arrived)
            self._answer(msg, None, "banned", "none", None, 0, retry)
            return

        target = self.canonical(requested)
        self.popularity.record(requested, arrived)
        if target in self.blocklist or self.covering_certificate(target, arrived) is None:
            self._finish(msg, None, "not_found", "none", None, 0)
            return

        entry = self.store.get(target)
        if entry is not None:
            state = self.governing_tu(target)
            if state is None:
                self.store.purge(target)
            elif self.now - state.last_checked > self.config.tau_freshness:
                applied = yield from self._shared_refresh(state)
                if applied is None:
                    # fail closed: nothing under an unreadable TU is served from cache
                    state.last_checked = float("-inf")
            target = self.canonical(requested)
            entry = self.store.get(target)
            if entry is not None and state is not None:
                age = self.now - state.last_checked
                if age <= self.config.tau_freshness and target not in self.blocklist:
                    self.count("cache_hits")
                    self._finish(msg, entry.obj, "data", "cache", age, 0)
                    return
            if target in self.blocklist:
                self._finish(msg, None, "not_found", "none", None, 0)
                return

        self.count("cache_misses")
        fetched_at = self.now
        obj = yield from self._fetch_upstream(target)
        if obj is None:
            self._finish(msg, None, "not_found", "none", None, 1)
            return
        if obj.content_name != target:
            self.redirects[target] = obj.content_name
            target = obj.content_name
        self._finish(msg, obj, "data", "upstream", None, 1)
        if self.should_cache(requested):
            yield from self._cache(obj, fetched_at)

    def _fetch_upstream(self, name: ContentName):
        butler = self.net.address_book.get(name.producer)
        if butler is None:
            return None
        self.count("upstream_content_fetches")
        reply = yield Call(butler, Message(MsgKind.REQUEST, str(name)))
        if reply is None or reply.kind is not MsgKind.DATA:
            return None
        try:
            obj = decode_object(reply.body["object"])
        except MalformedEncoding:
            return None
        if obj.producer != name.producer or not self._verify(obj):
            return None
        return obj

    def _cache(self, obj: NetworkObject, fetched_at: float):
        name = obj.content_name
        if self.covering_certificate(name, self.now) is None or name in self.blocklist:
            return False
        tu = yield from self._open_tu_ref(obj)
        if tu is None:
            return False
        if name in self.blocklist or self.touched.get(name, float("-inf")) >= fetched_at:
            # a TU command about this name arrived after our copy left the butler
            return False
        self.follow(tu, fetched_at)
        self.store.put(name, CacheEntry(obj, fetched_at, tu))
        self.count("cached")
        return True

    def _prefetch(self, name: ContentName):
        target = self.canonical(name)
        if target in self.store or target in self.blocklist:
            return
        fetched_at = self.now
        obj = yield from self._fetch_upstream(target)
        if obj is not None:
            yield from self._cache(obj, fetched_at)

    def _finish(self, msg, obj, outcome, source, tu_age, upstream) -> None:
        retry = self.rbw.on_request(msg.src, outcome == "data", self.now)
        self._answer(msg, obj, outcome, source, tu_age, upstream, retry)

    def _answer(self, msg, obj, outcome, source, tu_age, upstream, retry) -> None:
        if outcome == "data":
            self.count("serves")
            if source == "cache" and tu_age > self.config.tau_freshness:
                self.count("stale_serves")
            self.reply(msg, MsgKind.DATA, msg.name, {"object": encode_object(obj), "retry_after": retry})
        else:
            self.reply(msg, MsgKind.NACK, msg.name, _nack(outcome, retry))
        self.net.record_serve(
            ServeEvent(
                self.now,
                self.node_id,
                msg.src,
                msg.name,
                None if obj is None else str(obj.content_name),
                outcome,
                source,
                tu_age,
                upstream,
                None if obj is None else obj.version,
            )
        )
