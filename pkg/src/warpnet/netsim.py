"""Deterministic discrete-event network.

Nodes exchange :class:`Message` objects through a :class:`SimNetwork` that owns
the virtual clock.  Events are ordered by (time, global sequence number), so a
run is a pure function of its inputs and seed.

Multi-step node logic is written as generator processes: a process yields
:class:`Call` (send a message and wait for the correlated reply, or ``None`` on
timeout) or :class:`Sleep`, and the simulator resumes it when the answer is due.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Iterable, Optional

from .crypto import BadCertificate, verify_identity
from .naming import AnyName, FolderName, is_prefix_of

DEFAULT_LATENCY = (0.005, 0.050)
DEFAULT_CALL_TIMEOUT = 5.0
DEFAULT_ROUTE_TTL = 3600.0


class UnknownNode(KeyError):
    pass


class Unresolvable(LookupError):
    pass


class MsgKind(str, enum.Enum):
    REQUEST = "REQUEST"
    DATA = "DATA"
    NACK = "NACK"
    RESOLVE = "RESOLVE"
    RESOLVE_REPLY = "RESOLVE_REPLY"
    NOTIFY = "NOTIFY"
    NOTIFY_ACK = "NOTIFY_ACK"
    KEY_REQUEST = "KEY_REQUEST"
    KEY_REPLY = "KEY_REPLY"
    CERTIFICATE = "CERTIFICATE"
    CERT_ACK = "CERT_ACK"


@dataclass
class Message:
    kind: MsgKind
    name: str = ""
    body: Any = None
    src: str = ""
    dst: str = ""
    msg_id: int = 0
    reply_to: Optional[int] = None
    sent_at: float = 0.0


@dataclass(frozen=True)
class Call:
    dst: str
    message: Message
    timeout: Optional[float] = None


@dataclass(frozen=True)
class Sleep:
    delay: float


Proc = Generator[Any, Any, Any]


class Process:
    def __init__(self, gen: Proc, owner: Optional[str] = None):
        self.gen = gen
        self.owner = owner
        self.done = False
        self.result: Any = None
        self._callbacks: list[Callable[["Process"], None]] = []

    def on_done(self, fn: Callable[["Process"], None]) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def _finish(self, value: Any) -> None:
        self.done = True
        self.result = value
        for fn in self._callbacks:
            fn(self)
        self._callbacks.clear()


@dataclass(frozen=True)
class ServeEvent:
    """One answered REQUEST at a distributor."""

    time: float
    node: str
    peer: str
    requested: str
    served: Optional[str]
    outcome: str  # data | not_found | banned
    source: str  # cache | upstream | none
    tu_age: Optional[float]
    upstream_fetches: int
    version: Optional[int] = None


@dataclass(frozen=True)
class Route:
    folder: FolderName
    distributor: str
    expiry: float


class RoutingTable:
    """Folder -> distributor entries with expiry; lookups use the longest live prefix."""

    def __init__(self):
        self._entries: dict[FolderName, dict[str, float]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self._entries.values())

    def install(self, folder: FolderName, distributor: str, expiry: float) -> None:
        slot = self._entries.setdefault(folder, {})
        slot[distributor] = max(expiry, slot.get(distributor, expiry))

    def routes(self, name: AnyName, now: float) -> list[Route]:
        """Live routes of the longest matching folder, in installation order."""
        best: Optional[FolderName] = None
        for folder, dists in self._entries.items():
            if not is_prefix_of(folder, name):
                continue
            if not any(exp > now for exp in dists.values()):
                continue
            if best is None or len(folder.segments) > len(best.segments):
                best = folder
        if best is None:
            return []
        return [Route(best, d, exp) for d, exp in self._entries[best].items() if exp > now]

    def lookup(self, name: AnyName, now: float, key: str = "") -> Optional[Route]:
        routes = self.routes(name, now)
        if not routes:
            return None
        return routes[_stable_index(key, len(routes))]

    def prune(self, now: float) -> None:
        for folder in list(self._entries):
            live = {d: e for d, e in self._entries[folder].items() if e > now}
            if live:
                self._entries[folder] = live
            else:
                del self._entries[folder]


def _stable_index(key: str, n: int) -> int:
    return sum(key.encode()) % n if n else 0


class Node:
    """Base class: message dispatch to ``on_<kind>`` methods and local counters."""

    def __init__(self, node_id: str):
        self.node_id = node_id
        self.net: Optional["SimNetwork"] = None
        self.up = True
        self.metrics: Counter = Counter()

    def attach(self, net: "SimNetwork") -> None:
        self.net = net

    @property
    def now(self) -> float:
        return self.net.now

    def receive(self, msg: Message) -> Optional[Proc]:
        handler = getattr(self, f"on_{msg.kind.value.lower()}", None)
        if handler is None:
            self.count("unhandled_messages")
            return None
        return handler(msg)

    def send(self, dst: str, msg: Message) -> Message:
        return self.net.send(self.node_id, dst, msg)

    def reply(self, request: Message, kind: MsgKind, name: str = "", body: Any = None) -> Message:
        msg = Message(kind, name, body, reply_to=request.msg_id)
        return self.net.send(self.node_id, request.src, msg)

    def count(self, key: str, n: int = 1) -> None:
        self.metrics[key] += n


COUNTERS = (
    "messages_sent",
    "messages_delivered",
    "messages_dropped",
    "resolves",
    "resolve_round_trips",
    "cache_hits",
    "cache_misses",
    "serves",
    "stale_serves",
    "rbw_bans",
    "tu_fetches",
    "tu_refreshes",
    "tu_commands_applied",
    "upstream_content_fetches",
    "reencryptions",
    "key_requests",
    "notifies",
    "fetches",
    "decrypt_ok",
    "decrypt_denied",
)


@dataclass
class MetricsReport:
    totals: dict[str, int]
    per_node: dict[str, dict[str, int]] = field(default_factory=dict)

    def __getitem__(self, key: str) -> int:
        return self.totals[key]

    def flat(self) -> dict[str, int]:
        """Stable key order: fixed counters, then per-type message counts, then maxima."""
        return dict(self.totals)


class SimNetwork:
    def __init__(
        self,
        seed: int = 0,
        latency: tuple[float, float] = DEFAULT_LATENCY,
        call_timeout: float = DEFAULT_CALL_TIMEOUT,
    ):
        self.seed = seed
        self.latency_range = latency
        self.call_timeout = call_timeout
        self.now = 0.0
        self.nodes: dict[str, Node] = {}
        # identity name (x.y) -> node id; stands in for DNS
        self.address_book: dict[str, str] = {}
        # identity name -> PublicIdentity; the IA's public directory
        self.directory: dict[str, Any] = {}
        self.authorities: dict[str, bytes] = {}
        self.transcript: list[str] = []
        self.counters: Counter = Counter()
        self.serve_log: list[ServeEvent] = []
        self.resolve_log: list[int] = []
        self._queue: list = []
        self._seq = itertools.count()
        self._msg_ids = itertools.count(1)
        self._latency: dict[tuple[str, str], float] = {}
        self._waiting: dict[int, Process] = {}

    # -- construction -------------------------------------------------------

    def rng(self, *labels: Any) -> random.Random:
        """Independent deterministic stream for ``labels`` under this network's seed."""
        return random.Random(":".join([str(self.seed), *map(str, labels)]))

    def add_node(self, node: Node) -> Node:
        if node.node_id in self.nodes:
            raise ValueError(f"duplicate node id {node.node_id}")
        self.nodes[node.node_id] = node
        node.attach(self)
        return node

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def latency(self, src: str, dst: str) -> float:
        if src == dst:
            return 0.0
        key = (src, dst)
        if key not in self._latency:
            lo, hi = self.latency_range
            self._latency[key] = self.rng("latency", src, dst).uniform(lo, hi)
        return self._latency[key]

    def identity(self, name: str):
        """Look up ``name`` in the directory and check its IA certificate."""
        pub = self.directory.get(name)
        if pub is None:
            raise UnknownNode(name)
        ia_key = self.authorities.get(pub.ia)
        if ia_key is None or not verify_identity(pub, ia_key):
            raise BadCertificate(f"identity {name} is not certified by {pub.ia}")
        return pub

    # -- messaging ----------------------------------------------------------

    def _push(self, at: float, kind: str, data: Any) -> None:
        heapq.heappush(self._queue, (at, next(self._seq), kind, data))

    def send(self, src: str, dst: str, msg: Message) -> Message:
        if src not in self.nodes:
            raise UnknownNode(src)
        if dst not in self.nodes:
            raise UnknownNode(dst)
        msg.src, msg.dst = src, dst
        msg.msg_id = next(self._msg_ids)
        msg.sent_at = self.now
        self.counters["messages_sent"] += 1
        self.counters[f"sent.{msg.kind.value}"] += 1
        self._push(self.now + self.latency(src, dst), "deliver", msg)
        return msg

    def schedule(self, delay: float, fn: Callable[[], Any]) -> None:
        self._push(self.now + max(0.0, delay), "timer", fn)

    def spawn(self, gen: Proc, owner: Optional[str] = None) -> Process:
        proc = Process(gen, owner)
        self._advance(proc, None)
        return proc

    def _advance(self, proc: Process, value: Any) -> None:
        try:
            cmd = proc.gen.send(value)
        except StopIteration as stop:
            proc._finish(stop.value)
            return
        if isinstance(cmd, Call):
            msg = self.send(proc.owner, cmd.dst, cmd.message)
            self._waiting[msg.msg_id] = proc
            timeout = self.call_timeout if cmd.timeout is None else cmd.timeout
            self._push(self.now + timeout, "timeout", msg.msg_id)
        elif isinstance(cmd, Sleep):
            self._push(self.now + max(0.0, cmd.delay), "resume", proc)
        elif isinstance(cmd, Process):
            cmd.on_done(lambda p: self._push(self.now, "resume_with", (proc, p.result)))
        else:
            raise TypeError(f"process yielded {cmd!r}")

    # -- event loop ---------------------------------------------------------

    def pending(self) -> int:
        return len(self._queue)

    def peek_time(self) -> Optional[float]:
        return self._queue[0][0] if self._queue else None

    def step(self) -> bool:
        """Process exactly one event; False when the queue is empty."""
        if not self._queue:
            return False
        at, _, kind, data = heapq.heappop(self._queue)
        self.now = max(self.now, at)
        if kind == "deliver":
            self._deliver(data)
        elif kind == "timeout":
            proc = self._waiting.pop(data, None)
            if proc is not None:
                self.counters["call_timeouts"] += 1
                self._advance(proc, None)
        elif kind == "resume":
            self._advance(data, None)
        elif kind == "resume_with":
            self._advance(*data)
        elif kind == "timer":
            data()
        return True

    def _deliver(self, msg: Message) -> None:
        node = self.nodes[msg.dst]
        if not node.up:
            self.counters["messages_dropped"] += 1
            return
        self.counters["messages_delivered"] += 1
        self.transcript.append(f"{self.now:.6f} | {msg.src} | {msg.dst} | {msg.kind.value} | {msg.name or '-'}")
        if msg.reply_to is not None:
            proc = self._waiting.pop(msg.reply_to, None)
            if proc is not None:
                self._advance(proc, msg)
            return
        result = node.receive(msg)
        if result is not None:
            self.spawn(result, node.node_id)

    def run_until(self, t: float) -> None:
        """Deliver every event scheduled at or before ``t`` and set the clock to ``t``."""
        while self._queue and self._queue[0][0] <= t:
            self.step()
        self.now = max(self.now, t)

    def run(self, max_events: Optional[int] = None) -> int:
        n = 0
        while self._queue and (max_events is None or n < max_events):
            self.step()
            n += 1
        return n

    def wait(self, proc: Process, limit: float = 3600.0) -> Any:
        """Run until ``proc`` finishes (or ``limit`` virtual seconds pass)."""
        deadline = self.now + limit
        while not proc.done and self._queue and self._queue[0][0] <= deadline:
            self.step()
        if not proc.done:
            raise TimeoutError("process did not finish")
        return proc.result

    # -- observation --------------------------------------------------------

    def record_serve(self, event: ServeEvent) -> None:
        self.serve_log.append(event)

    def record_resolve(self, round_trips: int) -> None:
        self.resolve_log.append(round_trips)

    def transcript_text(self) -> str:
        return "".join(line + "\n" for line in self.transcript)

    def collect_metrics(self) -> MetricsReport:
        totals: dict[str, int] = {k: 0 for k in COUNTERS}
        per_node: dict[str, dict[str, int]] = {}
        for node_id in sorted(self.nodes):
            counts = self.nodes[node_id].metrics
            per_node[node_id] = {k: counts.get(k, 0) for k in COUNTERS if k in counts}
            for k, v in counts.items():
                if k in totals:
                    totals[k] += v
        for k in ("messages_sent", "messages_delivered", "messages_dropped"):
            totals[k] = self.counters.get(k, 0)
        for kind in MsgKind:
            totals[f"sent.{kind.value}"] = self.counters.get(f"sent.{kind.value}", 0)
        totals["max_resolve_round_trips"] = max(self.resolve_log, default=0)
        totals["max_upstream_per_request"] = max((e.upstream_fetches for e in self.serve_log), default=0)
        return MetricsReport(totals, per_node)


def spawn_all(net: SimNetwork, procs: Iterable[Proc], owner: str) -> list[Process]:
    return [net.spawn(p, owner) for p in procs]
