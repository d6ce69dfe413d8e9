"""Line-oriented scenario scripts driven over a :class:`SimNetwork`.

Each non-blank line is ``t=<seconds> <directive> <args...>``; ``#`` starts a
comment.  Arguments are shell-quoted words, ``key=value`` words are options.
Content is referred to by the label given when it was published.  Fetching
directives block until the fetch completes, so a later directive whose time
has already passed runs immediately.
"""

from __future__ import annotations

import json
import operator
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .butler import Butler, ButlerConfig
from .crypto import IdentityAuthority, KeyIssuer
from .distributor import Distributor, DistributorConfig
from .naming import ContentName
from .netsim import COUNTERS, MetricsReport, MsgKind, SimNetwork
from .policy import alias_attribute, any_of, evaluate_policy, parse_policy


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ExpectationFailed(AssertionError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Directive:
    line: int
    time: float
    verb: str
    args: tuple[str, ...]
    opts: dict

    def opt(self, key: str, default=None):
        return self.opts.get(key, default)


@dataclass
class ScenarioResult:
    exit_status: int
    metrics: MetricsReport
    transcript: str
    failures: list[ExpectationFailed] = field(default_factory=list)
    passed: int = 0
    network: Optional[SimNetwork] = None


# directive -> (min positional args, max positional args)
ARITY = {
    "create_authority": (1, 1),
    "create_butler": (1, 1),
    "create_distributor": (1, 1),
    "register_app": (2, 2),
    "subscribe": (2, 2),
    "categorize": (3, 3),
    "grant_certificate": (3, 3),
    "publish": (4, 4),
    "compile_index": (2, 2),
    "fetch": (2, 2),
    "read_feed": (4, 4),
    "comment": (4, 4),
    "revoke": (2, 3),
    "mutate": (3, 4),
    "rotate_epoch": (1, 1),
    "reencrypt": (2, 2),
    "set_down": (1, 1),
    "set_up": (1, 1),
    "run": (0, 0),
    "expect": (1, 6),
}

_OPS: dict[str, Callable] = {
    "==": operator.eq,
    "!=": operator.ne,
    "<=": operator.le,
    ">=": operator.ge,
    "<": operator.lt,
    ">": operator.gt,
}


def parse_scenario(text: str) -> list[Directive]:
    out: list[Directive] = []
    last = 0.0
    for lineno, raw in enumerate(text.splitlines(), 1):
        try:
            words = shlex.split(raw, comments=True)
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        if not words:
            continue
        head, *rest = words
        if not head.startswith("t="):
            raise ParseError(lineno, f"expected t=<seconds>, got {head!r}")
        try:
            t = float(head[2:])
        except ValueError:
            raise ParseError(lineno, f"bad time {head!r}") from None
        if t < last:
            raise ParseError(lineno, f"time {t} goes backwards (previous {last})")
        last = t
        if not rest:
            raise ParseError(lineno, "missing directive")
        verb, *words = rest
        if verb not in ARITY:
            raise ParseError(lineno, f"unknown directive {verb!r}")
        args, opts = [], {}
        for w in words:
            key, eq, value = w.partition("=")
            if eq and key.isidentifier():
                opts[key] = value
            else:
                args.append(w)
        lo, hi = ARITY[verb]
        if not lo <= len(args) <= hi:
            raise ParseError(lineno, f"{verb} takes {lo}..{hi} arguments, got {len(args)}")
        out.append(Directive(lineno, t, verb, tuple(args), opts))
    return out


def _flag(value: Optional[str]) -> bool:
    return str(value).lower() in ("1", "true", "yes", "on")


class ScenarioRunner:
    def __init__(self, seed: int = 0):
        self.net = SimNetwork(seed)
        self.authorities: dict[str, IdentityAuthority] = {}
        self.butlers: dict[str, Butler] = {}
        self.distributors: dict[str, Distributor] = {}
        self.labels: dict[str, ContentName] = {}
        self.payloads: dict[str, bytes] = {}
        self.producers: dict[str, str] = {}
        self.failures: list[ExpectationFailed] = []
        self.passed = 0

    # -- helpers ------------------------------------------------------------

    def authority(self, name: str = "ia") -> IdentityAuthority:
        if name not in self.authorities:
            ia = IdentityAuthority(name, self.net.rng("ia", name))
            self.authorities[name] = ia
            self.net.authorities[name] = ia.public_key
        return self.authorities[name]

    def butler(self, d: Directive, who: str) -> Butler:
        try:
            return self.butlers[who]
        except KeyError:
            raise ParseError(d.line, f"no butler {who!r}") from None

    def label(self, d: Directive, label: str) -> ContentName:
        try:
            return self.labels[label]
        except KeyError:
            raise ParseError(d.line, f"no content labelled {label!r}") from None

    def wait(self, gen, owner: str):
        return self.net.wait(self.net.spawn(gen, owner))

    def policy(self, d: Directive, owner: Butler, text: Optional[str]):
        if text is None:
            raise ParseError(d.line, "fp= is required")
        try:
            fp = parse_policy(text)
        except ValueError as exc:
            raise ParseError(d.line, str(exc)) from None
        exclude = d.opt("exclude")
        if exclude:
            # per-post exclusion: one alias per qualifying peer, minus the excluded ones
            gone = {self.butler(d, w).name for w in exclude.split(",")}
            keep = [
                alias_attribute(p.alias)
                for name, p in sorted(owner.social.peers.items())
                if name not in gone and evaluate_policy(fp, p.categories)
            ]
            fp = any_of(keep or [alias_attribute(owner.social.self_alias)])
        return fp

    def fail(self, d: Directive, message: str) -> None:
        self.failures.append(ExpectationFailed(d.line, message))

    # -- directives ---------------------------------------------------------

    def execute(self, d: Directive) -> None:
        getattr(self, f"do_{d.verb}")(d)

    def do_create_authority(self, d: Directive) -> None:
        self.authority(d.args[0])

    def do_create_butler(self, d: Directive) -> None:
        who = d.args[0]
        if who in self.butlers or who in self.distributors:
            raise ParseError(d.line, f"duplicate node {who!r}")
        ia = self.authority(d.opt("ia", "ia"))
        ident = ia.register(who, self.net.rng("identity", who))
        seed = self.net.rng("issuer", who).randbytes(32)
        issuer = KeyIssuer(ident.name, seed, buckets=int(d.opt("buckets", 16)))
        config = ButlerConfig(lazy_reencryption=not _flag(d.opt("eager", "false")))
        b = Butler(who, ident, issuer, self.net.rng("butler", who), config)
        self.net.add_node(b)
        self.butlers[who] = b

    def do_create_distributor(self, d: Directive) -> None:
        who = d.args[0]
        if who in self.butlers or who in self.distributors:
            raise ParseError(d.line, f"duplicate node {who!r}")
        config = DistributorConfig(
            tau_freshness=float(d.opt("tau", 1800)),
            delta_rbw=float(d.opt("delta", 10)),
            p_min=int(d.opt("p_min", 3)),
            prefetch=_flag(d.opt("prefetch", "false")),
        )
        self.distributors[who] = self.net.add_node(Distributor(who, config=config))

    def do_register_app(self, d: Directive) -> None:
        self.butler(d, d.args[0]).register_app(d.args[1])

    def do_subscribe(self, d: Directive) -> None:
        self.butler(d, d.args[0]).subscribe_notify(d.args[1])

    def do_categorize(self, d: Directive) -> None:
        owner, peer = self.butler(d, d.args[0]), self.butler(d, d.args[1])
        owner.categorize_user(peer.identity.public, [c for c in d.args[2].split(",") if c])

    def do_grant_certificate(self, d: Directive) -> None:
        owner, holder, app = self.butler(d, d.args[0]), d.args[1], d.args[2]
        if holder not in self.distributors:
            raise ParseError(d.line, f"no distributor {holder!r}")
        folder = owner.folder(app, d.opt("folder", ""))
        expiry = d.opt("expiry")
        owner.issue_certificate(holder, folder, None if expiry is None else float(expiry))

    def do_publish(self, d: Directive) -> None:
        owner, app, label, payload = self.butler(d, d.args[0]), d.args[1], d.args[2], d.args[3].encode()
        fp = self.policy(d, owner, d.opt("fp"))
        chunk = d.opt("chunk")
        name = owner.publish(
            app,
            payload,
            fp,
            folder=d.opt("folder", ""),
            feed=d.opt("feed"),
            fragment=_flag(d.opt("fragment", "false")),
            chunk_size=None if chunk is None else int(chunk),
        )
        self.labels[label] = name
        self.payloads[label] = payload
        self.producers[label] = d.args[0]

    def do_compile_index(self, d: Directive) -> None:
        owner, app = self.butler(d, d.args[0]), d.args[1]
        entries = {k: self.label(d, v) for k, v in d.opts.items() if k != "fp"}
        fp = d.opt("fp")
        owner.compile_index(app, entries, None if fp is None else parse_policy(fp))

    def _fetch(self, d: Directive, who: str, label: str):
        b = self.butler(d, who)
        name = self.label(d, label)
        if self.producers.get(label) and getattr(self.butlers.get(self.producers[label]), "fragment_sets", {}).get(name):
            return self.wait(b.fetch_file(name), b.node_id)
        return self.wait(b.fetch(name), b.node_id)

    def do_fetch(self, d: Directive) -> None:
        self._fetch(d, d.args[0], d.args[1])

    def do_read_feed(self, d: Directive) -> None:
        reader, producer = self.butler(d, d.args[0]), self.butler(d, d.args[1])
        self.wait(reader.read_feed(producer.name, d.args[2], d.args[3]), reader.node_id)

    def do_comment(self, d: Directive) -> None:
        author, target, label, payload = self.butler(d, d.args[0]), self.label(d, d.args[1]), d.args[2], d.args[3].encode()
        fp = self.policy(d, author, d.opt("fp"))
        name, link = self.wait(author.comment(target, payload, fp), author.node_id)
        self.labels[label] = name
        self.payloads[label] = payload
        self.producers[label] = d.args[0]
        if link is not None:
            self.labels[f"{label}.link"] = link
            self.producers[f"{label}.link"] = self.producers[d.args[1]]

    def do_revoke(self, d: Directive) -> None:
        owner, peer = self.butler(d, d.args[0]), self.butler(d, d.args[1])
        attribute = d.args[2] if len(d.args) > 2 else None
        names = d.opt("names")
        targets = None if names is None else [self.label(d, n) for n in names.split(",")]
        if attribute is None and targets is None:
            raise ParseError(d.line, "revoke needs an attribute or names=")
        owner.revoke_access(peer.name, attribute, targets)

    def do_mutate(self, d: Directive) -> None:
        owner, label, action = self.butler(d, d.args[0]), d.args[1], d.args[2]
        name = self.label(d, label)
        if action == "update":
            if len(d.args) < 4:
                raise ParseError(d.line, "update needs a payload")
            owner.mutate_content(name, "update", d.args[3].encode())
            self.payloads[label] = d.args[3].encode()
        elif action == "delete":
            owner.mutate_content(name, "delete")
        elif action == "cut":
            until = d.opt("until")
            owner.mutate_content(name, "cut", until=None if until is None else self.label(d, until))
        else:
            raise ParseError(d.line, f"unknown mutation {action!r}")

    def do_rotate_epoch(self, d: Directive) -> None:
        self.butler(d, d.args[0]).rotate_epoch()

    def do_reencrypt(self, d: Directive) -> None:
        self.butler(d, d.args[0]).reencrypt(self.label(d, d.args[1]))

    def do_set_down(self, d: Directive) -> None:
        self.net.node(d.args[0]).up = False

    def do_set_up(self, d: Directive) -> None:
        self.net.node(d.args[0]).up = True

    def do_run(self, d: Directive) -> None:
        pass  # only advances the clock

    def do_expect(self, d: Directive) -> None:
        kind, *args = d.args
        if kind in ("decrypt_ok", "decrypt_fails", "visible", "not_found"):
            if len(args) != 2:
                raise ParseError(d.line, f"expect {kind} <reader> <label>")
            r = self._fetch(d, args[0], args[1])
            if kind == "decrypt_ok":
                want = d.opt("payload")
                want = self.payloads.get(args[1]) if want is None else want.encode()
                ok = r.ok and (want is None or r.data == want)
            elif kind == "decrypt_fails":
                ok = r.status == "denied"
            elif kind == "visible":
                ok = r.visible
            else:
                ok = r.status == "not_found"
            detail = f"status={r.status} name={r.name}"
        elif kind == "feed_length":
            if len(args) != 5:
                raise ParseError(d.line, "expect feed_length <reader> <producer> <app> <feed> <n>")
            reader, producer = self.butler(d, args[0]), self.butler(d, args[1])
            posts = self.wait(reader.read_feed(producer.name, args[2], args[3]), reader.node_id)
            readable = [p for p in posts if p.ok] if _flag(d.opt("readable", "false")) else posts
            ok = len(readable) == int(args[4])
            detail = f"got {len(readable)} ({[p.status for p in posts]})"
        elif kind == "link":
            if len(args) != 1:
                raise ParseError(d.line, "expect link <comment label>")
            ok = f"{args[0]}.link" in self.labels
            detail = "no link was created"
        elif kind == "metric":
            if len(args) != 3 or args[1] not in _OPS:
                raise ParseError(d.line, "expect metric <name> <op> <value>")
            totals = self.net.collect_metrics().totals
            if args[0] not in totals:
                raise ParseError(d.line, f"unknown metric {args[0]!r}")
            ok = _OPS[args[1]](totals[args[0]], float(args[2]))
            detail = f"{args[0]}={totals[args[0]]}"
        else:
            raise ParseError(d.line, f"unknown expectation {kind!r}")
        if ok:
            self.passed += 1
        else:
            self.fail(d, f"expect {' '.join(d.args)} failed: {detail}")

    # -- driver -------------------------------------------------------------

    def run(self, directives: list[Directive], until: Optional[float] = None) -> ScenarioResult:
        for d in directives:
            if until is not None and d.time > until:
                break
            self.net.run_until(d.time)
            self.execute(d)
        if until is not None:
            self.net.run_until(until)
        else:
            self.net.run()
        metrics = self.net.collect_metrics()
        status = 0 if not self.failures and metrics["stale_serves"] == 0 else 1
        return ScenarioResult(status, metrics, self.net.transcript_text(), self.failures, self.passed, self.net)


def run_scenario(source, seed: int = 0, until: Optional[float] = None) -> ScenarioResult:
    """Run a scenario given as a path or as script text."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
        text = Path(source).read_text()
    else:
        text = str(source)
    return ScenarioRunner(seed).run(parse_scenario(text), until)


def bundled_scenario(name: str) -> Path:
    path = Path(__file__).parent / "scenarios" / f"{name}.warp"
    if not path.exists():
        raise FileNotFoundError(name)
    return path


# --------------------------------------------------------------------------
# reporting


def metric_keys(metrics: MetricsReport) -> list[str]:
    """Stable order: fixed counters, per-type message counts, then the rest."""
    fixed = list(COUNTERS)
    sent = [f"sent.{k.value}" for k in MsgKind]
    rest = sorted(k for k in metrics.totals if k not in fixed and k not in sent)
    return [k for k in fixed + sent + rest if k in metrics.totals]


def report(metrics: MetricsReport, fmt: str = "text") -> str:
    keys = metric_keys(metrics)
    if fmt == "json":
        return json.dumps(
            {"totals": {k: metrics.totals[k] for k in keys}, "per_node": metrics.per_node}, indent=2
        ) + "\n"
    if fmt == "kv":
        lines = [f"{k}={metrics.totals[k]}" for k in keys]
        for node, counts in metrics.per_node.items():
            lines += [f"node.{node}.{k}={v}" for k, v in counts.items()]
        return "\n".join(lines) + "\n"
    if fmt == "text":
        width = max(map(len, keys), default=0)
        return "\n".join(f"{k:<{width}}  {metrics.totals[k]}" for k in keys) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def parse_kv(text: str) -> dict[str, int]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = int(v)
    return out
