import pytest
from hypothesis import given, strategies as st

from warpnet.distributor import (
    BadSignature,
    CacheEntry,
    ContentStore,
    Expired,
    OutOfOrderCommand,
    PopularityCounter,
    RequestBanWindow,
    TuFollowState,
    rbw_deadline,
)
from warpnet.naming import FolderName
from warpnet.netsim import Call, Message, MsgKind
from warpnet.objects import ThreadUpdateCommand, TuKind
from warpnet.policy import Leaf

from conftest import make_world

FRIEND = Leaf("friend")


def setup(p_min=1, tau=1800.0, folder="", **cfg):
    w = make_world(users=("alice", "bob"))
    alice, bob = w.butlers["alice"], w.butlers["bob"]
    alice.register_app("fl")
    alice.categorize_user(bob.identity.public, ["friend"])
    d = w.add_distributor("d1", p_min=p_min, tau_freshness=tau, **cfg)
    f = alice.folder("fl", folder)
    alice.issue_certificate("d1", f)
    w.settle()
    return w, alice, bob, d, f


# -- request ban window


@pytest.mark.parametrize(
    "fail,succ,expected",
    [(0, 5, 100.0), (3, 0, 130.0), (4, 1, 120.0), (6, 2, 120.0), (1, 9, 101.0)],
)
def test_rbw_deadline_vectors(fail, succ, expected):
    assert rbw_deadline(100.0, fail, succ, 10.0) == pytest.approx(expected)


def test_rbw_window_forgets_old_requests():
    rbw = RequestBanWindow(10.0)
    rbw.on_request("p", False, 0.0)
    assert rbw.counts("p", 5.0) == (1, 0)
    assert rbw.counts("p", 10.0) == (0, 0)


@given(st.lists(st.tuples(st.floats(0, 5), st.booleans()), max_size=60))
def test_next_allowed_never_decreases(steps):
    rbw = RequestBanWindow(10.0)
    now, last = 0.0, 0.0
    for dt, ok in steps:
        now += dt
        nxt = rbw.on_request("p", ok, now)
        assert nxt >= last
        last = nxt


def test_all_successes_never_ban():
    rbw = RequestBanWindow(10.0)
    for i in range(100):
        assert rbw.allowed("p", i * 0.01)
        rbw.on_request("p", True, i * 0.01)


# -- popularity and store


def test_popularity_ages_out():
    pop = PopularityCounter(window=100.0, threshold=2)
    pop.record("x", 0.0)
    pop.record("x", 50.0)
    assert pop.is_popular("x", 60.0)
    assert not pop.is_popular("x", 120.0)
    assert pop.count("y", 0.0) == 0


def test_content_store_lru():
    store = ContentStore(capacity=2)
    for k in "abc":
        store.put(k, CacheEntry(None, 0.0, None))
    assert "a" not in store and len(store) == 2
    store.get("b")
    store.put("d", CacheEntry(None, 0.0, None))
    assert store.names() == ["b", "d"]


# -- TU commands


def test_process_tu_commands():
    w, alice, bob, d, f = setup()
    x, y = f.name("1" * 32), f.name("2" * 32)
    for n in (x, y):
        d.store.put(n, CacheEntry(None, 0.0, None))
    d.process_tu_command(ThreadUpdateCommand(TuKind.UPDATE, x, y))
    assert x not in d.store and d.canonical(x) == y
    d.process_tu_command(ThreadUpdateCommand(TuKind.DELETE, y))
    assert y not in d.store and y in d.blocklist and d.canonical(x) == x
    names = [f.name(f"{i:032x}") for i in range(1, 6)]
    for n in names:
        d.store.put(n, CacheEntry(None, 0.0, None))
    d.process_tu_command(ThreadUpdateCommand(TuKind.CUT, names[1], names[2], names[0], names[3], tuple(names[1:3])))
    assert d.store.names() == [names[4]]


def test_sequence_gap_is_detected():
    w, alice, bob, d, f = setup()
    state = TuFollowState(f, f.name("0" * 32), seq=3)
    d.process_tu_command(ThreadUpdateCommand(TuKind.ADD, f.name("1" * 32), seq=4), state)
    with pytest.raises(OutOfOrderCommand):
        d.process_tu_command(ThreadUpdateCommand(TuKind.ADD, f.name("1" * 32), seq=6), state)


# -- certificates


def test_expired_and_forged_certificates():
    w, alice, bob, d, f = setup()
    cert = alice.issue_certificate("d1", f, expiry=w.net.now + 10, send=False)
    with pytest.raises(Expired):
        d.accept_certificate(cert, now=w.net.now + 20)
    bob.register_app("fl")
    forged = bob.issue_certificate("d1", bob.folder("fl"), send=False)
    bogus = type(forged)(alice.name, f, "d1", ("d1",), forged.keys, forged.expiry, forged.signature)
    with pytest.raises(BadSignature):
        d.accept_certificate(bogus)


def test_sibling_folder_is_not_covered():
    w, alice, bob, d, f = setup(folder="a")
    sibling = alice.folder("fl", "b")
    assert d.covering_certificate(f.child("9" * 32), w.net.now) is not None
    assert d.covering_certificate(sibling, w.net.now) is None
    name = alice.publish("fl", b"x", FRIEND, folder="b")
    proc = w.net.spawn(ask(d, name), "bob")
    reply = w.net.wait(proc)
    assert reply.kind is MsgKind.NACK and reply.body["reason"] == "not_found"


def ask(d, name):
    reply = yield Call(d.node_id, Message(MsgKind.REQUEST, str(name)), timeout=60.0)
    return reply


# -- serving


def test_warm_cache_serves_without_upstream():
    w, alice, bob, d, f = setup()
    name = alice.publish("fl", b"hello", FRIEND)
    first = w.fetch(bob, name)
    assert first.ok and first.via == "d1" and first.data == b"hello"
    before = d.metrics["upstream_content_fetches"]
    w.settle(10)
    second = w.fetch(bob, name)
    assert second.ok and d.metrics["upstream_content_fetches"] == before
    assert d.metrics["cache_hits"] == 1


def test_update_is_seen_after_refresh():
    w, alice, bob, d, f = setup(tau=100.0)
    name = alice.publish("fl", b"v1", FRIEND)
    w.fetch(bob, name)
    alice.update_content(name, b"v2")
    w.settle(200)
    r = w.fetch(bob, name)
    assert r.ok and r.data == b"v2" and r.name != name
    assert d.metrics["stale_serves"] == 0


def test_delete_becomes_not_found():
    w, alice, bob, d, f = setup(tau=100.0)
    name = alice.publish("fl", b"v1", FRIEND)
    w.fetch(bob, name)
    alice.delete_content(name)
    w.settle(200)
    assert w.fetch(bob, name).status == "not_found"
    assert name in d.blocklist


def test_unreachable_tu_fails_closed():
    w, alice, bob, d, f = setup(tau=100.0)
    name = alice.publish("fl", b"v1", FRIEND)
    w.fetch(bob, name)
    alice.up = False
    w.settle(200)
    proc = w.net.spawn(ask(d, name), "bob")
    reply = w.net.wait(proc)
    assert reply.kind is MsgKind.NACK
    assert d.metrics["stale_serves"] == 0
    assert not any(e.source == "cache" and e.time > 200 for e in w.net.serve_log)


def test_parent_tu_governs_child_folder():
    w, alice, bob, d, f = setup()
    top = alice.publish("fl", b"top", FRIEND)
    w.fetch(bob, top)
    child = alice.publish("fl", b"child", FRIEND, folder="sub")
    w.fetch(bob, child)
    assert set(d.follows) == {f}
    assert d.governing_tu(child).folder == f


def test_unpopular_content_is_not_cached():
    w, alice, bob, d, f = setup(p_min=3)
    name = alice.publish("fl", b"x", FRIEND)
    for _ in range(2):
        w.fetch(bob, name)
    assert name not in d.store
    w.fetch(bob, name)
    w.settle()
    assert name in d.store
    assert max(e.upstream_fetches for e in w.net.serve_log) <= 1


def test_resolve_reply_lists_distributors():
    w, alice, bob, d, f = setup()

    def resolve():
        return (yield Call("d1", Message(MsgKind.RESOLVE, str(f.child("3" * 32)))))

    reply = w.net.wait(w.net.spawn(resolve(), "bob"))
    assert reply.kind is MsgKind.RESOLVE_REPLY and reply.body["distributors"] == ["d1"]
    other = FolderName("ia", "bob", "fl")

    def foreign():
        return (yield Call("d1", Message(MsgKind.RESOLVE, str(other))))

    assert w.net.wait(w.net.spawn(foreign(), "bob")).body["reason"] == "unauthorized"
