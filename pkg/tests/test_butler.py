import hashlib
import random

import pytest

from warpnet.butler import (
    BadSignature,
    ButlerConfig,
    NoSuchApplication,
    NotFound,
    NotOwned,
    Unauthorized,
    notify_statement,
)
from warpnet.crypto import BadCertificate, IdentityAuthority, UnknownPeer, sign_object
from warpnet.objects import TuKind, encode_object
from warpnet.policy import Leaf, Or, alias_attribute, attributes_of

from conftest import make_world

FRIEND, FAMILY = Leaf("friend"), Leaf("family")


@pytest.fixture
def trio(world):
    alice, bob, carol = (world.butlers[u] for u in ("alice", "bob", "carol"))
    alice.register_app("fl")
    alice.categorize_user(bob.identity.public, ["friend"])
    alice.categorize_user(carol.identity.public, ["family"])
    return world, alice, bob, carol


def test_categorization_is_one_way(trio):
    w, alice, bob, carol = trio
    assert bob.name in alice.social.peers and alice.name not in bob.social.peers
    assert alice.social.attributes(bob.name) >= {"friend", alias_attribute(alice.social.peer(bob.name).alias)}
    with pytest.raises(UnknownPeer):
        bob.social.peer(alice.name)


def test_categorize_rejects_uncertified(trio):
    w, alice, *_ = trio
    rogue = IdentityAuthority("rogue", random.Random(5)).register("mallory", random.Random(6))
    with pytest.raises(BadCertificate):
        alice.categorize_user(rogue.public, ["friend"])


def test_recategorize_keeps_alias(trio):
    w, alice, bob, _ = trio
    alias = alice.social.peer(bob.name).alias
    alice.categorize_user(bob.identity.public, ["friend", "family"])
    assert alice.social.peer(bob.name).alias == alias


def test_publish_emits_one_add(trio):
    w, alice, bob, carol = trio
    before = len(alice.emitted)
    name = alice.publish("fl", b"hi", FRIEND)
    assert [c.kind for _, c in alice.emitted[before:]] == [TuKind.ADD]
    assert alice.emitted[-1][1].x == name
    assert w.fetch(bob, name).data == b"hi"
    assert w.fetch(carol, name).status == "denied"


def test_fragmented_publish(trio):
    w, alice, bob, _ = trio
    data = bytes(range(256)) * 3
    first = alice.publish("fl", data, FRIEND, fragment=True, chunk_size=100)
    assert len(alice.fragment_sets[first].names()) == 8
    r = w.run(bob.fetch_file(first), bob)
    assert r.ok and r.data == data


def test_exclusion_policy(trio):
    w, alice, bob, carol = trio
    alice.categorize_user(carol.identity.public, ["friend", "family"])
    alias = alice.social.peer(carol.name).alias
    name = alice.publish("fl", b"not for carol", Or((FRIEND, FAMILY)))
    alice.revoke_access(carol.name, names=[name])
    new = alice.head_of(name)
    assert new != name
    assert w.fetch(bob, new).ok
    assert w.fetch(carol, new).status == "denied"
    assert alias_attribute(alias) not in attributes_of(alice.records[new].fp)


def test_update_bumps_version(trio):
    w, alice, bob, _ = trio
    name = alice.publish("fl", b"v1", FRIEND)
    new = alice.update_content(name, b"v2")
    assert alice.records[new].draft.version == 2
    assert alice.emitted[-1][1].kind is TuKind.UPDATE and alice.emitted[-1][1].y == new
    r = w.fetch(bob, name)
    assert r.data == b"v2" and r.name == new


def test_delete(trio):
    w, alice, bob, _ = trio
    name = alice.publish("fl", b"v1", FRIEND)
    alice.delete_content(name)
    assert alice.emitted[-1][1].kind is TuKind.DELETE
    assert w.fetch(bob, name).status == "not_found"
    with pytest.raises(NotFound):
        alice.update_content(name, b"x")


def test_foreign_content_is_not_owned(trio):
    w, alice, bob, _ = trio
    bob.register_app("fl")
    name = bob.publish("fl", b"b", FRIEND)
    with pytest.raises(NotOwned):
        alice.update_content(name, b"x")


def test_lazy_revocation_does_no_work_without_requests(trio):
    w, alice, bob, _ = trio
    names = [alice.publish("fl", bytes([i]), FRIEND) for i in range(5)]
    before = alice.metrics["reencryptions"]
    alice.revoke_access(bob.name, attribute="friend")
    assert alice.metrics["reencryptions"] == before
    r = w.fetch(bob, names[0])
    assert r.status == "denied"
    assert alice.metrics["reencryptions"] == before + 1
    with pytest.raises(UnknownPeer):
        alice.revoke_access("ia.nobody", attribute="friend")


def test_eager_revocation():
    w = make_world(users=("alice", "bob"), config=ButlerConfig(lazy_reencryption=False))
    alice, bob = w.butlers["alice"], w.butlers["bob"]
    alice.register_app("fl")
    alice.categorize_user(bob.identity.public, ["friend"])
    alice.publish("fl", b"x", FRIEND)
    alice.revoke_access(bob.name, attribute="friend")
    assert all(r.sealed for r in alice.records.values())


def test_key_request_from_stranger(trio):
    w, alice, *_ = trio
    with pytest.raises(Unauthorized):
        alice.handle_key_request("ia.stranger")


def test_rotation_shrinks_rewritten_policy(trio):
    w, alice, bob, carol = trio
    alice.categorize_user(carol.identity.public, ["friend"])
    name = alice.publish("fl", b"x", FRIEND)
    alice.revoke_access(carol.name, attribute="friend")
    new = alice.head_of(name)
    assert alice.records[new].fp != FRIEND
    alice.rotate_epoch()
    shrunk = alice.reencrypt(new)
    assert alice.records[shrunk].fp == FRIEND
    assert w.fetch(bob, shrunk).ok
    assert w.fetch(carol, shrunk).status == "denied"


def test_notify_creates_link(trio):
    w, alice, bob, _ = trio
    target = alice.publish("fl", b"photo", FRIEND)
    comment, link = w.run(bob.comment(target, b"nice", Leaf("friend")), bob)
    assert link is not None
    assert alice.records[link].draft.links.reference == comment
    assert alice.records[link].fp == FRIEND
    assert link.folder == target.folder


def test_notify_rejects_tampered_checksum(trio):
    w, alice, bob, _ = trio
    bob.register_app("fl")
    name = bob.publish("fl", b"nice", FRIEND)
    checksum = hashlib.sha256(encode_object(bob.objects[name])).digest()
    body = {
        "content_name": name,
        "checksum": checksum,
        "signature": sign_object(bob.identity, notify_statement(name, checksum)),
        "application": "fl",
    }
    assert alice.handle_notify(bob.node_id, body) is not None
    with pytest.raises(BadSignature):
        alice.handle_notify(bob.node_id, dict(body, checksum=bytes(32)))
    with pytest.raises(NoSuchApplication):
        alice.handle_notify(bob.node_id, dict(body, application="nope"))


def test_notify_subscription_and_accept(trio):
    w, alice, bob, carol = trio
    alice.subscribe_notify("fl")
    target = alice.publish("fl", b"photo", FRIEND)
    w.run(bob.comment(target, b"a", FRIEND), bob)
    assert len(alice.application("fl").inbox) == 1
    alice.unsubscribe_notify("fl")
    w.run(bob.comment(target, b"b", FRIEND), bob)
    assert len(alice.application("fl").inbox) == 1
    alice.apps["fl"].accept = lambda who, body: False
    assert w.run(bob.comment(target, b"c", FRIEND), bob)[1] is None


def test_app_crud_isolation(trio):
    w, alice, *_ = trio
    alice.register_app("other")
    rid = alice.app_create("fl", {"k": 1})
    assert alice.app_read("fl", rid) == {"k": 1}
    alice.app_update("fl", rid, {"k": 2})
    assert alice.app_read("fl", rid) == {"k": 2}
    with pytest.raises(Unauthorized):
        alice.app_read("other", rid)
    alice.app_delete("fl", rid)
    with pytest.raises(NotFound):
        alice.app_read("fl", rid)


def test_feed_and_index(trio):
    w, alice, bob, _ = trio
    posts = [alice.publish("fl", f"p{i}".encode(), FRIEND, feed="main") for i in range(4)]
    index = alice.application("fl").index
    assert alice.records[index["latest"]].draft.links.reference == posts[-1]
    got = w.run(bob.read_feed(alice.name, "fl", "main"), bob)
    assert [r.data for r in got] == [b"p0", b"p1", b"p2", b"p3"]
    entry = alice.records[index["main"]].draft.links.previous
    alice.delete_content(entry)
    got = w.run(bob.read_feed(alice.name, "fl", "main"), bob)
    assert [r.data for r in got] == [b"p0", b"p1", b"p3"]


def test_certificate_nesting(trio):
    w, alice, *_ = trio
    w.add_distributor("d1")
    w.add_distributor("d2")
    root = alice.folder("fl")
    child = alice.folder("fl", "sub")
    alice.issue_certificate("d2", child)
    cert = alice.issue_certificate("d1", root)
    assert set(cert.distributors) == {"d1", "d2"}
    assert alice.distributors_for(child)[0] == ["d2"]
    assert alice.distributors_for(alice.folder("fl", "other"))[0] == ["d1"]
    with pytest.raises(NotOwned):
        w.butlers["bob"].issue_certificate("d1", root)
