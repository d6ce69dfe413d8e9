import random
import struct

import pytest
from hypothesis import given, settings, strategies as st

from warpnet import tlv
from warpnet.crypto import AccessDenied, IdentityAuthority, KeyIssuer, KeyRing
from warpnet.naming import FolderName, tu_head
from warpnet.objects import (
    DistributionCertificate,
    EmptyData,
    Feed,
    FragmentSet,
    Links,
    NameNotOwned,
    NetworkObject,
    NotInFeed,
    NotTail,
    ObjectDraft,
    OrderViolation,
    ThreadUpdateCommand,
    TuKind,
    TuRef,
    append_feed_entry,
    build_index,
    build_object,
    decode_index,
    decode_object,
    encode_object,
    fragment_file,
    fragment_name,
    open_distributor,
    open_follower,
    reassemble,
    verify_signature,
)
from warpnet.policy import Leaf
from warpnet.tlv import MalformedEncoding

IA = IdentityAuthority("ia", random.Random(0))
ALICE = IA.register("alice", random.Random(1))
ISSUER = KeyIssuer(ALICE.name, b"a" * 32)
ROOT = FolderName("ia", "alice", "fl")
FOLDER = ROOT.child("1" * 32)
TU = TuRef(tu_head(FOLDER), tu_head(FOLDER))
FP, DP = Leaf("friend"), Leaf("dist:fl")


def ring(*attrs, epoch=0):
    r = KeyRing("reader", ISSUER.name)
    r.add(ISSUER.key(a, epoch) for a in attrs)
    return r


def name(i: int):
    return FOLDER.name(f"{i:032x}")


def make(payload=b"data", links=Links(), seed=0):
    return build_object(ALICE, ISSUER, name(1), payload, FP, DP, links, TU, 0, random.Random(seed))


def test_build_and_open():
    links = Links(reference=name(9), next=name(2))
    obj = make(links=links)
    view = open_follower(obj, ring("friend"))
    assert view.data == b"data" and view.links == links
    assert obj.version == 1 and obj.application == "fl"
    assert verify_signature(obj, ALICE.public_key)


def test_group_separation():
    obj = make()
    with pytest.raises(AccessDenied):
        open_follower(obj, ring("colleague"))
    assert obj.content_name == name(1)  # public fields stay readable
    dist = ring("dist:fl")
    assert open_distributor(obj, dist) == TU
    with pytest.raises(AccessDenied):
        open_follower(obj, dist)


def test_name_not_owned():
    other = FolderName("ia", "bob", "fl").name("2" * 32)
    with pytest.raises(NameNotOwned):
        build_object(ALICE, ISSUER, other, b"x", FP, DP, Links(), TU, 0)


def test_links_seed_and_count_together():
    with pytest.raises(ValueError):
        Links(segment_seed=b"\0" * 16)
    with pytest.raises(ValueError):
        Links(number_of_segments=3)


objects = st.builds(
    NetworkObject,
    st.integers(1, 50).map(name),
    st.integers(1, 2**40),
    st.sampled_from(["fl", "photos"]),
    st.binary(max_size=64),
    st.binary(max_size=64),
    st.binary(max_size=64),
    st.binary(max_size=64),
)


@given(objects)
def test_codec_round_trip(obj):
    raw = encode_object(obj)
    back = decode_object(raw)
    assert back == obj and encode_object(back) == raw


@given(objects, st.data())
def test_truncation_is_rejected(obj, data):
    raw = encode_object(obj)
    cut = data.draw(st.integers(0, len(raw) - 1))
    with pytest.raises(MalformedEncoding):
        decode_object(raw[:cut])


def test_unknown_duplicate_and_out_of_order_fields():
    raw = encode_object(make())
    with pytest.raises(MalformedEncoding):
        decode_object(raw + struct.pack(">BI", 9, 0))
    with pytest.raises(MalformedEncoding):
        decode_object(raw + struct.pack(">BI", 7, 0))
    first = tlv.decode(raw, {i: True for i in range(1, 8)})
    swapped = b"".join(struct.pack(">BI", i, len(first[i])) + first[i] for i in (2, 1, 3, 4, 5, 6, 7))
    with pytest.raises(MalformedEncoding):
        decode_object(swapped)


def test_signature_detects_mutation():
    obj = make()
    raw = bytearray(encode_object(obj))
    raw[-1] ^= 1
    assert not verify_signature(decode_object(bytes(raw)), ALICE.public_key)


def test_signed_encoding_is_stable():
    assert encode_object(make(seed=5)) == encode_object(make(seed=5))


# -- feeds


def draft(i):
    return ObjectDraft(name(i), b"", FP, DP, TU)


def test_append_links_both_ways():
    tail, entry = append_feed_entry(draft(1), draft(2))
    assert tail.links.next == name(2) and entry.links.previous == name(1)
    assert tail.version == 2
    with pytest.raises(NotTail):
        append_feed_entry(tail, draft(3))


def build_feed(n):
    f = Feed()
    for i in range(1, n + 1):
        f.append(draft(i))
    return f


@given(st.integers(1, 40))
def test_traversals_agree(n):
    f = build_feed(n)
    f.check()
    assert list(f.forward()) == list(reversed(list(f.backward())))


def test_cut_middle_and_head():
    f = build_feed(3)
    pred, succ, cmd = f.cut(name(2), name(2))
    assert f[name(1)].links.next == name(3) and f[name(3)].links.previous == name(1)
    assert cmd.kind is TuKind.CUT and (cmd.x2, cmd.y2) == (name(1), name(3))
    f.check()
    g = build_feed(3)
    pred, succ, cmd = g.cut(name(1), name(1))
    assert pred is None and succ.name == name(2) and cmd.x2 is None
    g.check()


def test_cut_errors():
    f = build_feed(3)
    with pytest.raises(NotInFeed):
        f.cut(name(9), name(1))
    with pytest.raises(OrderViolation):
        f.cut(name(3), name(1))


@given(st.integers(2, 30), st.data())
def test_cut_never_leaves_removed_names(n, data):
    f = build_feed(n)
    i = data.draw(st.integers(1, n))
    j = data.draw(st.integers(i, n))
    _, _, cmd = f.cut(name(i), name(j))
    f.check()
    assert set(cmd.span) == {name(k) for k in range(i, j + 1)}
    assert not set(f.forward()) & set(cmd.span)


def test_full_interior_cut_leaves_two():
    f = build_feed(6)
    f.cut(name(2), name(5))
    f.check()
    assert list(f.forward()) == [name(1), name(6)]


# -- fragments


def test_fragment_name_golden():
    # sha256(16 zero bytes || 00000001), first 32 hex chars
    assert fragment_name(bytes(16), 1) == "e9ff0e6e6de95da56ff09f4e3e0f481d"
    assert fragment_name(bytes(16), 2) == "318b8f30815253bcae6eef8ff3dbd52e"
    with pytest.raises(ValueError):
        fragment_name(bytes(16), 0)


def test_fragment_sizes():
    fs, drafts = fragment_file(b"0123456789", 4, FOLDER, bytes(16), fp=FP, dp=DP, tu=TU)
    assert fs.count == 3 and [len(d.payload) for d in drafts] == [4, 4, 2]
    assert {d.name.folder for d in drafts} == {FOLDER}
    assert len({d.name.appendix for d in drafts}) == 3
    assert all(d.links.segment_seed == bytes(16) and d.links.number_of_segments == 3 for d in drafts)
    with pytest.raises(EmptyData):
        fragment_file(b"", 4, FOLDER, bytes(16), fp=FP, dp=DP, tu=TU)


@given(st.binary(min_size=1, max_size=300), st.integers(1, 64), st.binary(min_size=16, max_size=16), st.randoms())
def test_reassemble_identity(data, chunk, seed, rnd):
    fs, drafts = fragment_file(data, chunk, FOLDER, seed, fp=FP, dp=DP, tu=TU)
    rnd.shuffle(drafts)
    assert reassemble(FragmentSet(FOLDER, seed, fs.count), {d.name: d.payload for d in drafts}) == data


# -- index, TU commands, certificates


def test_index():
    idx = build_index(ROOT, {"latest": name(3)}, fp=FP, dp=DP, tu=TU)
    assert idx.name == ROOT.name("0" * 32) and decode_index(idx.payload) == {"latest": name(3)}
    again = build_index(ROOT, {"latest": name(4)}, fp=FP, dp=DP, tu=TU, previous=idx)
    assert again.version == 2
    assert decode_index(build_index(ROOT, {}, fp=FP, dp=DP, tu=TU).payload) == {}
    with pytest.raises(ValueError):
        build_index(ROOT, {"x": FolderName("ia", "bob", "fl").name("1" * 32)}, fp=FP, dp=DP, tu=TU)


commands = st.one_of(
    st.builds(lambda a, s: ThreadUpdateCommand(TuKind.ADD, name(a), seq=s), st.integers(1, 99), st.integers(0, 999)),
    st.builds(lambda a, s: ThreadUpdateCommand(TuKind.DELETE, name(a), seq=s), st.integers(1, 99), st.integers(0, 999)),
    st.builds(lambda a, b: ThreadUpdateCommand(TuKind.UPDATE, name(a), name(b)), st.integers(1, 99), st.integers(1, 99)),
    st.builds(
        lambda a, b: ThreadUpdateCommand(TuKind.CUT, name(a), name(b), name(a + 100), None, (name(a), name(b))),
        st.integers(1, 99),
        st.integers(1, 99),
    ),
)


@given(commands)
def test_tu_command_round_trip(cmd):
    assert ThreadUpdateCommand.from_bytes(cmd.to_bytes()) == cmd


def test_tu_command_arity():
    with pytest.raises(ValueError):
        ThreadUpdateCommand(TuKind.UPDATE, name(1))
    with pytest.raises(ValueError):
        ThreadUpdateCommand(TuKind.ADD, name(1), name(2))


@settings(deadline=None)
@given(st.floats(0, 1e9), st.lists(st.sampled_from(["d1", "d2", "d3"]), unique=True, min_size=1))
def test_certificate_round_trip(expiry, dists):
    cert = DistributionCertificate(ALICE.name, ROOT, dists[0], tuple(dists), (ISSUER.key("dist:fl", 0),), expiry).sign(ALICE)
    back = DistributionCertificate.from_bytes(cert.to_bytes())
    assert back == cert and back.verify(ALICE.public_key)
    tampered = DistributionCertificate(ALICE.name, FOLDER, cert.holder, cert.distributors, cert.keys, cert.expiry, cert.signature)
    assert not tampered.verify(ALICE.public_key)
