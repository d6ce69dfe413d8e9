import itertools

import pytest
from hypothesis import given

from strategies import attribute_sets, oracle, policies
from warpnet.policy import (
    And,
    InvalidPolicy,
    KofN,
    Leaf,
    Or,
    UnknownAlias,
    alias_attribute,
    any_of,
    bucket_attribute,
    evaluate_policy,
    format_policy,
    leaves,
    parse_policy,
    rewrite_policy_for_revocation,
)

P = Or((Leaf("friend"), And((Leaf("acquaintance"), Leaf("school"))), Leaf("teammate")))


@pytest.mark.parametrize(
    "attrs, expected",
    [
        ({"teammate"}, True),  # friend or teammate alone suffices
        ({"acquaintance"}, False),  # acquaintance alone does not
        ({"acquaintance", "school"}, True),  # unless combined with school
        ({"friend"}, True),
        (set(), False),
    ],
)
def test_evaluate_example_policy(attrs, expected):
    assert evaluate_policy(P, attrs) is expected


def test_threshold():
    p = KofN(2, (Leaf("a"), Leaf("b"), Leaf("c")))
    assert evaluate_policy(p, {"a", "c"})
    assert not evaluate_policy(p, {"b"})


@pytest.mark.parametrize(
    "build",
    [
        lambda: And((Leaf("a"),)),
        lambda: Or(()),
        lambda: KofN(0, (Leaf("a"), Leaf("b"))),
        lambda: KofN(3, (Leaf("a"), Leaf("b"))),
        lambda: Leaf(""),
        lambda: Leaf("has space"),
    ],
)
def test_invalid_policies(build):
    with pytest.raises(InvalidPolicy):
        build()


@given(policies, attribute_sets)
def test_evaluate_matches_oracle(p, attrs):
    assert evaluate_policy(p, attrs) == oracle(p, attrs)


@given(policies)
def test_text_round_trip(p):
    assert parse_policy(format_policy(p)) == p


def test_text_form():
    assert format_policy(P) == "OR(friend,AND(acquaintance,school),teammate)"
    assert parse_policy("KOFN(2;a,b,c)") == KofN(2, (Leaf("a"), Leaf("b"), Leaf("c")))
    for bad in ("", "AND(a)", "OR(a,b", "KOFN(x;a,b)", "a b", "OR(a,,b)"):
        with pytest.raises(InvalidPolicy):
            parse_policy(bad)


def test_rewrite_example():
    buckets = {"ub": 2, "uc": 2, "ua": 0, "ud": 3}
    out = rewrite_policy_for_revocation(Leaf("friend"), "friend", "ub", buckets, 4)
    guard = Or(tuple(Leaf(a) for a in ("bucket:0", "bucket:1", "bucket:3", "alias:uc")))
    assert out == And((Leaf("friend"), guard))


def test_rewrite_sole_member_of_bucket():
    out = rewrite_policy_for_revocation(Leaf("friend"), "friend", "ub", {"ub": 1, "ua": 0}, 4)
    assert out == And((Leaf("friend"), Or(tuple(Leaf(f"bucket:{i}") for i in (0, 2, 3)))))


def test_rewrite_leaves_other_nodes():
    p = Or((Leaf("family"), Leaf("friend")))
    out = rewrite_policy_for_revocation(p, "friend", "ub", {"ub": 0}, 2)
    assert out.children[0] == Leaf("family")


def test_rewrite_unknown_alias():
    with pytest.raises(UnknownAlias):
        rewrite_policy_for_revocation(Leaf("friend"), "friend", "nobody", {"ub": 0}, 4)


@pytest.mark.parametrize("K", [2, 3, 4, 8])
def test_rewrite_excludes_exactly_the_revoked_user(K):
    # 12 friends spread over K buckets; enumerate every user's keyring
    users = {f"u{i}": i % K for i in range(12)}
    for revoked in users:
        out = rewrite_policy_for_revocation(Leaf("friend"), "friend", revoked, users, K)
        for u, b in users.items():
            ring = {"friend", bucket_attribute(b), alias_attribute(u)}
            assert evaluate_policy(out, ring) == (u != revoked)
        grown = len(list(leaves(out))) - 1
        same_bucket = sum(1 for b in users.values() if b == users[revoked])
        assert grown <= (K - 1) + (same_bucket - 1)


def test_any_of():
    assert any_of(["a"]) == Leaf("a")
    assert any_of(["a", "b"]) == Or((Leaf("a"), Leaf("b")))
    with pytest.raises(InvalidPolicy):
        any_of([])


def test_every_subset_for_example_policy():
    attrs = ["friend", "acquaintance", "school", "teammate"]
    for r in range(len(attrs) + 1):
        for sub in itertools.combinations(attrs, r):
            assert evaluate_policy(P, set(sub)) == oracle(P, set(sub))
