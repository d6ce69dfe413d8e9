"""Boolean attribute policies (AND / OR / k-of-n trees).

The text form is prefix notation, e.g. ``OR(friend,AND(acquaintance,school),teammate)``
or ``KOFN(2;a,b,c)``.  A bare attribute is a single-leaf policy.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Mapping, Union

_ATTR_RE = re.compile(r"[A-Za-z0-9_:@.\-]+")


class InvalidPolicy(ValueError):
    pass


class UnknownAlias(KeyError):
    pass


@dataclass(frozen=True)
class Leaf:
    attribute: str

    def __post_init__(self):
        if not isinstance(self.attribute, str) or not _ATTR_RE.fullmatch(self.attribute):
            raise InvalidPolicy(f"bad attribute {self.attribute!r}")


@dataclass(frozen=True)
class And:
    children: tuple["Policy", ...]

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if len(self.children) < 2:
            raise InvalidPolicy("AND needs at least two children")


@dataclass(frozen=True)
class Or:
    children: tuple["Policy", ...]

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if len(self.children) < 2:
            raise InvalidPolicy("OR needs at least two children")


@dataclass(frozen=True)
class KofN:
    k: int
    children: tuple["Policy", ...]

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not 1 <= self.k <= len(self.children):
            raise InvalidPolicy(f"k-of-n needs 1 <= k <= n, got k={self.k} n={len(self.children)}")


Policy = Union[Leaf, And, Or, KofN]


def any_of(attributes) -> Policy:
    """OR over ``attributes``, collapsing to a leaf when there is only one."""
    leaves = [Leaf(a) for a in attributes]
    if not leaves:
        raise InvalidPolicy("empty disjunction")
    return leaves[0] if len(leaves) == 1 else Or(tuple(leaves))


def leaves(policy: Policy) -> Iterator[Leaf]:
    if isinstance(policy, Leaf):
        yield policy
    else:
        for child in policy.children:
            yield from leaves(child)


def attributes_of(policy: Policy) -> set[str]:
    return {leaf.attribute for leaf in leaves(policy)}


def validate(policy) -> Policy:
    """Re-check a policy tree built by hand (e.g. with mutable children)."""
    if isinstance(policy, Leaf):
        return Leaf(policy.attribute)
    if isinstance(policy, And):
        return And(tuple(validate(c) for c in policy.children))
    if isinstance(policy, Or):
        return Or(tuple(validate(c) for c in policy.children))
    if isinstance(policy, KofN):
        return KofN(policy.k, tuple(validate(c) for c in policy.children))
    raise InvalidPolicy(f"not a policy node: {policy!r}")


def evaluate_policy(policy: Policy, attributes) -> bool:
    if isinstance(policy, Leaf):
        return policy.attribute in attributes
    if isinstance(policy, And):
        return all(evaluate_policy(c, attributes) for c in policy.children)
    if isinstance(policy, Or):
        return any(evaluate_policy(c, attributes) for c in policy.children)
    if isinstance(policy, KofN):
        return sum(evaluate_policy(c, attributes) for c in policy.children) >= policy.k
    raise InvalidPolicy(f"not a policy node: {policy!r}")


def format_policy(policy: Policy) -> str:
    if isinstance(policy, Leaf):
        return policy.attribute
    inner = ",".join(format_policy(c) for c in policy.children)
    if isinstance(policy, And):
        return f"AND({inner})"
    if isinstance(policy, Or):
        return f"OR({inner})"
    return f"KOFN({policy.k};{inner})"


_TOKEN_RE = re.compile(r"\s*(AND\(|OR\(|KOFN\(|\)|,|;|[A-Za-z0-9_:@.\-]+)")


def parse_policy(text: str) -> Policy:
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise InvalidPolicy(f"unexpected character at {pos} in {text!r}")
        tokens.append(m.group(1))
        pos = m.end()
    if not tokens:
        raise InvalidPolicy("empty policy")

    def expect(i, tok):
        if i >= len(tokens) or tokens[i] != tok:
            raise InvalidPolicy(f"expected {tok!r} in {text!r}")
        return i + 1

    def children(i):
        out = []
        node, i = node_at(i)
        out.append(node)
        while i < len(tokens) and tokens[i] == ",":
            node, i = node_at(i + 1)
            out.append(node)
        return out, expect(i, ")")

    def node_at(i):
        if i >= len(tokens):
            raise InvalidPolicy(f"truncated policy {text!r}")
        tok = tokens[i]
        if tok == "AND(":
            kids, i = children(i + 1)
            return And(tuple(kids)), i
        if tok == "OR(":
            kids, i = children(i + 1)
            return Or(tuple(kids)), i
        if tok == "KOFN(":
            if i + 1 >= len(tokens) or not tokens[i + 1].isdigit():
                raise InvalidPolicy(f"KOFN needs an integer threshold in {text!r}")
            k = int(tokens[i + 1])
            kids, i = children(expect(i + 2, ";"))
            return KofN(k, tuple(kids)), i
        if tok in {")", ",", ";"}:
            raise InvalidPolicy(f"unexpected {tok!r} in {text!r}")
        return Leaf(tok), i + 1

    policy, end = node_at(0)
    if end != len(tokens):
        raise InvalidPolicy(f"trailing tokens in {text!r}")
    return policy


def bucket_attribute(bucket: int) -> str:
    return f"bucket:{bucket}"


def alias_attribute(alias: str) -> str:
    return f"alias:{alias}"


def rewrite_policy_for_revocation(
    policy: Policy,
    attribute: str,
    revoked_alias: str,
    buckets: Mapping[str, int],
    K: int,
) -> Policy:
    """Condition every occurrence of ``attribute`` on not being ``revoked_alias``.

    Each ``Leaf(attribute)`` becomes ``attribute AND (any other bucket OR any
    other member of the revoked alias's bucket)``.  Policy growth per occurrence
    is bounded by ``(K - 1) + (bucket size - 1)`` leaves.
    """
    if revoked_alias not in buckets:
        raise UnknownAlias(revoked_alias)
    if K < 2:
        raise InvalidPolicy("revocation by bucket needs K >= 2")
    b = buckets[revoked_alias]
    if not 0 <= b < K:
        raise InvalidPolicy(f"bucket {b} outside [0, {K})")
    others = [bucket_attribute(i) for i in range(K) if i != b]
    others += [alias_attribute(u) for u in sorted(buckets) if buckets[u] == b and u != revoked_alias]
    guard = any_of(others)

    def walk(node: Policy) -> Policy:
        if isinstance(node, Leaf):
            return And((node, guard)) if node.attribute == attribute else node
        kids = tuple(walk(c) for c in node.children)
        if isinstance(node, KofN):
            return KofN(node.k, kids)
        return type(node)(kids)

    return walk(policy)
