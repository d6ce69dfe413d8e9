"""Feeds, the application index and comments with links.

Run:  python3 demos/03_feeds_and_comments.py
"""

from warpnet.butler import Butler
from warpnet.crypto import IdentityAuthority, KeyIssuer
from warpnet.netsim import SimNetwork
from warpnet.policy import Leaf

net = SimNetwork(seed=2)
ia = IdentityAuthority("ia", net.rng("ia"))
net.authorities["ia"] = ia.public_key


def butler(user):
    ident = ia.register(user, net.rng("id", user))
    return net.add_node(Butler(user, ident, KeyIssuer(ident.name, net.rng("k", user).randbytes(32)), net.rng("b", user)))


def run(proc, owner):
    return net.wait(net.spawn(proc, owner.node_id))


alice, bob = butler("alice"), butler("bob")
alice.register_app("fl")
alice.categorize_user(bob.identity.public, ["friend"])

for text in (b"first post", b"second post", b"third post"):
    alice.publish("fl", text, Leaf("friend"), feed="news")
print("Alice's index:", {k: str(v)[-8:] for k, v in alice.application("fl").index.items()})
posts = run(bob.read_feed(alice.name, "fl", "news"), bob)
print("Bob walks the feed from the index:", [p.data.decode() for p in posts])

# Deleting a feed entry cuts it out of the chain; neighbours are re-linked.
tail = alice.application("fl").index["news"]
middle = alice.records[tail].draft.links.previous
alice.delete_content(middle)
posts = run(bob.read_feed(alice.name, "fl", "news"), bob)
print("after cutting the middle entry:", [p.data.decode() for p in posts])

# A comment is Bob's own object; Alice's butler answers the NOTIFY with a link.
target = posts[-1].name
comment, link = run(bob.comment(target, b"nice!", Leaf("friend")), bob)
print(f"Bob's comment {str(comment)[-8:]} is linked from Alice's {str(link)[-8:]}")
print("link points at:", alice.records[link].draft.links.reference == comment)
