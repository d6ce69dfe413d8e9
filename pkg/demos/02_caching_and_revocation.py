"""A distributor caches Alice's post, then Alice revokes Bob.

The distributor learns about the change from Alice's thread-update feed. Once
its view of that feed is older than the freshness window it re-reads the feed
before serving again, so Bob's next fetch gets the re-encrypted version.

Run:  python3 demos/02_caching_and_revocation.py
"""

from warpnet.butler import Butler
from warpnet.crypto import IdentityAuthority, KeyIssuer
from warpnet.distributor import Distributor, DistributorConfig
from warpnet.netsim import SimNetwork
from warpnet.policy import Leaf, format_policy

net = SimNetwork(seed=1)
ia = IdentityAuthority("ia", net.rng("ia"))
net.authorities["ia"] = ia.public_key


def butler(user):
    ident = ia.register(user, net.rng("id", user))
    node = Butler(user, ident, KeyIssuer(ident.name, net.rng("k", user).randbytes(32), buckets=4), net.rng("b", user))
    return net.add_node(node)


alice, bob, carol = butler("alice"), butler("bob"), butler("carol")
cache = net.add_node(Distributor("cache", config=DistributorConfig(p_min=1)))
alice.register_app("fl")
for peer in (bob, carol):
    alice.categorize_user(peer.identity.public, ["friend"])
alice.issue_certificate("cache", alice.folder("fl"))
net.run()


def fetch(who, name):
    result = net.wait(net.spawn(who.fetch(name), who.node_id))
    text = result.data.decode() if result.ok else result.status
    print(f"  t={net.now:8.1f}s  {who.node_id:<5} via {result.via or '-':<6} -> {text}")
    return result


post = alice.publish("fl", b"Alice: photos from the lake", Leaf("friend"))
print("1. Bob and Carol read the post; the distributor caches it.")
fetch(bob, post)
fetch(carol, post)
print(f"   cache holds {len(cache.store)} object(s); upstream fetches so far: {cache.metrics['upstream_content_fetches']}")

print("2. Alice excludes Bob from this post.")
alice.revoke_access(bob.name, names=[post])
head = alice.head_of(post)
print(f"   new policy: {format_policy(alice.records[head].fp)}")
print("   Within the freshness window the cached copy may still be served:")
fetch(bob, post)

print("3. After the window the distributor reads the TU, drops the copy and follows the redirect.")
net.run_until(net.now + cache.config.tau_freshness + 1)
fetch(bob, post)
fetch(carol, post)
print(f"   TU commands applied at the distributor: {cache.metrics['tu_commands_applied']}")
print(f"   stale serves: {net.collect_metrics()['stale_serves']}")
