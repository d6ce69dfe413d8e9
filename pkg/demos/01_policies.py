"""Who can read what: policy trees, keys and the exclusion rewrite.

Run:  python3 demos/01_policies.py
"""

import random

from warpnet.crypto import AccessDenied, KeyIssuer, KeyRing, decrypt_with_keyring, encrypt_with_policy
from warpnet.policy import Leaf, bucket_attribute, alias_attribute, format_policy, parse_policy, rewrite_policy_for_revocation

issuer = KeyIssuer("ia.alice", random.Random(0).randbytes(32), buckets=4)
for alias, bucket in [("bob", 1), ("carol", 1), ("dave", 2)]:
    issuer.enroll(alias, bucket)


def ring(*attrs):
    r = KeyRing("reader", issuer.name)
    r.add(issuer.key(a, issuer.epoch) for a in attrs)
    return r


def attempt(who, ct, attrs):
    try:
        print(f"  {who:<6} reads: {decrypt_with_keyring(ct, ring(*attrs)).decode()}")
    except AccessDenied:
        print(f"  {who:<6} is denied")


policy = parse_policy("OR(AND(friend,colleague),family)")
print("policy:", format_policy(policy))
ct = encrypt_with_policy(b"weekend plans", policy, issuer.epoch, issuer, random.Random(1))
attempt("bob", ct, ["friend"])
attempt("carol", ct, ["friend", "colleague"])
attempt("dave", ct, ["family"])

# Bob (bucket 1) is dropped from "friend".  The rewrite names every other
# bucket, plus the other aliases that share Bob's bucket.
print()
rewritten = rewrite_policy_for_revocation(Leaf("friend"), "friend", "bob", issuer.buckets, issuer.K)
print("after revoking bob:", format_policy(rewritten))
ct = encrypt_with_policy(b"surprise party", rewritten, issuer.epoch, issuer, random.Random(2))
attempt("bob", ct, ["friend", bucket_attribute(1), alias_attribute("bob")])
attempt("carol", ct, ["friend", bucket_attribute(1), alias_attribute("carol")])
attempt("dave", ct, ["friend", bucket_attribute(2), alias_attribute("dave")])
