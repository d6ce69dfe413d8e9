from __future__ import annotations

from dataclasses import dataclass, field

import pytest

from warpnet.butler import Butler, ButlerConfig
from warpnet.crypto import IdentityAuthority, KeyIssuer
from warpnet.distributor import Distributor, DistributorConfig
from warpnet.netsim import SimNetwork


@dataclass
class World:
    net: SimNetwork
    ia: IdentityAuthority
    butlers: dict = field(default_factory=dict)
    distributors: dict = field(default_factory=dict)

    def add_butler(self, user: str, *, buckets: int = 16, config: ButlerConfig | None = None) -> Butler:
        ident = self.ia.register(user, self.net.rng("identity", user))
        issuer = KeyIssuer(ident.name, self.net.rng("issuer", user).randbytes(32), buckets=buckets)
        b = Butler(user, ident, issuer, self.net.rng("butler", user), config)
        self.net.add_node(b)
        self.butlers[user] = b
        return b

    def add_distributor(self, node_id: str, **cfg) -> Distributor:
        d = Distributor(node_id, config=DistributorConfig(**cfg))
        self.net.add_node(d)
        self.distributors[node_id] = d
        return d

    def run(self, gen, owner):
        return self.net.wait(self.net.spawn(gen, owner.node_id if hasattr(owner, "node_id") else owner))

    def fetch(self, reader: Butler, name):
        return self.run(reader.fetch(name), reader)

    def settle(self, dt: float = 1.0) -> None:
        self.net.run_until(self.net.now + dt)


def make_world(seed: int = 0, users=(), **kw) -> World:
    net = SimNetwork(seed)
    ia = IdentityAuthority("ia", net.rng("ia"))
    net.authorities["ia"] = ia.public_key
    w = World(net, ia)
    for u in users:
        w.add_butler(u, **kw)
    return w


@pytest.fixture
def world():
    return make_world(users=("alice", "bob", "carol"))


# acceptance verdicts, filled in by test_acceptance and printed at the end
VERDICTS: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(VERDICTS, key=lambda k: int(k.split()[0])):
            terminalreporter.write_line(VERDICTS[key])
