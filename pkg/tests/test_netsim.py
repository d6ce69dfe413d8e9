import pytest

from warpnet.naming import FolderName
from warpnet.netsim import Call, Message, MsgKind, Node, RoutingTable, SimNetwork, Sleep, UnknownNode


class Echo(Node):
    def on_request(self, msg):
        self.count("serves")
        self.reply(msg, MsgKind.DATA, msg.name, msg.body)


class Client(Node):
    def ask(self, dst, body, timeout=None):
        reply = yield Call(dst, Message(MsgKind.REQUEST, "n", body), timeout)
        return None if reply is None else reply.body


def pair(seed=0):
    net = SimNetwork(seed)
    net.add_node(Echo("srv"))
    client = net.add_node(Client("cli"))
    return net, client


def test_call_round_trip_and_transcript():
    net, client = pair()
    proc = net.spawn(client.ask("srv", 7), "cli")
    assert net.wait(proc) == 7
    assert [line.split(" | ")[1:4] for line in net.transcript] == [["cli", "srv", "REQUEST"], ["srv", "cli", "DATA"]]
    lo, hi = net.latency_range
    assert 2 * lo <= net.now <= 2 * hi


def run_many(seed):
    net, client = pair(seed)
    for i in range(20):
        net.spawn(client.ask("srv", i), "cli")
    net.run()
    return net.transcript_text(), net.collect_metrics().flat()


def test_same_seed_same_run():
    assert run_many(3) == run_many(3)
    assert run_many(3)[0] != run_many(4)[0]


def test_self_message_has_zero_latency():
    net = SimNetwork()
    node = net.add_node(Client("a"))
    net.add_node(Echo("b"))
    assert net.latency("a", "a") == 0.0
    net.send("a", "a", Message(MsgKind.NOTIFY))
    net.run()
    assert net.now == 0.0
    assert node.metrics["unhandled_messages"] == 1


def test_unknown_node():
    net, _ = pair()
    with pytest.raises(UnknownNode):
        net.send("cli", "ghost", Message(MsgKind.REQUEST))
    with pytest.raises(UnknownNode):
        net.node("ghost")


def test_down_node_drops_and_call_times_out():
    net, client = pair()
    net.node("srv").up = False
    proc = net.spawn(client.ask("srv", 1, timeout=2.0), "cli")
    assert net.wait(proc) is None
    assert net.now == pytest.approx(2.0)
    assert net.collect_metrics()["messages_dropped"] == 1


def test_run_until_sets_clock_and_keeps_future_events():
    net = SimNetwork()
    fired = []
    net.schedule(5.0, lambda: fired.append(net.now))
    net.schedule(15.0, lambda: fired.append(net.now))
    net.run_until(10.0)
    assert fired == [5.0] and net.now == 10.0 and net.pending() == 1


def test_sleep_and_equal_time_order():
    net = SimNetwork()
    order = []

    def proc(tag, delay):
        yield Sleep(delay)
        order.append(tag)

    for tag in "abc":
        net.spawn(proc(tag, 1.0), None)
    net.run()
    assert order == ["a", "b", "c"]


def test_routing_table_longest_prefix_and_expiry():
    root = FolderName("ia", "alice", "fl")
    child = root.child("a" * 32)
    table = RoutingTable()
    table.install(root, "d1", 100)
    table.install(child, "d2", 50)
    name = child.name("1" * 32)
    assert table.lookup(name, 0).distributor == "d2"
    assert table.lookup(name, 60).distributor == "d1"
    assert table.lookup(name, 100) is None
    table.prune(60)
    assert len(table) == 1


def test_fresh_metrics_are_zero():
    net, _ = pair()
    metrics = net.collect_metrics()
    assert all(v == 0 for v in metrics.totals.values())
    assert metrics.per_node == {"cli": {}, "srv": {}}


def test_rng_streams_are_independent_and_stable():
    net = SimNetwork(9)
    assert net.rng("x").random() == SimNetwork(9).rng("x").random()
    assert net.rng("x").random() != net.rng("y").random()
