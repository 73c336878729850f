import asyncio

from sting.bus import BrokerClient, BrokerServer, LocalBus, topic_matches
from sting.vtime import run_virtual


def test_topic_matching():
    assert topic_matches("sting/agents/dev1/status", "sting/agents/dev1/status")
    assert topic_matches("sting/agents/+/status", "sting/agents/dev1/status")
    assert not topic_matches("sting/agents/+/status", "sting/agents/dev1/results")
    assert not topic_matches("sting/agents/+/status", "sting/agents/dev1/status/extra")
    assert topic_matches("sting/#", "sting/agents/dev1/status")
    assert topic_matches("#", "anything/at/all")
    assert not topic_matches("sting/agents", "sting/agents/dev1")


def test_local_bus_delivery_and_envelope():
    async def main():
        bus = LocalBus()
        got = []
        bus.subscribe("sting/agents/+/status", got.append)
        msg_id = bus.publish("sting/agents/a/status", {"x": 1})
        await asyncio.sleep(0)
        assert len(got) == 1
        message = got[0]
        assert message["msg_id"] == msg_id
        assert message["schema_version"] == 1
        assert message["topic"] == "sting/agents/a/status"
        assert message["payload"] == {"x": 1}
        assert isinstance(message["sent_ns"], int)

    run_virtual(main())


def test_local_bus_unsubscribe():
    async def main():
        bus = LocalBus()
        got = []
        sub = bus.subscribe("t", got.append)
        bus.publish("t", {"n": 1})
        await asyncio.sleep(0)
        # unsubscribing also drops messages still in flight
        bus.unsubscribe(sub)
        bus.publish("t", {"n": 2})
        await asyncio.sleep(0)
        return got

    got = run_virtual(main())
    assert [m["payload"]["n"] for m in got] == [1]


def test_local_bus_partition_blocks_both_directions():
    async def main():
        bus = LocalBus()
        to_agent = []
        to_controller = []
        bus.subscribe("cmd", to_agent.append, owner="agent")
        bus.subscribe("status", to_controller.append)
        bus.partition("agent")
        bus.publish("cmd", {"n": 1})  # towards the partitioned agent
        bus.publish("status", {"n": 2}, owner="agent")  # from the agent
        await asyncio.sleep(0)
        bus.partition("agent", False)
        bus.publish("cmd", {"n": 3})
        bus.publish("status", {"n": 4}, owner="agent")
        await asyncio.sleep(0)
        return to_agent, to_controller

    to_agent, to_controller = run_virtual(main())
    assert [m["payload"]["n"] for m in to_agent] == [3]
    assert [m["payload"]["n"] for m in to_controller] == [4]


def test_msg_ids_unique():
    async def main():
        bus = LocalBus()
        ids = {bus.publish("t", {}) for _ in range(100)}
        return len(ids)

    assert run_virtual(main()) == 100


def test_broker_roundtrip_over_tcp():
    async def main():
        server = BrokerServer()
        address = await server.start("127.0.0.1:0")

        client_a = BrokerClient()
        await client_a.connect(address)
        client_b = BrokerClient()
        await client_b.connect(address)

        local_got = []
        a_got = []
        b_got = []
        server.subscribe("sting/agents/+/status", local_got.append)
        client_a.subscribe("sting/agents/a/config", a_got.append)
        client_b.subscribe("sting/agents/+/status", b_got.append)
        await asyncio.sleep(0.1)

        # server -> remote subscriber
        server.publish("sting/agents/a/config", {"k": 1})
        # client -> server local subscriber and the other client
        client_a.publish("sting/agents/a/status", {"k": 2})
        await asyncio.sleep(0.3)

        assert [m["payload"] for m in a_got] == [{"k": 1}]
        assert [m["payload"] for m in local_got] == [{"k": 2}]
        assert [m["payload"] for m in b_got] == [{"k": 2}]
        assert a_got[0]["schema_version"] == 1

        await client_a.close()
        await client_b.close()
        await server.stop()

    asyncio.run(main())
