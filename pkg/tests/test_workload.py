import pytest

from ctxchain.contracts import GPS_DISTANCE_CODE, deploy_code, gps_call_code
from ctxchain.engine import Engine, EventKind, replayer
from ctxchain.gateway import NetConfig, run_network
from ctxchain.model import OpCode, Transaction, validate_chain
from ctxchain.workload import (
    PAYLOAD_SIZE,
    DeviceSim,
    Scenario,
    WorkloadSpec,
    build_lanes,
    gen_contract_calls,
    gen_normal_load,
    gps_contract_address,
    run_on_engine,
)


def test_full_scale_shapes():
    a = WorkloadSpec.for_scenario("A", 1.0)
    assert (a.contexts, a.calls_per_context, a.load_devices) == (1, 1000, 0)
    c = WorkloadSpec.for_scenario("C", 1.0)
    assert (c.contexts, c.calls_per_context, c.total_calls) == (10, 100, 1000)
    b = WorkloadSpec.for_scenario("B", 1.0)
    assert (b.load_devices, b.load_tx_per_device) == (50, 100)
    desk = WorkloadSpec.for_scenario("C", 0.3)
    assert (desk.contexts, desk.calls_per_context) == (10, 30)
    assert WorkloadSpec.for_scenario("A", 0.3).total_calls == 300


def test_sequential_scenarios_reject_many_contexts():
    with pytest.raises(ValueError):
        WorkloadSpec(Scenario.A, 2, 10)
    with pytest.raises(ValueError):
        WorkloadSpec.for_scenario("B", 0)


def test_normal_load_per_gateway_count():
    spec = WorkloadSpec.for_scenario("B", 1.0)
    devices = [DeviceSim.from_seed(i) for i in range(spec.load_devices)]
    lanes = gen_normal_load(spec, devices)
    assert sum(len(lane) for lane in lanes) == 5_050
    assert all(len(step.tx.data) == PAYLOAD_SIZE for lane in lanes for step in lane[1:])
    assert gen_normal_load(spec, []) == []


def test_seeded_schedules_are_reproducible():
    spec = WorkloadSpec.for_scenario("D", 0.05, contexts=3)
    first = build_lanes(spec, 4, seed=11)
    second = build_lanes(spec, 4, seed=11)
    other = build_lanes(spec, 4, seed=12)
    flatten = lambda lanes: [(lane.gateway, [s.tx for s in lane.steps]) for lane in lanes]
    assert flatten(first) == flatten(second)
    assert flatten(first) != flatten(other)
    assert DeviceSim.from_seed(3).payload() == DeviceSim.from_seed(3).payload()


def test_gps_calls_through_an_engine():
    dev = DeviceSim.from_seed(1, position=(0, 0))
    engine = Engine()
    engine.apply(dev.create_context().tx)
    contract = gps_contract_address(dev)
    for device_xy, target_xy, expected in (((0, 0), (0, 0), 0), ((3_000_000, 0), (0, 4_000_000), 25 * 10 ** 12)):
        from ctxchain.model import pre_ct_hash

        tx = Transaction.create(dev.keypair, gps_call_code(contract, device_xy, target_xy), OpCode.APPEND, 1,
                                pre_ct_hash(engine.chain.blocks[1]))
        event = engine.apply(tx)
        assert event.kind is EventKind.TRANSACTION_APPENDED
        assert int.from_bytes(event.return_data, "big") == expected


def test_contract_call_lane_shape():
    spec = WorkloadSpec(Scenario.C, 2, 5)
    dev = DeviceSim.from_seed(2)
    steps = gen_contract_calls(spec, dev, None, gps_contract_address(dev), create=True)
    assert steps[0].kind == "c-block" and steps[0].tx.data == deploy_code(GPS_DISTANCE_CODE)
    assert [s.kind for s in steps[1:]] == ["call"] * 5
    assert all(s.target == ("lane", 0) for s in steps[1:])


@pytest.mark.parametrize("scenario", list(Scenario))
def test_every_schedule_yields_a_valid_chain(scenario):
    spec = WorkloadSpec.for_scenario(scenario, 0.03, contexts=3)
    lanes = build_lanes(spec, 3, seed=4)
    engine = Engine()
    events = run_on_engine(engine, [lane.steps for lane in lanes])
    assert all(e.kind is not EventKind.TRANSACTION_REJECTED for e in events)
    assert validate_chain(engine.chain, replayer()).ok
    calls = sum(1 for lane in lanes for s in lane.steps if s.kind == "call")
    assert calls == spec.total_calls


def test_parallel_lanes_use_distinct_contexts():
    spec = WorkloadSpec.for_scenario("C", 0.02, contexts=4)
    lanes = build_lanes(spec, 4, seed=2)
    assert [lane.gateway for lane in lanes] == [0, 1, 2, 3]
    _, cluster = run_network(4, NetConfig(seed=2), lanes)
    created = [dev.created[2] for dev in cluster.devices]
    assert len(set(created)) == len(created)
    assert all(cluster.gateways[0].chain.blocks[i].owner is None for i in created)
