"""Seeded device workloads: GPS-distance contract calls and plain data load.

Schedules are lists of ``Step`` lanes.  Appends are generated with a
placeholder destination and ``pt``; the submitting device resolves both
against its gateway just before sending and re-signs.
"""
from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .contracts import GPS_DISTANCE_CODE, deploy_code, gps_call_code
from .crypto import KeyPair, address_of, digest, keygen
from .engine import Engine, EngineEvent, EventKind, Reason
from .gateway import LaneSpec, Step
from .model import OpCode, Transaction, get_block, pre_ct_hash
from .vm import contract_address

PAYLOAD_SIZE = 128
PARALLEL_CONTEXTS = 10
FULL_CALLS = 1000
FULL_LOAD_DEVICES = 50
FULL_LOAD_TX = 100

# Around Florianopolis, in degrees x 10**6.
BASE_POSITION = (-27_595_000, -48_548_000)
WALK_STEP = 150


class Scenario(str, enum.Enum):
    A = "A"   # one context, sequential calls, no extra load
    B = "B"   # one context, with load on every gateway
    C = "C"   # parallel contexts, no extra load
    D = "D"   # parallel contexts, with load

    @property
    def parallel(self) -> bool:
        return self in (Scenario.C, Scenario.D)

    @property
    def loaded(self) -> bool:
        return self in (Scenario.B, Scenario.D)


@dataclass
class WorkloadSpec:
    scenario: Scenario
    contexts: int
    calls_per_context: int
    load_devices: int = 0
    load_tx_per_device: int = 0
    payload_size: int = PAYLOAD_SIZE

    def __post_init__(self):
        self.scenario = Scenario(self.scenario)
        if not self.scenario.parallel and self.contexts != 1:
            raise ValueError(f"scenario {self.scenario.value} runs exactly one context")
        if self.contexts < 1 or self.calls_per_context < 0 or self.load_devices < 0 or self.load_tx_per_device < 0:
            raise ValueError("workload sizes must be non-negative (and at least one context)")

    @classmethod
    def for_scenario(cls, scenario, scale: float = 1.0, contexts: int = PARALLEL_CONTEXTS) -> "WorkloadSpec":
        """The testbed shapes at ``scale``: 1,000 calls in total, 50 x 100 load per gateway."""
        scenario = Scenario(scenario)
        if scale <= 0:
            raise ValueError("scale must be positive")
        total_calls = max(1, round(FULL_CALLS * scale))
        n_ctx = contexts if scenario.parallel else 1
        load_devices = round(FULL_LOAD_DEVICES * scale) if scenario.loaded else 0
        load_tx = round(FULL_LOAD_TX * scale) if scenario.loaded else 0
        return cls(scenario, n_ctx, max(1, total_calls // n_ctx), load_devices, load_tx)

    @property
    def total_calls(self) -> int:
        return self.contexts * self.calls_per_context


@dataclass
class DeviceSim:
    keypair: KeyPair
    rng_seed: int
    home_block: Optional[int] = None
    position: tuple[int, int] = BASE_POSITION
    rng: random.Random = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = random.Random(self.rng_seed)

    @classmethod
    def from_seed(cls, seed: int, position: tuple[int, int] = BASE_POSITION) -> "DeviceSim":
        return cls(keygen(digest(b"device" + seed.to_bytes(8, "big"))), seed, position=position)

    @property
    def address(self) -> bytes:
        return address_of(self.keypair.public)

    def walk(self) -> tuple[int, int]:
        x, y = self.position
        self.position = (x + self.rng.randint(-WALK_STEP, WALK_STEP), y + self.rng.randint(-WALK_STEP, WALK_STEP))
        return self.position

    def payload(self, size: int = PAYLOAD_SIZE) -> bytes:
        return self.rng.randbytes(size)

    # transaction builders ---------------------------------------------------

    def register(self) -> Step:
        tx = Transaction.create(self.keypair, b"register:" + self.address, OpCode.NEW_PURE_DATA_BLOCK)
        return Step(tx, "pd-block", None, self.keypair)

    def create_context(self, runtime: bytes = GPS_DISTANCE_CODE) -> Step:
        tx = Transaction.create(self.keypair, deploy_code(runtime), OpCode.NEW_CONTEXT_BLOCK)
        return Step(tx, "c-block", None, self.keypair)

    def append(self, data: bytes, target, kind: str) -> Step:
        tx = Transaction.create(self.keypair, data, OpCode.APPEND, 0)
        return Step(tx, kind, target, self.keypair)

    def gps_fix(self, target) -> Step:
        x, y = self.walk()
        data = b"fix:" + x.to_bytes(8, "big", signed=True) + y.to_bytes(8, "big", signed=True)
        return self.append(data, target, "normal")


def gps_contract_address(deployer: DeviceSim) -> bytes:
    """Address of the first contract deployed by ``deployer`` in a fresh context."""
    return contract_address(deployer.address, 0)


def gen_contract_calls(spec: WorkloadSpec, device: DeviceSim, target, contract: bytes,
                       calls: Optional[int] = None, destination: tuple[int, int] = BASE_POSITION,
                       create: bool = False) -> list[Step]:
    """``calls`` GPS-distance calls from ``device`` to the context at ``target``.

    With ``create`` the lane starts with the context-creation transaction and
    ``target`` may be left as None; the calls then point at that step.
    """
    steps = []
    if create:
        steps.append(device.create_context())
        target = ("lane", 0)
    for _ in range(spec.calls_per_context if calls is None else calls):
        data = gps_call_code(contract, device.walk(), destination)
        steps.append(device.append(data, target, "call"))
    return steps


def gen_normal_load(spec: WorkloadSpec, devices: Sequence[DeviceSim]) -> list[list[Step]]:
    """One lane per device: register a data block, then ``load_tx_per_device`` appends."""
    lanes = []
    for dev in devices:
        lane = [dev.register()]
        lane += [dev.append(dev.payload(spec.payload_size), ("lane", 0), "normal")
                 for _ in range(spec.load_tx_per_device)]
        lanes.append(lane)
    return lanes


def _device_seed(seed: int, *parts: int) -> int:
    return int.from_bytes(digest(b"".join(p.to_bytes(8, "big") for p in (seed, *parts)))[:8], "big")


def build_lanes(spec: WorkloadSpec, gateways: int, seed: int = 0) -> list[LaneSpec]:
    """All device lanes for one run of ``spec`` on a ``gateways``-node network.

    Sequential scenarios put ten devices on gateway 0: device 0 registers,
    deploys the context and issues every call (signed round-robin by the ten
    devices); the rest register and report one fix each.  Parallel scenarios
    give context k its own device on gateway k.  Load lanes are added per
    gateway.
    """
    lanes: list[LaneSpec] = []
    destination = (BASE_POSITION[0] + 4000, BASE_POSITION[1] + 3000)
    if spec.scenario.parallel:
        for k in range(spec.contexts):
            dev = DeviceSim.from_seed(_device_seed(seed, 1, k))
            steps = [dev.register(), dev.gps_fix(("lane", 0)), dev.create_context()]
            contract = gps_contract_address(dev)
            for _ in range(spec.calls_per_context):
                steps.append(dev.append(gps_call_code(contract, dev.walk(), destination), ("lane", 2), "call"))
            lanes.append(LaneSpec(steps, k % gateways))
    else:
        devices = [DeviceSim.from_seed(_device_seed(seed, 1, k)) for k in range(PARALLEL_CONTEXTS)]
        lead = devices[0]
        steps = [lead.register(), lead.gps_fix(("lane", 0)), lead.create_context()]
        contract = gps_contract_address(lead)
        for i in range(spec.total_calls):
            dev = devices[i % len(devices)]
            steps.append(dev.append(gps_call_code(contract, dev.walk(), destination), ("lane", 2), "call"))
        lanes.append(LaneSpec(steps, 0))
        for dev in devices[1:]:
            lanes.append(LaneSpec([dev.register(), dev.gps_fix(("lane", 0))], 0))
    for g in range(gateways):
        devs = [DeviceSim.from_seed(_device_seed(seed, 2, g, j)) for j in range(spec.load_devices)]
        for lane in gen_normal_load(spec, devs):
            lanes.append(LaneSpec(lane, g))
    return lanes


def run_on_engine(engine: Engine, lanes: Sequence[Sequence[Step]]) -> list[EngineEvent]:
    """Feed lanes to one engine round-robin, resolving placeholders as a device would."""
    events = []
    cursors = [0] * len(lanes)
    created: list[dict] = [{} for _ in lanes]
    active = True
    while active:
        active = False
        for li, lane in enumerate(lanes):
            if cursors[li] >= len(lane):
                continue
            active = True
            step = lane[cursors[li]]
            cursors[li] += 1
            tx = step.tx
            if tx.opcode is OpCode.APPEND:
                target = created[li].get(step.target[1]) if isinstance(step.target, tuple) else step.target
                if target is None:
                    continue
                pt = pre_ct_hash(get_block(engine.chain, target))
                tx = Transaction.create(step.signer, tx.data, OpCode.APPEND, target, pt)
            event = engine.apply(tx)
            events.append(event)
            if event.kind is EventKind.BLOCK_ADDED:
                created[li][cursors[li] - 1] = event.block_index
            elif event.kind is EventKind.TRANSACTION_REJECTED and event.reason is Reason.STALE_PT:
                cursors[li] -= 1
    return events
