"""Acceptance criteria 1-8, one test per criterion.

Every test records a ``CRITERION n: PASS|FAIL`` line.  The lines are printed
as each test finishes and again in pytest's terminal summary (see
conftest.py).  Run this file alone with ``pytest tests/test_acceptance.py``
or ``python tests/test_acceptance.py``.
"""
import functools
import json
import random
import subprocess
import sys
import time
from contextlib import contextmanager

import pytest

from oracle import FUZZ_GAS, KEYS, random_workload, run_differential, sample_engine, snapshot
from programs import random_programs
from ctxchain.adapter import LoopbackChannel, execute_external, handle_request
from ctxchain.bench import BenchConfig, run_repetition, run_scenario
from ctxchain.contracts import CELL_CODE, cell_call_code, deploy_code
from ctxchain.engine import Engine, EventKind, Reason, replayer, tx_digest
from ctxchain.gateway import Cluster, DivergenceError, NetConfig, run_network
from ctxchain.model import DecodeError, OpCode, Transaction, decode_chain, encode_chain, pre_ct_hash, validate_chain
from ctxchain.state import StateStore
from ctxchain.vm import VmError, VmErrorKind, assemble, contract_address, execute
from ctxchain.workload import Scenario, WorkloadSpec, build_lanes

RESULTS: list[str] = []
ALICE = b"\xa1" * 20


@contextmanager
def criterion(number, title):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        line = f"CRITERION {number}: FAIL  {title}  ({type(exc).__name__}: {str(exc).splitlines()[0][:120] if str(exc) else ''})"
        RESULTS.append(line)
        print(line)
        raise
    line = f"CRITERION {number}: PASS  {title}  [{time.perf_counter() - start:.1f} s]"
    RESULTS.append(line)
    print(line)


def outcome(run, store, root, code):
    try:
        r = run(store, root, code, ALICE, FUZZ_GAS)
        return ("ok", r.new_root, r.return_data, r.gas_used)
    except VmError as exc:
        return ("err", exc.kind)


def call(engine, keys, code, index):
    return Transaction.create(keys, code, OpCode.APPEND, index, pre_ct_hash(engine.chain.blocks[index]))


def test_criterion_1_parallel_speedup():
    with criterion(1, "T6(C')/T6(A') <= 0.5 at scale 0.3 with 10 gateways"):
        a = run_scenario(BenchConfig(scenario="A", scale=0.3, gateways=10), write=False).report
        c = run_scenario(BenchConfig(scenario="C", scale=0.3, gateways=10), write=False).report
        ratio = c.means["T6"] / a.means["T6"]
        print(f"T6(A') = {a.means['T6']:.4f} s, T6(C') = {c.means['T6']:.4f} s, ratio {ratio:.3f} (reference 0.11)")
        assert ratio <= 0.5, f"ratio {ratio:.3f}"


def test_criterion_2_oracle_equivalence():
    with criterion(2, "1000 fuzz workloads match the set interpreter in under 60 s"):
        start = time.perf_counter()
        mismatches = []
        for seed in range(1_000):
            engine, oracle, _ = run_differential(seed)
            if encode_chain(engine.chain) != encode_chain(oracle.ordered()):
                mismatches.append(seed)
        elapsed = time.perf_counter() - start
        assert not mismatches, f"mismatching seeds {mismatches[:10]}"
        assert elapsed < 60, f"took {elapsed:.1f} s"


def test_criterion_3_chain_validity():
    with criterion(3, "valid after every scenario run and fuzz workload; 10^4 bit flips caught"):
        replay = replayer(gas_limit=FUZZ_GAS)
        for scenario in Scenario:
            config = BenchConfig(scenario=scenario, scale=0.1, gateways=10, reps=2)
            _sample, _trace, cluster = run_repetition(config, 1)
            for gw in cluster.live():
                assert validate_chain(gw.chain, replayer()).ok, f"scenario {scenario.value} gateway {gw.id}"
        for seed in range(200):
            engine = Engine(gas_limit=FUZZ_GAS)
            for tx in random_workload(seed):
                engine.apply(tx)
            assert validate_chain(engine.chain, replay).ok, f"fuzz seed {seed}"

        raw = encode_chain(sample_engine().chain)
        missed, undecodable = [], 0
        for bit in random.Random(0).sample(range(len(raw) * 8), 10_000):
            mutated = bytearray(raw)
            mutated[bit // 8] ^= 1 << (bit % 8)
            try:
                candidate = decode_chain(bytes(mutated))
            except DecodeError:
                undecodable += 1
                continue
            if validate_chain(candidate, replay).ok:
                missed.append(bit)
        print(f"10000 flips: {undecodable} rejected by the decoder, the rest by validate_chain")
        assert not missed, f"undetected flips at bits {missed[:10]}"


def test_criterion_4_vm_determinism_and_replication():
    with criterion(4, "100 programs x 100 repeats; identical roots on 10 gateways; no divergence over 20 seeds"):
        programs = random_programs(2, 100)
        for code in programs:
            seen = set()
            for _ in range(100):
                store = StateStore()
                base = execute(store, None, deploy_code(CELL_CODE), b"\xb0" * 20).new_root
                seen.add(outcome(execute, store, base, code))
            assert len(seen) == 1

        for seed in range(20):
            config = BenchConfig(scenario="C", scale=0.3, gateways=10, seed=seed)
            try:
                _sample, _trace, cluster = run_repetition(config, 1)
                cluster.check_replication()
            except DivergenceError as exc:
                pytest.fail(f"seed {seed}: {exc}")
            if seed == 0:
                gateways = cluster.live()
                assert len(gateways) == 10
                contexts = [b.index for b in gateways[0].chain.blocks[1:] if b.owner is None]
                assert len(contexts) == 10
                for index in contexts:
                    roots = {g.chain.blocks[index].ledger[-1].state_root for g in gateways}
                    assert len(roots) == 1
                    root = roots.pop()
                    for code in programs:
                        results = {outcome(execute, g.store, root, code) for g in gateways}
                        assert len(results) == 1, f"context {index} diverges"


def test_criterion_5_consensus_fault_tolerance():
    with criterion(5, "n=4 with one crash over 20 seeds; duplicate owner refused everywhere"):
        for seed in range(20):
            rng = random.Random(seed)
            spec = WorkloadSpec(Scenario.D, 4, 4, 1, 3)
            cfg = NetConfig(seed=seed, latency_ns=(500_000, 1_500_000))
            healthy, _ = run_network(4, cfg, build_lanes(spec, 4, seed))
            crash = (rng.randrange(4), rng.randrange(0, healthy.sim_end_ns))
            trace, cluster = run_network(4, cfg, build_lanes(spec, 4, seed), crash=crash)
            assert all(d.done for d in cluster.devices), f"seed {seed}: a device never finished"
            assert all(r.ok for d in cluster.devices for r in d.results), f"seed {seed}: valid tx not decided"
            assert len(trace.chains) == 3 and len(set(trace.chains.values())) == 1, f"seed {seed}"

        cluster = Cluster(4)
        assert cluster.perform_consensus(Transaction.create(KEYS[0], b"first", OpCode.NEW_PURE_DATA_BLOCK))
        dup = Transaction.create(KEYS[0], b"second", OpCode.NEW_PURE_DATA_BLOCK)
        assert cluster.perform_consensus(dup) is False
        for g in cluster.gateways:
            _seq, (ok, reason), _event = g.results[tx_digest(dup)]
            assert ok is False and reason == "DuplicateOwner"


def _tampered(mutate):
    return LoopbackChannel(lambda line: mutate(json.loads(handle_request(line))))


MALFORMED = {
    "not json": lambda body: b"{this is not json",
    "wrong id": lambda body: json.dumps({**body, "id": body["id"] + 1}).encode(),
    "missing field": lambda body: json.dumps({k: v for k, v in body.items() if k != "new_root"}).encode(),
}

PREFIX = "PUSH1 1; PUSH1 1; SSTORE; "
FAILING = {
    VmErrorKind.INVALID_BYTECODE: PREFIX + "PUSH1 200; JUMP",
    VmErrorKind.OUT_OF_GAS: PREFIX + "top: PUSH1 @top; JUMP",
    VmErrorKind.STACK_VIOLATION: PREFIX + "ADD",
    VmErrorKind.CROSS_CONTEXT_CALL: PREFIX + "PUSH1 0; PUSH1 77; CALL",
    VmErrorKind.EXPLICIT_REVERT: PREFIX + "REVERT",
}


def _context_engine(vm=None):
    engine = Engine(gas_limit=FUZZ_GAS)
    engine.apply(Transaction.create(KEYS[0], deploy_code(CELL_CODE), OpCode.NEW_CONTEXT_BLOCK))
    engine.apply(call(engine, KEYS[1], cell_call_code(contract_address(KEYS[0].address, 0), 1, 5, 5), 1))
    if vm is not None:
        engine.vm = vm
    return engine


def test_criterion_6_error_path_atomicity():
    with criterion(6, "every VmError kind leaves chain and state nodes bitwise unchanged"):
        assert set(FAILING) | {VmErrorKind.ADAPTER_FAILURE} == set(VmErrorKind)
        for kind, source in FAILING.items():
            engine = _context_engine()
            before = snapshot(engine)
            event = engine.apply(call(engine, KEYS[2], assemble(source), 1))
            assert event.reason is Reason.VM_ERROR and kind.value in event.detail, (kind, event.detail)
            assert snapshot(engine) == before, kind
        engine = _context_engine(functools.partial(execute_external, _tampered(MALFORMED["wrong id"])))
        before = snapshot(engine)
        event = engine.apply(call(engine, KEYS[2], cell_call_code(contract_address(KEYS[0].address, 0), 1, 9, 9), 1))
        assert event.reason is Reason.VM_ERROR and VmErrorKind.ADAPTER_FAILURE.value in event.detail
        assert snapshot(engine) == before


def test_criterion_7_adapter_conformance():
    with criterion(7, "loopback adapter matches the VM on 100 programs; 3 malformed replies discarded"):
        channel = LoopbackChannel()
        remote = functools.partial(execute_external, channel)
        for code in random_programs(4, 100):
            local, remote_store = StateStore(), StateStore()
            root = execute(local, None, deploy_code(CELL_CODE), b"\xb0" * 20).new_root
            execute(remote_store, None, deploy_code(CELL_CODE), b"\xb0" * 20)
            assert outcome(remote, remote_store, root, code) == outcome(execute, local, root, code)

        for name, mutate in MALFORMED.items():
            engine = _context_engine(functools.partial(execute_external, _tampered(mutate)))
            before = snapshot(engine)
            tx = call(engine, KEYS[3], cell_call_code(contract_address(KEYS[0].address, 0), 2, 4, 4), 1)
            event = engine.apply(tx)
            assert event.kind is EventKind.TRANSACTION_REJECTED, name
            assert VmErrorKind.ADAPTER_FAILURE.value in event.detail, name
            assert snapshot(engine) == before, name


def _sim_columns(path):
    return [line for line in path.read_text().splitlines() if not line.endswith(",wall")]


def test_criterion_8_harness_determinism(tmp_path):
    with criterion(8, "two `bench run --scenario C --seed 7` runs give identical simulated CSV columns"):
        outputs = []
        for name in ("first", "second"):
            out = tmp_path / name
            subprocess.run([sys.executable, "-m", "ctxchain.bench", "run", "--scenario", "C", "--seed", "7",
                            "--out", str(out)], check=True, capture_output=True)
            outputs.append(_sim_columns(out / "scenario_C.csv"))
        assert outputs[0] == outputs[1]
        assert sum(line.endswith(",sim") for line in outputs[0]) == 3 * 6


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
