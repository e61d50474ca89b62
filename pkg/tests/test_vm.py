import pytest

from programs import random_programs
from ctxchain.contracts import CELL_CODE, GPS_DISTANCE_CODE, cell_call_code, deploy_code, gps_call_code
from ctxchain.state import StateStore
from ctxchain.vm import (
    ParseError,
    VmError,
    VmErrorKind,
    assemble,
    contract_address,
    decode,
    disassemble,
    execute,
)

ALICE = b"\xa1" * 20
BOB = b"\xb0" * 20


def snapshot(store: StateStore):
    return dict(store.all_nodes()), set(store.all_roots())


def test_empty_program_is_a_no_op():
    store = StateStore()
    result = execute(store, None, b"", ALICE, 100)
    assert result.new_root == store.empty_root()
    assert result.return_data == b""


def test_assembler_add_returns_five():
    code = assemble("PUSH1 2; PUSH1 3; ADD; RETURN1")
    assert code == bytes([0x01, 2, 0x01, 3, 0x10, 0x60])
    result = execute(StateStore(), None, code, ALICE)
    assert int.from_bytes(result.return_data, "big") == 5
    assert result.gas_used == 4


def test_assembler_edges():
    assert assemble("") == b""
    with pytest.raises(ParseError, match="FROB"):
        assemble("PUSH1 1\n  FROB 2")
    with pytest.raises(ParseError) as info:
        assemble("PUSH1 1\n  FROB 2")
    assert (info.value.line, info.value.column) == (2, 3)
    with pytest.raises(ParseError):
        assemble("PUSH1 256")
    with pytest.raises(ParseError):
        assemble("JUMP @nowhere")
    assert assemble("a: PUSH1 @a") == bytes([0x01, 0])


def test_disassemble_round_trip():
    for code in (CELL_CODE, GPS_DISTANCE_CODE, deploy_code(CELL_CODE)):
        assert assemble(disassemble(code)) == code


def test_decode_rejects_unknown_and_truncated():
    for bad in (b"\xff", b"\x02\x00", b"\x04\x00", b"\x04\x11"):
        with pytest.raises(VmError) as info:
            decode(bad)
        assert info.value.kind is VmErrorKind.INVALID_BYTECODE


def test_division_by_zero_pushes_zero():
    result = execute(StateStore(), None, assemble("PUSH1 0; PUSH1 9; DIV; RETURN1"), ALICE)
    assert result.return_data == bytes(32)


def test_arithmetic_wraps():
    result = execute(StateStore(), None, assemble("PUSH1 0; PUSH1 1; SUB; RETURN1"), ALICE)
    assert result.return_data == b"\xff" * 32


def test_deploy_then_getter_reads_storage():
    store = StateStore()
    deployed = execute(store, None, deploy_code(CELL_CODE), ALICE)
    cell = contract_address(ALICE, 0)
    assert deployed.return_data[-20:] == cell
    assert store.get_account(deployed.new_root, cell).code == CELL_CODE

    stored = execute(store, deployed.new_root, cell_call_code(cell, 1, 7, 1), BOB)
    # independent read straight from the trie
    record = store.account_record(stored.new_root, cell)
    assert store.storage_get(record[1], (1).to_bytes(32, "big")) == (7).to_bytes(32, "big")

    got = execute(store, stored.new_root, cell_call_code(cell, 0, 1), BOB)
    assert int.from_bytes(got.return_data, "big") == 7
    assert got.new_root == stored.new_root


def test_gps_distance_fixture():
    store = StateStore()
    root = execute(store, None, deploy_code(GPS_DISTANCE_CODE), ALICE).new_root
    gps = contract_address(ALICE, 0)
    zero = execute(store, root, gps_call_code(gps, (0, 0), (0, 0)), BOB)
    assert int.from_bytes(zero.return_data, "big") == 0
    far = execute(store, root, gps_call_code(gps, (3_000_000, 0), (0, 4_000_000)), BOB)
    assert int.from_bytes(far.return_data, "big") == 3_000_000 ** 2 + 4_000_000 ** 2 == 25 * 10 ** 12
    neg = execute(store, root, gps_call_code(gps, (-27_595_000, -48_548_000), (-27_596_000, -48_546_000)), BOB)
    assert int.from_bytes(neg.return_data, "big") == 1_000 ** 2 + 2_000 ** 2
    # the result is filed under the caller and the call counter advances
    record = store.account_record(far.new_root, gps)
    assert store.storage_get(record[1], bytes(12) + BOB) == (25 * 10 ** 12).to_bytes(32, "big")
    assert store.storage_get(record[1], (1).to_bytes(32, "big")) == (1).to_bytes(32, "big")


def test_infinite_loop_runs_out_of_gas_and_changes_nothing():
    store = StateStore()
    root = execute(store, None, deploy_code(CELL_CODE), ALICE).new_root
    before = snapshot(store)
    with pytest.raises(VmError) as info:
        execute(store, root, assemble("PUSH1 1; PUSH1 1; SSTORE; top: PUSH1 @top; JUMP"), ALICE, 10_000)
    assert info.value.kind is VmErrorKind.OUT_OF_GAS
    assert snapshot(store) == before


@pytest.mark.parametrize("source, kind", [
    ("PUSH1 1; PUSH1 1; SSTORE; PUSH1 9; JUMP", VmErrorKind.INVALID_BYTECODE),
    ("PUSH1 1; PUSH1 1; SSTORE; ADD", VmErrorKind.STACK_VIOLATION),
    ("PUSH1 1; PUSH1 1; SSTORE; PUSH1 0; PUSH1 77; CALL", VmErrorKind.CROSS_CONTEXT_CALL),
    ("PUSH1 1; PUSH1 1; SSTORE; REVERT", VmErrorKind.EXPLICIT_REVERT),
    ("PUSH1 1; PUSH1 1; SSTORE; top: PUSH1 @top; JUMP", VmErrorKind.OUT_OF_GAS),
])
def test_failures_are_atomic(source, kind):
    store = StateStore()
    root = execute(store, None, deploy_code(CELL_CODE), ALICE).new_root
    before = snapshot(store)
    with pytest.raises(VmError) as info:
        execute(store, root, assemble(source), ALICE, 500)
    assert info.value.kind is kind
    assert snapshot(store) == before


def test_stack_overflow_is_a_violation():
    with pytest.raises(VmError) as info:
        execute(StateStore(), None, assemble("top: PUSH1 1; PUSH1 @top; JUMP"), ALICE)
    assert info.value.kind is VmErrorKind.STACK_VIOLATION


def test_gas_never_exceeds_limit():
    for code in random_programs(9, 200):
        try:
            result = execute(StateStore(), None, code, ALICE, 300)
        except VmError:
            continue
        assert 0 <= result.gas_used <= 300


def test_caller_runs_as_its_own_account():
    store = StateStore()
    result = execute(store, None, assemble("PUSH1 9; CALLER; SSTORE"), ALICE)
    record = store.account_record(result.new_root, ALICE)
    assert store.storage_get(record[1], bytes(12) + ALICE) == (9).to_bytes(32, "big")


def test_counter_slot_tampering_cannot_crash_creation():
    store = StateStore()
    code = assemble("PUSH32 %d; PUSH1 0; SSTORE; CREATE 0x00" % ((1 << 256) - 1))
    result = execute(store, None, code, bytes(20))
    assert len(result.return_data) == 32


def test_determinism_over_random_programs():
    for code in random_programs(2, 100):
        outcomes = set()
        for _ in range(100):
            store = StateStore()
            base = execute(store, None, deploy_code(CELL_CODE), BOB).new_root
            try:
                r = execute(store, base, code, ALICE, 2_000)
                outcomes.add(("ok", r.new_root, r.return_data, r.gas_used))
            except VmError as exc:
                outcomes.add(("err", exc.kind, exc.detail))
        assert len(outcomes) == 1


def test_rejects_bad_arguments():
    with pytest.raises(ValueError):
        execute(StateStore(), None, b"", ALICE, 0)
    with pytest.raises(ValueError):
        execute(StateStore(), None, b"", b"short", 10)
