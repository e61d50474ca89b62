"""Two sensors keep pure-data logs while a third device runs a GPS contract.

Run with ``python demos/sensor_ledger.py``.
"""
from ctxchain import Engine, OpCode, Transaction, keygen, validate_chain
from ctxchain.contracts import GPS_DISTANCE_CODE, deploy_code, gps_call_code
from ctxchain.engine import replayer
from ctxchain.model import pre_ct_hash
from ctxchain.vm import contract_address

thermo, humid, tracker = (keygen(name.encode().ljust(32, b".")) for name in ("thermo", "humid", "tracker"))
engine = Engine()


def show(event):
    where = f"block {event.block_index}" if event.block_index is not None else "-"
    print(f"{event.kind.value:<22} {where:<8} {event.detail}")
    return event


def append(keys, data, index):
    block = engine.chain.blocks[index]
    return show(engine.apply(Transaction.create(keys, data, OpCode.APPEND, index, pre_ct_hash(block))))


# each sensor owns one pure-data block; only its key may append
show(engine.apply(Transaction.create(thermo, b"thermometer online", OpCode.NEW_PURE_DATA_BLOCK)))
show(engine.apply(Transaction.create(humid, b"hygrometer online", OpCode.NEW_PURE_DATA_BLOCK)))
for reading in (b"21.5C", b"21.7C"):
    append(thermo, reading, 1)
append(humid, b"48%", 2)
append(humid, b"not my block", 1)          # refused: the hygrometer does not own block 1

# the tracker opens a context block that deploys the distance contract
show(engine.apply(Transaction.create(tracker, deploy_code(GPS_DISTANCE_CODE), OpCode.NEW_CONTEXT_BLOCK)))
gps = contract_address(tracker.address, 0)
event = append(tracker, gps_call_code(gps, (3_000_000, 0), (0, 4_000_000)), 3)
print("squared distance (micro-degrees^2):", int.from_bytes(event.return_data, "big"))
print("state root of block 3:", event.state_root.hex()[:16], "...")

# a second creation by the same sensor is refused: one block per owner key
show(engine.apply(Transaction.create(thermo, b"again", OpCode.NEW_PURE_DATA_BLOCK)))

report = validate_chain(engine.chain, replayer())
print(f"{len(engine.chain)} blocks, valid: {report.ok}")
