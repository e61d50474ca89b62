import random

import pytest

from oracle import (
    FUZZ_GAS,
    KEYS,
    AppendableOracle,
    appendable_workload,
    run_differential,
    snapshot,
)
from ctxchain.contracts import CELL_CODE, cell_call_code, deploy_code
from ctxchain.engine import (
    Engine,
    EventKind,
    Mempool,
    Reason,
    Rejection,
    append_t,
    commit_to_pd,
    new_c_block,
    new_pd_block,
    replayer,
)
from ctxchain.model import (
    BlockNotFound,
    OpCode,
    Transaction,
    encode_chain,
    last_ct,
    new_chain,
    pre_ct_hash,
    validate_chain,
)
from ctxchain.state import StateStore
from ctxchain.vm import VmError, assemble, contract_address, execute

A, B, C, D = KEYS[:4]


def pd(keys, data=b"hello"):
    return Transaction.create(keys, data, OpCode.NEW_PURE_DATA_BLOCK)


def ctx(keys, data):
    return Transaction.create(keys, data, OpCode.NEW_CONTEXT_BLOCK)


def append(engine, keys, index, data, pt=None):
    block = engine.chain.blocks[index]
    return Transaction.create(keys, data, OpCode.APPEND, index, pre_ct_hash(block) if pt is None else pt)


def cell_of(keys):
    return contract_address(keys.address, 0)


# -- block creation -------------------------------------------------------------

def test_fresh_signer_gets_pure_data_block():
    chain = new_pd_block(new_chain(), pd(A))
    assert len(chain) == 2
    assert chain.blocks[1].owner == A.public
    assert chain.blocks[1].header.first_ct.state_root is None


def test_second_creation_by_same_signer_rejected():
    chain = new_pd_block(new_chain(), pd(A))
    with pytest.raises(Rejection) as info:
        new_pd_block(chain, pd(A, b"again"))
    assert info.value.reason is Reason.DUPLICATE_OWNER
    engine = Engine(chain=chain)
    event = engine.apply(pd(A, b"again"))
    assert event.kind is EventKind.TRANSACTION_REJECTED and engine.chain == chain


def test_two_signers_two_blocks():
    chain = new_pd_block(new_pd_block(new_chain(), pd(A)), pd(B))
    assert [b.index for b in chain.blocks] == [0, 1, 2]
    assert chain.blocks[1].owner != chain.blocks[2].owner
    assert validate_chain(chain).ok


def test_context_block_root_matches_direct_execution():
    store = StateStore()
    chain = new_c_block(new_chain(), ctx(A, deploy_code(CELL_CODE)), store)
    direct = execute(StateStore(), None, deploy_code(CELL_CODE), A.address).new_root
    assert chain.blocks[1].header.first_ct.state_root == direct
    assert chain.blocks[1].owner is None
    assert store.get_account(direct, cell_of(A)).code == CELL_CODE


def test_empty_context_block_has_empty_root():
    store = StateStore()
    chain = new_c_block(new_chain(), ctx(A, b""), store)
    assert chain.blocks[1].header.first_ct.state_root == store.empty_root()


def test_invalid_context_bytecode_leaves_chain_unchanged():
    store = StateStore()
    with pytest.raises(VmError):
        new_c_block(new_chain(), ctx(A, b"\xff"), store)
    engine = Engine()
    before = snapshot(engine)
    event = engine.apply(ctx(A, b"\xff"))
    assert event.reason is Reason.VM_ERROR
    assert snapshot(engine) == before


# -- commitment -----------------------------------------------------------------

def context_engine():
    engine = Engine()
    engine.apply(pd(D))
    engine.apply(ctx(A, deploy_code(CELL_CODE)))
    return engine


def test_valid_call_advances_state():
    engine = context_engine()
    block = engine.chain.blocks[2]
    old_root = last_ct(block).state_root
    data = cell_call_code(cell_of(A), 1, 42, 3)
    event = engine.apply(append(engine, B, 2, data))
    assert event.kind is EventKind.TRANSACTION_APPENDED
    new_block = engine.chain.blocks[2]
    assert len(new_block.ledger) == 1
    assert new_block.ledger[0].state_root == execute(engine.store, old_root, data, B.address).new_root
    assert new_block.ledger[0].state_root != old_root


def test_stale_pt_rejected():
    engine = context_engine()
    first = append(engine, B, 2, cell_call_code(cell_of(A), 1, 1, 1))
    engine.apply(first)
    stale = append(engine, B, 2, cell_call_code(cell_of(A), 1, 2, 1), pt=first.pt)
    before = snapshot(engine)
    event = engine.apply(stale)
    assert event.reason is Reason.STALE_PT
    assert snapshot(engine) == before


def test_reverting_call_rejected():
    engine = context_engine()
    before = snapshot(engine)
    event = engine.apply(append(engine, B, 2, assemble("PUSH1 1; PUSH1 1; SSTORE; REVERT")))
    assert event.reason is Reason.VM_ERROR and "ExplicitRevert" in event.detail
    assert snapshot(engine) == before


def test_pure_data_owner_and_stranger():
    engine = context_engine()
    event = engine.apply(append(engine, D, 1, b"reading"))
    assert event.kind is EventKind.TRANSACTION_APPENDED
    assert engine.chain.blocks[1].ledger[-1].state_root is None
    before = snapshot(engine)
    assert engine.apply(append(engine, B, 1, b"intruder")).reason is Reason.NOT_OWNER
    assert engine.apply(append(engine, D, 1, b"late", pt=b"\x01" * 32)).reason is Reason.STALE_PT
    assert snapshot(engine) == before
    with pytest.raises(Rejection) as info:
        commit_to_pd(engine.chain.blocks[1], append(engine, B, 1, b"x"))
    assert info.value.reason is Reason.NOT_OWNER


def test_append_is_local_to_its_block():
    engine = context_engine()
    engine.apply(ctx(B, deploy_code(CELL_CODE)))
    others = [engine.chain.blocks[i] for i in (0, 1, 2)]
    engine.apply(append(engine, C, 3, cell_call_code(cell_of(B), 1, 9, 9)))
    assert [engine.chain.blocks[i] for i in (0, 1, 2)] == others
    assert len(engine.chain.blocks[3].ledger) == 1


def test_append_beyond_chain_and_to_genesis():
    engine = context_engine()
    tx = Transaction.create(B, b"x", OpCode.APPEND, 9, b"\x00" * 32)
    with pytest.raises(BlockNotFound):
        append_t(engine.chain, tx, engine.store)
    assert engine.apply(tx).reason is Reason.NO_SUCH_BLOCK
    genesis = Transaction.create(B, b"x", OpCode.APPEND, 0, pre_ct_hash(engine.chain.blocks[0]))
    assert engine.apply(genesis).reason is Reason.GENESIS_TARGET


# -- the main loop --------------------------------------------------------------

def test_step_dispatch():
    engine = Engine()
    seen = []
    engine.subscribe(seen.append)
    engine.submit(ctx(A, deploy_code(CELL_CODE)))
    engine.submit(pd(B))
    engine.submit(pd(B, b"second"))
    events = engine.run()
    assert [e.kind for e in events] == [EventKind.BLOCK_ADDED, EventKind.BLOCK_ADDED, EventKind.TRANSACTION_REJECTED]
    assert events[2].reason is Reason.GUARD
    engine.submit(append(engine, C, 1, cell_call_code(cell_of(A), 1, 5, 5)))
    assert engine.step().kind is EventKind.TRANSACTION_APPENDED
    assert seen == events + [seen[-1]]
    assert {"consensus", "total"} <= set(seen[-1].timings)


def test_consensus_refusal():
    engine = Engine(consensus=lambda tx: False)
    engine.submit(pd(A))
    event = engine.step()
    assert event.reason is Reason.CONSENSUS and len(engine.chain) == 1


def test_mempool_fifo_and_duplicates():
    pool = Mempool()
    txs = [pd(k) for k in KEYS]
    for tx in txs:
        assert pool.submit(tx)
    assert not pool.submit(txs[0])
    assert [pool.poll() for _ in range(len(txs))] == txs
    assert len(pool) == 0


def test_accept_replays_and_detects_divergence():
    source = context_engine()
    source.apply(append(source, B, 2, cell_call_code(cell_of(A), 1, 7, 7)))
    replica = Engine()
    for block in source.chain.blocks[1:]:
        assert replica.accept(type(block)(block.header)) is False
    assert replica.accept((2, source.chain.blocks[2].ledger[0])) is False
    assert encode_chain(replica.chain) == encode_chain(source.chain)
    assert replica.accept((2, source.chain.blocks[2].ledger[0])) is True
    assert replica.accept(source.chain.blocks[1]) is True

    forged = source.chain.blocks[2].ledger[0]
    forged = type(forged)(forged.data, forged.sig, forged.pt, b"\x13" * 32)
    fresh = Engine()
    fresh.accept(type(source.chain.blocks[1])(source.chain.blocks[1].header))
    fresh.accept(type(source.chain.blocks[2])(source.chain.blocks[2].header))
    with pytest.raises(Rejection) as info:
        fresh.accept((2, forged))
    assert info.value.reason is Reason.DIVERGED


# -- oracles --------------------------------------------------------------------

@pytest.mark.parametrize("chunk", range(4))
def test_engine_matches_set_oracle(chunk):
    replay = replayer(gas_limit=FUZZ_GAS)
    for seed in range(chunk * 50, chunk * 50 + 50):
        engine, oracle, _ = run_differential(seed, check_every_step=True)
        assert encode_chain(engine.chain) == encode_chain(oracle.ordered()), f"seed {seed}"
        assert validate_chain(engine.chain, replay).ok, f"seed {seed}"


def test_oracle_catches_a_planted_bug(monkeypatch):
    import ctxchain.engine as engine_module

    # commit context calls against the creation state instead of the latest one
    monkeypatch.setattr(engine_module, "last_ct", lambda block: block.header.first_ct)
    mismatches = 0
    for seed in range(40):
        engine, oracle, _ = run_differential(seed)
        mismatches += encode_chain(engine.chain) != encode_chain(oracle.ordered())
    assert mismatches > 0


def test_restricted_to_pure_data_matches_appendable_oracle():
    for seed in range(100):
        engine = Engine()
        oracle = AppendableOracle()
        for tx in appendable_workload(seed):
            engine.apply(tx)
            oracle.step(tx)
        assert encode_chain(engine.chain) == encode_chain(oracle.inner.ordered()), f"seed {seed}"


def test_validity_after_every_step():
    replay = replayer(gas_limit=FUZZ_GAS)
    from oracle import random_workload

    for seed in range(10):
        engine = Engine(gas_limit=FUZZ_GAS)
        for tx in random_workload(seed, max_tx=40):
            engine.apply(tx)
            assert validate_chain(engine.chain, replay).ok


# -- context parallelism --------------------------------------------------------

def parallel_setup():
    engine = Engine()
    for keys in (A, B, C):
        engine.apply(ctx(keys, deploy_code(CELL_CODE)))
    engine.apply(pd(D))
    return engine


def per_block_schedules(rng: random.Random):
    """Transactions per destination, pts precomputed by running each block alone."""
    engine = parallel_setup()
    lanes = {}
    for index, owner in ((1, A), (2, B), (3, C), (4, D)):
        lane = []
        for k in range(6):
            if index == 4:
                tx = append(engine, D, 4, rng.randbytes(8))
            else:
                signer = rng.choice(KEYS)
                tx = append(engine, signer, index, cell_call_code(cell_of(owner), 1, rng.randrange(1000), k % 3))
            assert engine.apply(tx).kind is EventKind.TRANSACTION_APPENDED
            lane.append(tx)
        lanes[index] = lane
    return lanes, snapshot(engine)


def test_interleavings_of_distinct_blocks_commute():
    rng = random.Random(17)
    lanes, expected = per_block_schedules(rng)
    for _ in range(25):
        cursors = {k: 0 for k in lanes}
        order = []
        while any(cursors[k] < len(lanes[k]) for k in lanes):
            k = rng.choice([k for k in lanes if cursors[k] < len(lanes[k])])
            order.append(lanes[k][cursors[k]])
            cursors[k] += 1
        engine = parallel_setup()
        for tx in order:
            engine.apply(tx)
        assert snapshot(engine) == expected


def test_sharded_run_matches_sequential():
    lanes, expected = per_block_schedules(random.Random(23))
    engine = parallel_setup()
    for lane in lanes.values():
        for tx in lane:
            engine.submit(tx)
    events = engine.run_sharded(workers=4)
    assert all(e.kind is EventKind.TRANSACTION_APPENDED for e in events)
    assert snapshot(engine) == expected
