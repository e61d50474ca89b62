"""State transitions of the context-based appendable-block chain.

The pure functions here create blocks and commit transactions; ``Engine``
wraps them in the poll / consensus / apply loop.  Every "otherwise" branch of
a transition raises ``Rejection`` (VM failures during context-block creation
surface as ``VmError``), and a rejected transaction leaves the chain and the
state store exactly as they were.
"""
from __future__ import annotations

import enum
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

from .crypto import RecoveryFailure, address_of, digest
from .model import (
    Block,
    BlockHeader,
    Blockchain,
    BlockNotFound,
    CommittedTransaction,
    OpCode,
    Transaction,
    canonical_encode,
    ct_hash,
    get_block,
    header_hash,
    last_block,
    last_ct,
    new_chain,
    pre_ct_hash,
)
from .state import StateStore
from .vm import DEFAULT_GAS_LIMIT, ExecutionResult, VmError, execute

Executor = Callable[..., ExecutionResult]


class Reason(str, enum.Enum):
    STALE_PT = "StalePt"
    NOT_OWNER = "NotOwner"
    VM_ERROR = "VmError"
    DUPLICATE_OWNER = "DuplicateOwner"
    BAD_SIGNATURE = "BadSignature"
    NO_SUCH_BLOCK = "NoSuchBlock"
    GENESIS_TARGET = "GenesisTarget"
    GUARD = "GuardMiss"
    CONSENSUS = "ConsensusRefused"
    DUPLICATE = "Duplicate"
    DIVERGED = "Diverged"


class Rejection(Exception):
    def __init__(self, reason: Reason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail


def _signer(tx: Transaction) -> bytes:
    try:
        return tx.signer()
    except RecoveryFailure as exc:
        raise Rejection(Reason.BAD_SIGNATURE, str(exc)) from None


def _run(vm: Executor, store, state, tx: Transaction, signer: bytes, gas_limit: int) -> ExecutionResult:
    return vm(store, state, tx.data, address_of(signer), gas_limit)


# -- block creation -----------------------------------------------------------

def _pd_block(chain: Blockchain, tx: Transaction) -> Block:
    if tx.opcode is not OpCode.NEW_PURE_DATA_BLOCK or tx.to_block is not None:
        raise Rejection(Reason.GUARD, "not a pure-data block creation")
    signer = _signer(tx)
    if chain.owns_block(signer):
        raise Rejection(Reason.DUPLICATE_OWNER, f"signer already owns block {chain.owner_index[signer]}")
    tip = last_block(chain)
    header = BlockHeader(header_hash(tip.header), tip.index + 1, signer, tx.committed(None))
    return Block(header)


def new_pd_block(chain: Blockchain, tx: Transaction) -> Blockchain:
    """Append a pure-data block owned by the signer (one block per key)."""
    return chain.with_block(_pd_block(chain, tx))


def _c_block(chain, tx, store, vm, gas_limit) -> tuple[Block, ExecutionResult]:
    if tx.opcode is not OpCode.NEW_CONTEXT_BLOCK or tx.to_block is not None:
        raise Rejection(Reason.GUARD, "not a context block creation")
    signer = _signer(tx)
    result = _run(vm, store, None, tx, signer, gas_limit)
    tip = last_block(chain)
    header = BlockHeader(header_hash(tip.header), tip.index + 1, None, tx.committed(result.new_root))
    return Block(header), result


def new_c_block(chain: Blockchain, tx: Transaction, store: StateStore, vm: Executor = execute,
                gas_limit: int = DEFAULT_GAS_LIMIT) -> Blockchain:
    """Append a context block whose state starts from running ``tx.data`` on the empty state."""
    block, _ = _c_block(chain, tx, store, vm, gas_limit)
    return chain.with_block(block)


# -- commitment ---------------------------------------------------------------

def _context_commit(block, tx, store, vm, gas_limit) -> tuple[Block, ExecutionResult]:
    if block.owner is not None or block.index == 0:
        raise Rejection(Reason.GUARD, "block has no context")
    if tx.pt != pre_ct_hash(block):
        raise Rejection(Reason.STALE_PT, f"pt does not match block {block.index}")
    signer = _signer(tx)
    try:
        result = _run(vm, store, last_ct(block).state_root, tx, signer, gas_limit)
    except VmError as exc:
        raise Rejection(Reason.VM_ERROR, str(exc)) from exc
    return Block(block.header, block.ledger + (tx.committed(result.new_root),)), result


def commit_to_context(block: Block, tx: Transaction, store: StateStore, vm: Executor = execute,
                      gas_limit: int = DEFAULT_GAS_LIMIT) -> Block:
    return _context_commit(block, tx, store, vm, gas_limit)[0]


def commit_to_pd(block: Block, tx: Transaction) -> Block:
    if block.owner is None:
        raise Rejection(Reason.GUARD, "block is not a pure-data block")
    if _signer(tx) != block.owner:
        raise Rejection(Reason.NOT_OWNER, f"signer does not own block {block.index}")
    if tx.pt != pre_ct_hash(block):
        raise Rejection(Reason.STALE_PT, f"pt does not match block {block.index}")
    return Block(block.header, block.ledger + (tx.committed(None),))


def _append(chain, tx, store, vm, gas_limit) -> tuple[Block, Optional[ExecutionResult]]:
    if tx.opcode is not OpCode.APPEND or tx.to_block is None:
        raise Rejection(Reason.GUARD, "not an append transaction")
    block = get_block(chain, tx.to_block)
    if block.index == 0:
        raise Rejection(Reason.GENESIS_TARGET, "cannot append to the genesis block")
    if block.owner is None:
        return _context_commit(block, tx, store, vm, gas_limit)
    return commit_to_pd(block, tx), None


def append_t(chain: Blockchain, tx: Transaction, store: StateStore, vm: Executor = execute,
             gas_limit: int = DEFAULT_GAS_LIMIT) -> Blockchain:
    """Route an append to its destination block and return the updated chain.

    Raises BlockNotFound for a missing destination and Rejection for every
    guard that leaves the chain unchanged.
    """
    block, _ = _append(chain, tx, store, vm, gas_limit)
    return chain.replacing(block)


def replayer(store: Optional[StateStore] = None, vm: Executor = execute,
             gas_limit: int = DEFAULT_GAS_LIMIT) -> Callable:
    """A ``validate_chain`` replay hook that re-executes context entries on ``store``.

    By default a fresh store is used, so recorded roots are re-derived from
    scratch rather than looked up.
    """
    store = store if store is not None else StateStore()

    def replay(prev_root, data, caller_pubkey):
        return vm(store, prev_root, data, address_of(caller_pubkey), gas_limit).new_root

    return replay


# -- engine -------------------------------------------------------------------

class EventKind(str, enum.Enum):
    BLOCK_ADDED = "BlockAdded"
    TRANSACTION_APPENDED = "TransactionAppended"
    TRANSACTION_REJECTED = "TransactionRejected"


@dataclass
class EngineEvent:
    kind: EventKind
    block_index: Optional[int]
    detail: str = ""
    timings: dict = field(default_factory=dict)  # phase -> nanoseconds
    tx_digest: bytes = b""
    reason: Optional[Reason] = None
    return_data: bytes = b""
    state_root: Optional[bytes] = None


@dataclass
class Prepared:
    """A validated, not yet installed transition (state writes held in ``overlay``)."""
    tx: Transaction
    kind: EventKind
    block: Block
    overlay: Optional[StateStore]
    result: Optional[ExecutionResult]
    vm_wall_ns: int = 0

    @property
    def outcome(self) -> bytes:
        """Digest identifying the transition; equal across replicas that agree."""
        if self.kind is EventKind.BLOCK_ADDED:
            return header_hash(self.block.header)
        return ct_hash(self.block.ledger[-1])

    @property
    def resulting_root(self) -> Optional[bytes]:
        return last_ct(self.block).state_root


class Mempool:
    """FIFO of pending transactions with duplicate suppression by encoding digest."""

    def __init__(self):
        self.pending: deque[Transaction] = deque()
        self.seen: set[bytes] = set()

    def submit(self, tx: Transaction) -> bool:
        key = tx_digest(tx)
        if key in self.seen:
            return False
        self.seen.add(key)
        self.pending.append(tx)
        return True

    def poll(self) -> Transaction:
        return self.pending.popleft()

    def __len__(self) -> int:
        return len(self.pending)


def tx_digest(tx: Transaction) -> bytes:
    return digest(canonical_encode(tx))


def resource_of(tx: Transaction):
    """Serialization key: appends contend per destination block, creations on the chain tip."""
    return ("block", tx.to_block) if tx.opcode is OpCode.APPEND else ("tip",)


Consensus = Callable[[Transaction], bool]


class Engine:
    """One replica's chain, state store and mempool driven by the main loop."""

    def __init__(self, chain: Optional[Blockchain] = None, store: Optional[StateStore] = None,
                 vm: Executor = execute, consensus: Optional[Consensus] = None,
                 gas_limit: int = DEFAULT_GAS_LIMIT):
        self.chain = chain if chain is not None else new_chain()
        self.store = store if store is not None else StateStore()
        self.vm = vm
        self.consensus = consensus or (lambda tx: True)
        self.gas_limit = gas_limit
        self.mempool = Mempool()
        self.listeners: list[Callable[[EngineEvent], None]] = []
        self._lock = threading.Lock()

    def subscribe(self, listener: Callable[[EngineEvent], None]) -> None:
        self.listeners.append(listener)

    def _emit(self, event: EngineEvent) -> EngineEvent:
        for listener in self.listeners:
            listener(event)
        return event

    def submit(self, tx: Transaction) -> bool:
        return self.mempool.submit(tx)

    # Algorithm guards ---------------------------------------------------

    def classify(self, tx: Transaction) -> Optional[EventKind]:
        """Which branch of the main loop takes ``tx`` (None: no branch matches)."""
        if tx.opcode is OpCode.APPEND:
            if tx.to_block is not None and tx.to_block < len(self.chain):
                return EventKind.TRANSACTION_APPENDED
            return None
        if tx.opcode is OpCode.NEW_CONTEXT_BLOCK and tx.to_block is None:
            return EventKind.BLOCK_ADDED
        if tx.opcode is OpCode.NEW_PURE_DATA_BLOCK and tx.to_block is None:
            try:
                signer = tx.signer()
            except RecoveryFailure:
                return None
            return None if self.chain.owns_block(signer) else EventKind.BLOCK_ADDED
        return None

    def prepare(self, tx: Transaction, chain: Optional[Blockchain] = None) -> Prepared:
        """Validate ``tx`` against the current chain without changing anything."""
        chain = self.chain if chain is None else chain
        overlay = None
        result = None
        started = time.perf_counter_ns()
        if tx.opcode is OpCode.APPEND:
            if tx.to_block is None or tx.to_block >= len(chain):
                raise Rejection(Reason.NO_SUCH_BLOCK, f"block {tx.to_block} does not exist")
            overlay = self.store.overlay()
            block, result = _append(chain, tx, overlay, self.vm, self.gas_limit)
            kind = EventKind.TRANSACTION_APPENDED
        elif tx.opcode is OpCode.NEW_CONTEXT_BLOCK:
            overlay = self.store.overlay()
            try:
                block, result = _c_block(chain, tx, overlay, self.vm, self.gas_limit)
            except VmError as exc:
                raise Rejection(Reason.VM_ERROR, str(exc)) from exc
            kind = EventKind.BLOCK_ADDED
        else:
            block = _pd_block(chain, tx)
            kind = EventKind.BLOCK_ADDED
        wall = time.perf_counter_ns() - started if result is not None else 0
        if result is None:
            overlay = None
        return Prepared(tx, kind, block, overlay, result, wall)

    def install(self, prepared: Prepared) -> EngineEvent:
        """Apply a prepared transition.  The destination must not have moved since."""
        block = prepared.block
        with self._lock:
            chain = self.chain
            if prepared.kind is EventKind.BLOCK_ADDED:
                if block.header.parent_hash != header_hash(last_block(chain).header) or block.index != len(chain):
                    raise Rejection(Reason.STALE_PT, "chain tip moved since validation")
                if block.owner is not None and chain.owns_block(block.owner):
                    raise Rejection(Reason.DUPLICATE_OWNER, "owner registered since validation")
                new = chain.with_block(block)
            else:
                current = chain.blocks[block.index]
                if current.header != block.header or current.ledger != block.ledger[:-1]:
                    raise Rejection(Reason.STALE_PT, f"block {block.index} moved since validation")
                new = chain.replacing(block)
            if prepared.overlay is not None:
                prepared.overlay.commit()
            self.chain = new
        result = prepared.result
        return EngineEvent(
            prepared.kind, block.index, tx_digest=tx_digest(prepared.tx),
            return_data=result.return_data if result else b"",
            state_root=prepared.resulting_root,
            timings={"vm": prepared.vm_wall_ns},
        )

    def apply(self, tx: Transaction) -> EngineEvent:
        """Validate and install ``tx`` directly; rejections become events."""
        try:
            event = self.install(self.prepare(tx))
        except Rejection as exc:
            event = EngineEvent(EventKind.TRANSACTION_REJECTED, tx.to_block, str(exc),
                                tx_digest=tx_digest(tx), reason=exc.reason)
        except BlockNotFound as exc:
            event = EngineEvent(EventKind.TRANSACTION_REJECTED, tx.to_block, str(exc),
                                tx_digest=tx_digest(tx), reason=Reason.NO_SUCH_BLOCK)
        return event

    def accept(self, mutation) -> bool:
        """Replay a block or ``(index, entry)`` decided elsewhere.

        The originating transaction is rebuilt from the committed entry and
        re-validated here (context entries re-execute); the result must match
        the pushed copy bit for bit.  Returns True when the mutation was
        already present, in which case nothing changes.
        """
        if isinstance(mutation, Block):
            block = mutation
            if block.index < len(self.chain):
                if self.chain.blocks[block.index] == block:
                    return True
                raise Rejection(Reason.DIVERGED, f"block {block.index} already holds different contents")
            first = block.header.first_ct
            opcode = OpCode.NEW_PURE_DATA_BLOCK if block.owner is not None else OpCode.NEW_CONTEXT_BLOCK
            tx = Transaction(first.data, None, first.sig, first.pt, opcode)
            expected = block
        else:
            index, entry = mutation
            current = get_block(self.chain, index)
            if any(ct == entry for ct in current.ledger):
                return True
            tx = Transaction(entry.data, index, entry.sig, entry.pt, OpCode.APPEND)
            expected = None
        prepared = self.prepare(tx)
        if expected is not None and prepared.block != expected:
            raise Rejection(Reason.DIVERGED, f"replayed block {expected.index} does not match the pushed copy")
        if expected is None and prepared.block.ledger[-1] != mutation[1]:
            raise Rejection(Reason.DIVERGED, f"replayed entry on block {mutation[0]} does not match the pushed copy")
        self._emit(self.install(prepared))
        return False

    def step(self) -> EngineEvent:
        """One loop iteration: poll, guard, consensus, apply."""
        started = time.perf_counter_ns()
        tx = self.mempool.poll()
        if self.classify(tx) is None:
            event = EngineEvent(EventKind.TRANSACTION_REJECTED, tx.to_block, "no branch of the main loop applies",
                                tx_digest=tx_digest(tx), reason=Reason.GUARD)
            return self._emit(event)
        c0 = time.perf_counter_ns()
        accepted = self.consensus(tx)
        c1 = time.perf_counter_ns()
        if not accepted:
            event = EngineEvent(EventKind.TRANSACTION_REJECTED, tx.to_block, "consensus refused",
                                tx_digest=tx_digest(tx), reason=Reason.CONSENSUS)
        else:
            event = self.apply(tx)
        event.timings.update(consensus=c1 - c0, total=time.perf_counter_ns() - started)
        return self._emit(event)

    def run(self) -> list[EngineEvent]:
        events = []
        while self.mempool:
            events.append(self.step())
        return events

    def run_sharded(self, workers: int = 4) -> list[EngineEvent]:
        """Drain the mempool with one sequential lane per destination block.

        Block creations, and appends whose destination does not exist yet,
        share the tip lane; the other lanes run concurrently.  Consensus is
        not consulted.  Events come back grouped by lane in FIFO order.
        """
        lanes: dict = {}
        known = len(self.chain)
        while self.mempool:
            tx = self.mempool.poll()
            key = resource_of(tx)
            if key != ("tip",) and tx.to_block >= known:
                key = ("tip",)
            lanes.setdefault(key, []).append(tx)

        def drain(txs):
            return [self._emit(self.apply(tx)) for tx in txs]

        tip = lanes.pop(("tip",), [])
        events = drain(tip)
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for chunk in pool.map(drain, [lanes[k] for k in sorted(lanes, key=lambda k: k[1])]):
                events.extend(chunk)
        return events
