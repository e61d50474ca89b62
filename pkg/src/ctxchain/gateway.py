"""Replicated gateways: PBFT-style agreement over a simulated network.

Everything runs on one deterministic discrete-event loop with a seeded RNG.
Each gateway owns an ``Engine`` (chain + state store) and processes incoming
messages one at a time on a modelled CPU; transaction validation, including
VM pre-execution for context blocks, runs on a per-block worker timeline so
work on different blocks overlaps in simulated time.

Protocol (crash faults only, n = 3f + 1, quorum 2f + 1):

* a device sends its transaction to its gateway, which forwards it to the
  leader of the current view;
* the leader assigns a sequence number, validates the transaction and sends
  PRE-PREPARE(view, seq, tx, verdict, deps).  ``deps`` names earlier slots on
  the same block (or on the chain tip for block creations) that a replica
  must have resolved before it validates this one;
* every replica validates and broadcasts PREPARE with its own verdict (the
  outcome digest, or the rejection reason); 2f + 1 matching prepares make a
  slot prepared and trigger COMMIT; 2f + 1 matching commits decide it;
* a decided "ok" slot is installed through the local engine; a decided
  rejection is recorded and dropped.  The gateway a device talks to replies
  with the result and the block's new ``pre_ct_hash``.

Leader failure is handled by client retransmission to every gateway, a
per-request timer and a VIEW-CHANGE / NEW-VIEW exchange that re-proposes
prepared but undecided slots.  The leader of view v is gateway v mod n.
"""
from __future__ import annotations

import heapq
import json
import random
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple, Optional, Sequence, Union

from .crypto import KeyPair
from .engine import Engine, EventKind, Prepared, Reason, Rejection, resource_of, tx_digest
from .model import (
    Block,
    BlockNotFound,
    CommittedTransaction,
    OpCode,
    Transaction,
    encode_chain,
    get_block,
    pre_ct_hash,
)
from .vm import DEFAULT_GAS_LIMIT, execute


class Deadlock(RuntimeError):
    """The simulation stopped making progress before the workload finished."""


class DivergenceError(RuntimeError):
    """Non-faulty gateways disagree on chain contents or decisions."""


@dataclass
class NetConfig:
    latency_ns: Union[int, tuple[int, int]] = 1_000_000   # fixed, or uniform [lo, hi]
    drop_rate: float = 0.0
    seed: int = 0
    retransmit: bool = True
    retransmit_ns: int = 4_000_000
    proc_ns: int = 20_000            # CPU cost of handling one message
    verify_ns: int = 100_000         # signature and guard checks per validation
    vm_call_ns: int = 2_000_000      # fixed overhead of one VM invocation
    vm_ns_per_gas: int = 10_000
    view_timeout_ns: int = 400_000_000
    client_timeout_ns: int = 2_000_000_000
    deadlock_ns: int = 60_000_000_000

    def __post_init__(self):
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must be in [0, 1)")


# -- simulator --------------------------------------------------------------

class Simulator:
    def __init__(self, seed: int = 0):
        self.now = 0
        self.rng = random.Random(seed)
        self._queue: list = []
        self._seq = 0
        self.last_progress = 0
        self.events_run = 0

    def at(self, when: int, fn: Callable, *args) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (when, self._seq, fn, args))

    def after(self, delay: int, fn: Callable, *args) -> None:
        self.at(self.now + delay, fn, *args)

    def progress(self) -> None:
        self.last_progress = self.now

    def run(self, done: Callable[[], bool], deadlock_ns: int) -> None:
        while not done():
            if not self._queue:
                raise Deadlock(f"event queue drained at t={self.now}ns with work outstanding")
            when, _, fn, args = heapq.heappop(self._queue)
            if when - self.last_progress > deadlock_ns:
                raise Deadlock(f"no progress for {deadlock_ns}ns (t={when}ns)")
            self.now = when
            self.events_run += 1
            fn(*args)


# -- messages ---------------------------------------------------------------

Verdict = tuple  # (True, outcome digest) or (False, reason string)


class Request(NamedTuple):
    tx: Transaction
    txd: bytes
    client: Optional[int]   # device id, None for injected proposals
    via: Optional[int]      # forwarding gateway, None when sent by the client
    retry: bool = False


class PrePrepare(NamedTuple):
    view: int
    seq: int
    tx: Transaction
    txd: bytes
    verdict: Verdict
    deps: tuple
    sender: int


class Prepare(NamedTuple):
    view: int
    seq: int
    txd: bytes
    verdict: Verdict
    sender: int


class Commit(NamedTuple):
    view: int
    seq: int
    txd: bytes
    verdict: Verdict
    sender: int


class ViewChange(NamedTuple):
    view: int
    sender: int
    prepared: tuple   # (seq, tx, txd, verdict, deps, decided) for prepared or decided slots
    pending: tuple    # seqs pre-prepared here but neither prepared nor decided
    max_seq: int


class NewView(NamedTuple):
    view: int
    sender: int
    proposals: tuple  # (seq, tx, txd, verdict, deps) carried into the new view
    nulls: tuple      # seqs abandoned for good
    next_seq: int


class Reply(NamedTuple):
    txd: bytes
    ok: bool
    reason: str
    block_index: Optional[int]
    return_data: bytes
    pt: Optional[bytes]
    sender: int


class Query(NamedTuple):
    device: int
    block_index: int


class PtInfo(NamedTuple):
    block_index: int
    pt: Optional[bytes]


class Mutation(NamedTuple):
    origin: int
    block: Optional[Block]
    index: Optional[int]
    entry: Optional[CommittedTransaction]
    sent_at: int


# -- trace ------------------------------------------------------------------

@dataclass
class TraceRecord:
    gateway: Any          # gateway id, or "device-<k>"
    event: str
    block: Optional[int]
    sim_ns: int
    tx: str = ""
    label: str = ""
    seq: Optional[int] = None
    ok: Optional[bool] = None
    wall_ns: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {"gateway": self.gateway, "event": self.event, "block": self.block, "sim_ns": self.sim_ns,
                "tx": self.tx, "label": self.label, "seq": self.seq, "ok": self.ok, "wall_ns": self.wall_ns}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))


@dataclass
class RunTrace:
    records: list[TraceRecord] = field(default_factory=list)
    sim_end_ns: int = 0
    wall_ns: int = 0
    chains: dict = field(default_factory=dict)   # gateway id -> canonical chain bytes

    def add(self, *args, **kwargs) -> None:
        self.records.append(TraceRecord(*args, **kwargs))

    def to_jsonl(self, include_wall: bool = True) -> str:
        lines = []
        for rec in self.records:
            if include_wall:
                lines.append(rec.to_json())
            else:
                stripped = TraceRecord(**{**rec.__dict__, "wall_ns": {}})
                lines.append(stripped.to_json())
        return "\n".join(lines) + ("\n" if lines else "")

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    def of(self, event: str):
        return [r for r in self.records if r.event == event]


# -- gateway ----------------------------------------------------------------

@dataclass
class Slot:
    seq: int
    view: int = -1
    tx: Optional[Transaction] = None
    txd: bytes = b""
    deps: tuple = ()
    leader_verdict: Optional[Verdict] = None
    own: Optional[Verdict] = None
    prepared_obj: Optional[Prepared] = None
    validating: bool = False
    prepared_in: Optional[int] = None   # view in which this replica prepared
    committed_in: set = field(default_factory=set)
    prepares: dict = field(default_factory=lambda: defaultdict(set))
    commits: dict = field(default_factory=lambda: defaultdict(set))
    decided: Optional[Verdict] = None
    started_ns: int = 0


class Gateway:
    def __init__(self, gid: int, cluster: "Cluster", engine: Engine):
        self.id = gid
        self.cluster = cluster
        self.engine = engine
        self.crashed = False
        self.view = 0
        self.cpu_free = 0
        self.worker_free: dict = {}
        self.slots: dict[int, Slot] = {}
        self.resolved: set[int] = set()          # decided and applied/dropped locally
        self.decided: dict[int, tuple] = {}       # seq -> (txd, verdict)
        self.results: dict[bytes, tuple] = {}     # txd -> (seq, verdict, event)
        self.requests: dict[bytes, Request] = {}  # known, undecided
        self.attached: dict[bytes, int] = {}      # txd -> device to answer
        self.waiting: list[int] = []              # slots blocked on deps
        self.last_on: dict = {}                   # resource -> last seq pre-prepared
        self.decided_on: dict = {}                # resource -> last seq decided
        self.nulled: set[int] = set()             # slots abandoned by a view change
        self.future: list[PrePrepare] = []        # pre-prepares for views not yet entered
        self.revalidate: list[int] = []           # outvoted slots to check again
        self.view_moved_ns = 0                    # last view change sent or view entered
        self.created_by: dict[int, int] = {}      # block index -> seq that created it
        self.timers: set[bytes] = set()
        # leader state
        self.next_seq = 1
        self.queue: deque[Request] = deque()
        self.proposed: set[bytes] = set()
        self.busy: set = set()
        self.vc_msgs: dict[int, dict[int, ViewChange]] = defaultdict(dict)
        self.vc_sent: set[int] = set()
        self.seen_mutations: set[bytes] = set()

    # plumbing -----------------------------------------------------------

    @property
    def sim(self) -> Simulator:
        return self.cluster.sim

    @property
    def cfg(self) -> NetConfig:
        return self.cluster.cfg

    @property
    def is_leader(self) -> bool:
        return self.cluster.leader_of(self.view) == self.id

    @property
    def chain(self):
        return self.engine.chain

    @property
    def store(self):
        return self.engine.store

    def trace(self, event, block=None, **kw) -> None:
        self.cluster.trace.add(self.id, event, block, self.sim.now, **kw)

    def deliver(self, msg) -> None:
        start = max(self.sim.now, self.cpu_free)
        self.cpu_free = start + self.cfg.proc_ns
        self.sim.at(self.cpu_free, self._handle, msg)

    def _handle(self, msg) -> None:
        if self.crashed:
            return
        handler = _HANDLERS[type(msg)]
        handler(self, msg)

    def send(self, dst, msg) -> None:
        self.cluster.send(self, dst, msg)

    def broadcast_peers(self, msg) -> None:
        for gw in self.cluster.gateways:
            if gw is not self:
                self.send(gw, msg)

    # requests ------------------------------------------------------------

    def on_request(self, req: Request) -> None:
        txd = req.txd
        if req.via is None and req.client is not None:
            self.attached[txd] = req.client
        if txd in self.results:
            if req.via is None and req.client is not None:
                self._reply(txd)
            return
        self.requests.setdefault(txd, req)
        if req.retry and req.via is None and txd not in self.timers:
            self.timers.add(txd)
            self.sim.after(self.cfg.view_timeout_ns, self._timer_expired, txd, self.view)
        if self.is_leader:
            if txd not in self.proposed and all(q.txd != txd for q in self.queue):
                self.queue.append(req)
                self._try_propose()
        elif req.via is None:
            self.send(self.cluster.gateways[self.cluster.leader_of(self.view)], req._replace(via=self.id))

    def _try_propose(self) -> None:
        if not self.is_leader or self.crashed:
            return
        keep = deque()
        while self.queue:
            req = self.queue.popleft()
            if req.txd in self.results or req.txd in self.proposed:
                continue
            res = resource_of(req.tx)
            if res in self.busy or self._creation_in_flight(req.tx):
                keep.append(req)
                continue
            self._propose(req, res)
        self.queue = keep

    def _creation_in_flight(self, tx: Transaction) -> bool:
        """An append to a block this leader has not applied yet, while creations are pending."""
        if tx.opcode is not OpCode.APPEND or tx.to_block < len(self.chain):
            return False
        return any(s.tx is not None and s.decided is None and s.tx.opcode is not OpCode.APPEND
                   for s in self.slots.values()) or ("tip",) in self.busy

    def _deps_for(self, tx: Transaction, res) -> tuple:
        deps = []
        if res in self.last_on:
            deps.append(self.last_on[res])
        if tx.opcode is OpCode.APPEND and tx.to_block in self.created_by:
            deps.append(self.created_by[tx.to_block])
        return tuple(sorted(set(deps)))

    def _propose(self, req: Request, res) -> None:
        seq = self.next_seq
        self.next_seq += 1
        self.proposed.add(req.txd)
        self.busy.add(res)
        slot = self._slot(seq)
        slot.view, slot.tx, slot.txd = self.view, req.tx, req.txd
        slot.deps = self._deps_for(req.tx, res)
        slot.started_ns = self.sim.now
        self.last_on[res] = seq
        self.trace("propose", req.tx.to_block, tx=req.txd.hex()[:16], seq=seq)
        self._maybe_validate(slot)

    # slots ----------------------------------------------------------------

    def _slot(self, seq: int) -> Slot:
        slot = self.slots.get(seq)
        if slot is None:
            slot = self.slots[seq] = Slot(seq)
        return slot

    def on_preprepare(self, msg: PrePrepare) -> None:
        if msg.view > self.view:
            self.future.append(msg)
            return
        if msg.view < self.view:
            return
        slot = self._slot(msg.seq)
        if slot.decided is not None:
            self._help_decided(slot, msg.view)
            return
        if slot.txd != msg.txd:
            # a sequence number reused after a view change: forget the stale attempt
            slot.own, slot.prepared_obj, slot.validating = None, None, False
            self.nulled.discard(msg.seq)
        slot.view, slot.tx, slot.txd, slot.deps = msg.view, msg.tx, msg.txd, msg.deps
        slot.leader_verdict = msg.verdict
        if not slot.started_ns:
            slot.started_ns = self.sim.now
        slot.prepares[(msg.view, msg.txd, msg.verdict)].add(msg.sender)
        res = resource_of(msg.tx)
        self.last_on[res] = max(self.last_on.get(res, 0), msg.seq)
        if slot.own is not None:
            self._send_prepare(slot)
        else:
            self._maybe_validate(slot)

    def _deps_met(self, slot: Slot) -> bool:
        return all(d in self.resolved or d in self.nulled for d in slot.deps)

    def _maybe_validate(self, slot: Slot) -> None:
        if slot.validating or slot.own is not None:
            return
        if not self._deps_met(slot):
            if slot.seq not in self.waiting:
                self.waiting.append(slot.seq)
            return
        slot.validating = True
        cfg = self.cfg
        wall0 = time.perf_counter_ns()
        try:
            prepared = self.engine.prepare(slot.tx)
            verdict = (True, prepared.outcome)
        except Rejection as exc:
            prepared, verdict = None, (False, exc.reason.value)
        except BlockNotFound:
            prepared, verdict = None, (False, Reason.NO_SUCH_BLOCK.value)
        wall = time.perf_counter_ns() - wall0
        cost = cfg.verify_ns
        if prepared is not None and prepared.result is not None:
            cost += cfg.vm_call_ns + prepared.result.gas_used * cfg.vm_ns_per_gas
        elif slot.tx.opcode is not OpCode.NEW_PURE_DATA_BLOCK and slot.tx.data and verdict[1] == Reason.VM_ERROR.value:
            cost += cfg.vm_call_ns
        res = resource_of(slot.tx)
        start = max(self.sim.now, self.worker_free.get(res, 0))
        self.worker_free[res] = start + cost
        self.sim.at(start + cost, self._validated, slot, slot.txd, prepared, verdict, wall)

    def _validated(self, slot: Slot, txd: bytes, prepared, verdict, wall: int) -> None:
        if self.crashed or slot.tx is None or slot.txd != txd or not slot.validating:
            return
        slot.validating = False
        slot.own = verdict
        slot.prepared_obj = prepared
        self.trace("validated", slot.tx.to_block, tx=slot.txd.hex()[:16], seq=slot.seq, ok=verdict[0],
                   wall_ns={"validate": wall})
        if self.is_leader and slot.view == self.view and slot.leader_verdict is None:
            slot.leader_verdict = verdict
            slot.prepares[(self.view, slot.txd, verdict)].add(self.id)
            self.broadcast_peers(PrePrepare(self.view, slot.seq, slot.tx, slot.txd, verdict, slot.deps, self.id))
            self._check_prepared(slot)
        elif slot.leader_verdict is not None:
            self._send_prepare(slot)

    def _send_prepare(self, slot: Slot) -> None:
        key = (slot.view, slot.txd, slot.own)
        if self.id in slot.prepares[key]:
            return
        slot.prepares[key].add(self.id)
        self.broadcast_peers(Prepare(slot.view, slot.seq, slot.txd, slot.own, self.id))
        self._check_prepared(slot)

    def on_prepare(self, msg: Prepare) -> None:
        slot = self._slot(msg.seq)
        slot.prepares[(msg.view, msg.txd, msg.verdict)].add(msg.sender)
        self._check_prepared(slot)

    def _check_prepared(self, slot: Slot) -> None:
        if slot.own is None or slot.tx is None:
            return
        key = (slot.view, slot.txd, slot.own)
        if slot.view in slot.committed_in or len(slot.prepares[key]) < self.cluster.quorum:
            return
        slot.prepared_in = slot.view
        slot.committed_in.add(slot.view)
        slot.commits[key].add(self.id)
        self.broadcast_peers(Commit(slot.view, slot.seq, slot.txd, slot.own, self.id))
        self._check_decided(slot)

    def on_commit(self, msg: Commit) -> None:
        slot = self._slot(msg.seq)
        slot.commits[(msg.view, msg.txd, msg.verdict)].add(msg.sender)
        self._check_decided(slot)

    def _check_decided(self, slot: Slot) -> None:
        if slot.decided is None and slot.own is not None and slot.seq not in self.revalidate:
            for (_view, txd, verdict), voters in slot.commits.items():
                if txd == slot.txd and verdict != slot.own and len(voters) >= self.cluster.quorum:
                    # a quorum committed another outcome: this replica validated on stale
                    # state, so validate again once something new is applied here
                    slot.own, slot.prepared_obj, slot.prepared_in = None, None, None
                    self.revalidate.append(slot.seq)
                    return
        if slot.decided is not None or slot.prepared_in is None:
            return
        key = (slot.prepared_in, slot.txd, slot.own)
        if len(slot.commits[key]) < self.cluster.quorum:
            return
        slot.decided = slot.own
        self.decided[slot.seq] = (slot.txd, slot.own)
        self.sim.progress()
        self.trace("decided", slot.tx.to_block, tx=slot.txd.hex()[:16], seq=slot.seq, ok=slot.own[0],
                   label=_label(slot.tx))
        self._apply(slot)

    def _apply(self, slot: Slot) -> None:
        tx = slot.tx
        if slot.decided[0]:
            event = self.engine.install(slot.prepared_obj)
            if tx.opcode is not OpCode.APPEND:
                self.created_by[event.block_index] = slot.seq
            self.trace("applied", event.block_index, tx=slot.txd.hex()[:16], seq=slot.seq, ok=True,
                       label=_label(tx), wall_ns={"vm": slot.prepared_obj.vm_wall_ns})
        else:
            event = None
            self.trace("rejected", tx.to_block, tx=slot.txd.hex()[:16], seq=slot.seq, ok=False,
                       label=slot.decided[1])
        slot.prepared_obj = None
        self.results[slot.txd] = (slot.seq, slot.decided, event)
        self.requests.pop(slot.txd, None)
        self.timers.discard(slot.txd)
        self.resolved.add(slot.seq)
        res = resource_of(tx)
        self.busy.discard(res)
        self.decided_on[res] = max(self.decided_on.get(res, 0), slot.seq)
        if slot.txd in self.attached:
            self._reply(slot.txd)
        again, self.revalidate = self.revalidate, []
        for seq in again:
            self._maybe_validate(self.slots[seq])
        for seq in list(self.waiting):
            waiting = self.slots[seq]
            if self._deps_met(waiting):
                self.waiting.remove(seq)
                self._maybe_validate(waiting)
        self._try_propose()

    def _reply(self, txd: bytes) -> None:
        seq, verdict, event = self.results[txd]
        slot = self.slots[seq]
        tx = slot.tx
        block_index = event.block_index if event is not None else tx.to_block
        pt = None
        if block_index is not None and block_index < len(self.chain):
            pt = pre_ct_hash(get_block(self.chain, block_index))
        reason = "" if verdict[0] else verdict[1]
        ret = event.return_data if event is not None else b""
        device = self.cluster.devices[self.attached[txd]]
        self.send(device, Reply(txd, verdict[0], reason, block_index, ret, pt, self.id))

    def _help_decided(self, slot: Slot, view: int) -> None:
        # a re-proposed slot this replica already decided: vote so others can finish
        key = (view, slot.txd, slot.decided)
        if self.id not in slot.prepares[key]:
            slot.prepares[key].add(self.id)
            self.broadcast_peers(Prepare(view, slot.seq, slot.txd, slot.decided, self.id))
        if view not in slot.committed_in:
            slot.committed_in.add(view)
            slot.commits[key].add(self.id)
            self.broadcast_peers(Commit(view, slot.seq, slot.txd, slot.decided, self.id))

    # queries ----------------------------------------------------------------

    def on_query(self, msg: Query) -> None:
        pt = None
        if 0 < msg.block_index < len(self.chain):
            pt = pre_ct_hash(get_block(self.chain, msg.block_index))
        self.send(self.cluster.devices[msg.device], PtInfo(msg.block_index, pt))

    # view change ------------------------------------------------------------

    def _timer_expired(self, txd: bytes, view: int) -> None:
        if self.crashed or txd in self.results or txd not in self.timers:
            return
        if self.view == view and self.sim.now - self.view_moved_ns >= self.cfg.view_timeout_ns:
            # nothing moved for a whole timeout: escalate past any stalled view change
            self._start_view_change(max([self.view] + list(self.vc_sent)) + 1)
        # keep watching in the new view
        self.sim.after(self.cfg.view_timeout_ns, self._timer_expired, txd, self.view)

    def _start_view_change(self, new_view: int) -> None:
        if new_view in self.vc_sent or new_view <= self.view:
            return
        self.vc_sent.add(new_view)
        self.view_moved_ns = self.sim.now
        prepared, pending = [], []
        for slot in sorted(self.slots.values(), key=lambda s: s.seq):
            if slot.tx is None:
                continue
            if slot.decided is not None:
                prepared.append((slot.seq, slot.tx, slot.txd, slot.decided, slot.deps, True))
            elif slot.prepared_in is not None:
                prepared.append((slot.seq, slot.tx, slot.txd, slot.own, slot.deps, False))
            else:
                pending.append(slot.seq)
        msg = ViewChange(new_view, self.id, tuple(prepared), tuple(pending), max(self.slots, default=0))
        self.trace("view_change", None, seq=new_view)
        self.on_view_change(msg)
        self.broadcast_peers(msg)

    def on_view_change(self, msg: ViewChange) -> None:
        if msg.view <= self.view:
            return
        votes = self.vc_msgs[msg.view]
        votes[msg.sender] = msg
        f = self.cluster.f
        if len(votes) >= f + 1 and msg.view not in self.vc_sent:
            self._start_view_change(msg.view)
            return
        if self.cluster.leader_of(msg.view) == self.id and len(votes) >= self.cluster.quorum:
            self._install_new_view(msg.view, votes)

    def _install_new_view(self, view: int, votes: dict) -> None:
        if self.view >= view:
            return
        known: dict[int, tuple] = {}
        decided_by: dict[int, int] = defaultdict(int)
        pending: set[int] = set()
        max_seq = max([self.next_seq - 1] + list(self.slots))
        for vc in votes.values():
            max_seq = max(max_seq, vc.max_seq)
            pending.update(vc.pending)
            for seq, tx, txd, verdict, deps, decided in vc.prepared:
                if decided:
                    decided_by[seq] += 1
                    known[seq] = (seq, tx, txd, verdict, deps)
                else:
                    known.setdefault(seq, (seq, tx, txd, verdict, deps))
        # carry everything some reporter still lacks; the rest is settled everywhere
        proposals = tuple(known[s] for s in sorted(known) if decided_by[s] < len(votes))
        nulls = tuple(sorted(pending - set(known)))
        last_on: dict = {}
        for seq, tx, _txd, _verdict, _deps in known.values():
            res = resource_of(tx)
            last_on[res] = max(last_on.get(res, 0), seq)
        msg = NewView(view, self.id, proposals, nulls, max_seq + 1)
        self.trace("new_view", None, seq=view)
        self.broadcast_peers(msg)
        self.last_on = last_on
        self._enter_view(msg)

    def on_new_view(self, msg: NewView) -> None:
        if msg.view <= self.view and not (msg.view == self.view and self.id != msg.sender):
            return
        self._enter_view(msg)

    def _enter_view(self, msg: NewView) -> None:
        self.view = msg.view
        self.view_moved_ns = self.sim.now
        leader = self.cluster.gateways[self.cluster.leader_of(self.view)]
        self.next_seq = max(self.next_seq, msg.next_seq)
        # rebuild leader bookkeeping from what is still in flight
        self.busy = {resource_of(s.tx) for s in self.slots.values() if s.tx is not None and s.seq not in self.resolved}
        self.proposed = {s.txd for s in self.slots.values() if s.tx is not None}
        for seq, tx, txd, verdict, deps in msg.proposals:
            slot = self._slot(seq)
            if slot.decided is not None:
                self._help_decided(slot, msg.view)
                continue
            slot.view, slot.tx, slot.txd, slot.deps = msg.view, tx, txd, deps
            slot.leader_verdict = verdict
            slot.prepares[(msg.view, txd, verdict)].add(msg.sender)
            self.busy.add(resource_of(tx))
            self.proposed.add(txd)
            if slot.own is not None:
                self._send_prepare(slot)
            else:
                self._maybe_validate(slot)
        # slots that were never prepared anywhere are abandoned
        nulls = set(msg.nulls)
        self.nulled.update(nulls)
        for s in list(self.slots.values()):
            if s.seq in nulls and s.tx is not None and s.decided is None and s.view < msg.view:
                s.tx = None
                s.own = None
                s.prepared_obj = None
                self.nulled.add(s.seq)
                if s.seq in self.waiting:
                    self.waiting.remove(s.seq)
                self.proposed.discard(s.txd)
        for seq in list(self.waiting):
            if self._deps_met(self.slots[seq]):
                self.waiting.remove(seq)
                self._maybe_validate(self.slots[seq])
        self.busy = {resource_of(s.tx) for s in self.slots.values()
                     if s.tx is not None and s.seq not in self.resolved}
        if leader is not self:
            self.queue.clear()
        for txd, req in list(self.requests.items()):
            if txd in self.proposed or txd in self.results:
                continue
            if leader is self:
                if all(q.txd != txd for q in self.queue):
                    self.queue.append(req)
            else:
                self.send(leader, req._replace(via=self.id))
        early, self.future = self.future, []
        for pp in early:
            if pp.view == self.view:
                self.on_preprepare(pp)
            elif pp.view > self.view:
                self.future.append(pp)
        self._try_propose()

    # state push ---------------------------------------------------------------

    def on_mutation(self, msg: Mutation) -> None:
        self.cluster._apply_mutation(self, msg)


_HANDLERS = {
    Request: Gateway.on_request,
    PrePrepare: Gateway.on_preprepare,
    Prepare: Gateway.on_prepare,
    Commit: Gateway.on_commit,
    ViewChange: Gateway.on_view_change,
    NewView: Gateway.on_new_view,
    Query: Gateway.on_query,
    Mutation: Gateway.on_mutation,
}


def _label(tx: Transaction) -> str:
    return {OpCode.NEW_PURE_DATA_BLOCK: "pd-block", OpCode.NEW_CONTEXT_BLOCK: "c-block",
            OpCode.APPEND: "append"}[tx.opcode]


# -- devices ---------------------------------------------------------------

@dataclass
class Step:
    """One transaction in a device lane.

    ``target`` is either a fixed block index or ``("lane", k)``, meaning the
    block created by step ``k`` of the same lane.  For appends, ``pt`` and the
    destination are resolved at submission and the transaction is re-signed
    with ``signer``.
    """
    tx: Transaction
    kind: str
    target: Any = None
    signer: Optional[KeyPair] = None


class Device:
    def __init__(self, did: int, cluster: "Cluster", steps: Sequence[Step], gateway: int, start_ns: int = 0):
        self.id = did
        self.cluster = cluster
        self.steps = list(steps)
        self.gateway = gateway
        self.crashed = False
        self.pos = 0
        self.created: dict[int, int] = {}
        self.pt_cache: dict[int, bytes] = {}
        self.current: Optional[Request] = None
        self.sent_at = 0
        self.stale_retry = False
        self.done = not self.steps
        self.results: list[Reply] = []
        self.pending_query: Optional[tuple] = None
        self.retried = False
        if self.steps:
            cluster.sim.at(start_ns, self._next)

    @property
    def name(self) -> str:
        return f"device-{self.id}"

    def deliver(self, msg) -> None:
        if isinstance(msg, Reply):
            self.on_reply(msg)
        elif isinstance(msg, PtInfo):
            self.on_pt(msg)

    def _resolve_target(self, step: Step) -> Optional[int]:
        if isinstance(step.target, tuple):
            return self.created.get(step.target[1])
        return step.target

    def _next(self) -> None:
        if self.pos >= len(self.steps):
            self.done = True
            self.cluster.sim.progress()
            return
        step = self.steps[self.pos]
        if step.tx.opcode is OpCode.APPEND:
            target = self._resolve_target(step)
            if target is None:
                # creating step failed; nothing to append to
                self.pos += 1
                self._next()
                return
            if target in self.pt_cache:
                self._submit(target, self.pt_cache[target])
            else:
                self._query(target)
        else:
            self._submit(None, step.tx.pt)

    def _query(self, target: int) -> None:
        self.pending_query = (self.pos, target)
        self.cluster.send(self, self.cluster.gateways[self.gateway], Query(self.id, target))
        self.cluster.sim.after(self.cluster.cfg.client_timeout_ns, self._query_timeout, self.pos, target)

    def _query_timeout(self, pos: int, target: int) -> None:
        if self.pending_query != (pos, target):
            return
        # no answer: fail over to the next gateway
        self.gateway = (self.gateway + 1) % len(self.cluster.gateways)
        self._query(target)

    def on_pt(self, msg: PtInfo) -> None:
        if self.current is not None or self.pos >= len(self.steps) or self.pending_query is None:
            return
        self.pending_query = None
        if msg.pt is None:
            self.pos += 1
            self._next()
            return
        self._submit(msg.block_index, msg.pt)

    def _submit(self, target: Optional[int], pt: bytes) -> None:
        step = self.steps[self.pos]
        tx = step.tx
        if tx.opcode is OpCode.APPEND and (tx.to_block != target or tx.pt != pt):
            tx = Transaction.create(step.signer, tx.data, OpCode.APPEND, target, pt)
        txd = tx_digest(tx)
        self.current = Request(tx, txd, self.id, None)
        self.sent_at = self.cluster.sim.now
        self.cluster.trace.add(self.name, "submit", target, self.sent_at, tx=txd.hex()[:16], label=step.kind)
        self.cluster.send(self, self.cluster.gateways[self.gateway], self.current)
        self.cluster.sim.after(self.cluster.cfg.client_timeout_ns, self._timeout, txd)

    def _timeout(self, txd: bytes) -> None:
        if self.current is None or self.current.txd != txd:
            return
        self.retried = True
        retry = self.current._replace(retry=True)
        for gw in self.cluster.gateways:
            self.cluster.send(self, gw, retry)
        self.cluster.sim.after(self.cluster.cfg.client_timeout_ns, self._timeout, txd)

    def on_reply(self, msg: Reply) -> None:
        if self.current is None or msg.txd != self.current.txd:
            return
        step = self.steps[self.pos]
        now = self.cluster.sim.now
        self.cluster.trace.add(self.name, "reply", msg.block_index, now, tx=msg.txd.hex()[:16],
                               label=step.kind, ok=msg.ok, wall_ns={"latency": now - self.sent_at})
        self.current = None
        if self.retried:
            # whoever answered a broadcast retry becomes this device's gateway
            self.gateway = msg.sender
            self.retried = False
        if msg.block_index is not None and msg.pt is not None:
            self.pt_cache[msg.block_index] = msg.pt
        if not msg.ok and msg.reason == Reason.STALE_PT.value and not self.stale_retry:
            self.stale_retry = True
            self.pt_cache.pop(msg.block_index, None)
            self._next()
            return
        self.stale_retry = False
        if msg.ok and step.tx.opcode is not OpCode.APPEND:
            self.created[self.pos] = msg.block_index
        self.results.append(msg)
        self.pos += 1
        self._next()


# -- cluster ------------------------------------------------------------------

@dataclass
class DeliveryReport:
    origin: int
    applied: dict = field(default_factory=dict)      # gateway -> latency ns
    duplicates: set = field(default_factory=set)
    diverged: dict = field(default_factory=dict)     # gateway -> reason

    @property
    def ok(self) -> bool:
        return not self.diverged


class Cluster:
    def __init__(self, n: int, cfg: Optional[NetConfig] = None, vm=execute,
                 gas_limit: int = DEFAULT_GAS_LIMIT):
        if n < 1:
            raise ValueError("need at least one gateway")
        self.cfg = cfg or NetConfig()
        self.sim = Simulator(self.cfg.seed)
        self.n = n
        self.f = (n - 1) // 3
        self.quorum = 2 * self.f + 1
        self.trace = RunTrace()
        self.gateways = [Gateway(i, self, Engine(vm=vm, gas_limit=gas_limit)) for i in range(n)]
        self.devices: list[Device] = []
        self._reports: dict[int, DeliveryReport] = {}

    def leader_of(self, view: int) -> int:
        return view % self.n

    def live(self) -> list[Gateway]:
        return [g for g in self.gateways if not g.crashed]

    # network ----------------------------------------------------------------

    def _latency(self) -> int:
        lat = self.cfg.latency_ns
        if isinstance(lat, tuple):
            return self.sim.rng.randint(lat[0], lat[1])
        return lat

    def send(self, src, dst, msg) -> None:
        if src.crashed:
            return
        delay = self._latency()
        if self.cfg.drop_rate and self.sim.rng.random() < self.cfg.drop_rate:
            if not self.cfg.retransmit:
                return
            self.sim.after(self.cfg.retransmit_ns, self._resend, src, dst, msg)
            return
        self.sim.after(delay, self._arrive, dst, msg)

    def _resend(self, src, dst, msg) -> None:
        if not src.crashed:
            self.send(src, dst, msg)

    def _arrive(self, dst, msg) -> None:
        if not dst.crashed:
            dst.deliver(msg)

    def crash(self, gid: int, at_ns: Optional[int] = None) -> None:
        def down():
            self.gateways[gid].crashed = True
            self.trace.add(gid, "crash", None, self.sim.now)
        if at_ns is None:
            down()
        else:
            self.sim.at(at_ns, down)

    # workload -------------------------------------------------------------

    def add_device(self, steps: Sequence[Step], gateway: int, start_ns: int = 0) -> Device:
        dev = Device(len(self.devices), self, steps, gateway, start_ns)
        self.devices.append(dev)
        return dev

    def submit(self, tx: Transaction, gateway: int = 0, retry: bool = False) -> bytes:
        """Inject a proposal at ``gateway`` without a device behind it.

        With ``retry`` the gateway treats it like a client retransmission and
        arms its view-change timer, so a dead leader cannot stall it.
        """
        txd = tx_digest(tx)
        self.gateways[gateway].deliver(Request(tx, txd, None, None, retry))
        return txd

    def quiescent(self) -> bool:
        live = self.live()
        if not live:
            return True
        ref = live[0].resolved
        for gw in live:
            if gw.resolved != ref or gw.waiting or any(q.txd not in gw.results for q in gw.queue):
                return False
            if any(s.tx is not None and s.decided is None and s.view >= gw.view for s in gw.slots.values()):
                return False
        return True

    def run_until(self, done: Callable[[], bool]) -> None:
        self.sim.progress()
        self.sim.run(done, self.cfg.deadlock_ns)

    def run(self) -> RunTrace:
        wall0 = time.perf_counter_ns()
        self.run_until(lambda: all(d.done for d in self.devices) and self.quiescent())
        self.trace.sim_end_ns = self.sim.now
        self.trace.wall_ns = time.perf_counter_ns() - wall0
        self.trace.chains = {g.id: encode_chain(g.chain) for g in self.live()}
        return self.trace

    # checks ---------------------------------------------------------------

    def check_agreement(self) -> None:
        slots: dict[int, tuple] = {}
        for gw in self.live():
            for seq, value in gw.decided.items():
                if slots.setdefault(seq, value) != value:
                    raise DivergenceError(f"slot {seq} decided differently at gateway {gw.id}")

    def check_replication(self) -> None:
        self.check_agreement()
        live = self.live()
        encodings = {g.id: encode_chain(g.chain) for g in live}
        if len(set(encodings.values())) > 1:
            raise DivergenceError(f"chains differ across gateways {sorted(encodings)}")
        ref = live[0]
        for block in ref.chain.blocks[1:]:
            if block.owner is None:
                roots = {g.engine.chain.blocks[block.index].ledger[-1].state_root if g.engine.chain.blocks[block.index].ledger
                         else g.engine.chain.blocks[block.index].header.first_ct.state_root for g in live}
                if len(roots) != 1:
                    raise DivergenceError(f"context block {block.index} has diverging state roots")
                root = roots.pop()
                for g in live:
                    if not g.store.is_known(root):
                        raise DivergenceError(f"gateway {g.id} lacks state {root.hex()}")

    # consensus entry points ---------------------------------------------------

    def perform_consensus(self, tx: Transaction) -> bool:
        """Propose ``tx`` and run until every live gateway decides; returns the verdict.

        The proposal reaches every live gateway with view-change timers armed,
        so it is decided even when the current leader has crashed.
        """
        txd = tx_digest(tx)
        for gw in self.live():
            self.submit(tx, gw.id, retry=True)
        self.run_until(lambda: all(txd in g.results for g in self.live()) and self.quiescent())
        verdicts = {g.results[txd][1] for g in self.live()}
        if len(verdicts) != 1:
            raise DivergenceError("gateways recorded different decisions")
        return verdicts.pop()[0]

    # state push (broadcast of an already decided mutation) ----------------------

    def broadcast(self, origin: int, mutation: Union[Block, tuple[int, CommittedTransaction]]) -> DeliveryReport:
        """Push a block or a ``(block index, committed entry)`` from ``origin`` to every peer.

        Peers re-validate (re-executing context entries) and apply through their
        own engine; an identical mutation delivered twice is a detected no-op.
        """
        src = self.gateways[origin]
        if isinstance(mutation, Block):
            msg = Mutation(origin, mutation, None, None, self.sim.now)
        else:
            index, entry = mutation
            msg = Mutation(origin, None, index, entry, self.sim.now)
        report = DeliveryReport(origin)
        self._reports[id(msg)] = report
        targets = [g for g in self.live() if g is not src]
        for gw in targets:
            src.send(gw, msg)
        self.run_until(lambda: all(g.id in report.applied or g.id in report.duplicates or g.id in report.diverged
                                   for g in targets if not g.crashed))
        return report

    def _apply_mutation(self, gw: Gateway, msg: Mutation) -> None:
        report = self._reports.get(id(msg))
        try:
            duplicate = gw.engine.accept(msg.block if msg.block is not None else (msg.index, msg.entry))
        except (Rejection, BlockNotFound, ValueError) as exc:
            if report is not None:
                report.diverged[gw.id] = str(exc)
            return
        if report is not None:
            if duplicate:
                report.duplicates.add(gw.id)
            else:
                report.applied[gw.id] = self.sim.now - msg.sent_at


def perform_consensus(leader: Gateway, proposal: Transaction) -> bool:
    return leader.cluster.perform_consensus(proposal)


def broadcast(origin: Gateway, mutation) -> DeliveryReport:
    return origin.cluster.broadcast(origin.id, mutation)


@dataclass
class LaneSpec:
    """A sequential submitter: its steps go, one at a time, to ``gateway``."""
    steps: list
    gateway: int
    start_ns: int = 0


def run_network(nodes: int, cfg: NetConfig, workload: Sequence[LaneSpec],
                crash: Optional[tuple[int, int]] = None, vm=execute) -> tuple[RunTrace, Cluster]:
    """Drive ``workload`` lanes on a fresh ``nodes``-gateway cluster until done and quiescent."""
    cluster = Cluster(nodes, cfg, vm=vm)
    for lane in workload:
        cluster.add_device(lane.steps, lane.gateway % nodes, lane.start_ns)
    if crash is not None:
        cluster.crash(*crash)
    trace = cluster.run()
    cluster.check_replication()
    return trace, cluster
