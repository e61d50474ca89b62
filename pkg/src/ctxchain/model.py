"""Blocks, transactions and the pure queries over an appendable-block chain.

Canonical encoding
------------------
Every entity is encoded as a one-byte type tag followed by its fields in
declaration order.  A field is a 4-byte big-endian length followed by the raw
bytes.  Optional fields are preceded by a presence byte (0 absent, 1 present);
an absent field is then encoded with length 0.  Integers are 8-byte big-endian
and signatures are the 65-byte ``r || s || recovery_id`` form.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .crypto import (
    DIGEST_SIZE,
    NULL_SIGNATURE,
    PUBKEY_SIZE,
    ZERO_DIGEST,
    KeyPair,
    RecoverableSignature,
    RecoveryFailure,
    digest,
    recover,
    sign,
)

TAG_TRANSACTION = b"T"
TAG_COMMITTED = b"C"
TAG_HEADER = b"H"
TAG_SIGNING = b"S"
TAG_CHAIN = b"B"


class BlockNotFound(LookupError):
    pass


class GenesisQuery(ValueError):
    """has_context is undefined on the genesis block."""


class DecodeError(ValueError):
    pass


class OpCode(enum.IntEnum):
    NEW_PURE_DATA_BLOCK = 1
    NEW_CONTEXT_BLOCK = 2
    APPEND = 3


def _lp(raw: bytes) -> bytes:
    return struct.pack(">I", len(raw)) + raw


def _opt(raw: Optional[bytes]) -> bytes:
    if raw is None:
        return b"\x00" + _lp(b"")
    return b"\x01" + _lp(raw)


def _u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def _check_digest(name: str, value: bytes) -> None:
    if not isinstance(value, bytes) or len(value) != DIGEST_SIZE:
        raise ValueError(f"{name} must be a {DIGEST_SIZE}-byte digest")


@dataclass(frozen=True)
class Transaction:
    data: bytes
    to_block: Optional[int]
    sig: RecoverableSignature
    pt: bytes
    opcode: OpCode

    def __post_init__(self):
        _check_digest("pt", self.pt)
        opcode = OpCode(self.opcode)
        if opcode is OpCode.APPEND and self.to_block is None:
            raise ValueError("append transactions need a destination block")
        if opcode is not OpCode.APPEND and self.to_block is not None:
            raise ValueError("block-creating transactions cannot name a destination block")
        if self.to_block is not None and self.to_block < 0:
            raise ValueError("to_block must be non-negative")

    @staticmethod
    def signing_payload(data: bytes, to_block: Optional[int], pt: bytes, opcode: int) -> bytes:
        return (
            TAG_SIGNING
            + _lp(data)
            + _opt(None if to_block is None else _u64(to_block))
            + _lp(pt)
            + _lp(_u64(int(opcode)))
        )

    @classmethod
    def create(
        cls,
        keys: KeyPair,
        data: bytes,
        opcode: OpCode,
        to_block: Optional[int] = None,
        pt: bytes = ZERO_DIGEST,
    ) -> "Transaction":
        payload = cls.signing_payload(data, to_block, pt, opcode)
        return cls(data, to_block, sign(keys.secret, payload), pt, OpCode(opcode))

    @property
    def payload(self) -> bytes:
        return self.signing_payload(self.data, self.to_block, self.pt, self.opcode)

    def signer(self) -> bytes:
        """Recovered public key; raises RecoveryFailure."""
        return recover(self.sig, self.payload)

    def committed(self, state_root: Optional[bytes]) -> "CommittedTransaction":
        return CommittedTransaction(self.data, self.sig, self.pt, state_root)


@dataclass(frozen=True)
class CommittedTransaction:
    data: bytes
    sig: RecoverableSignature
    pt: bytes
    state_root: Optional[bytes] = None

    def __post_init__(self):
        _check_digest("pt", self.pt)
        if self.state_root is not None:
            _check_digest("state_root", self.state_root)


@dataclass(frozen=True)
class BlockHeader:
    parent_hash: bytes
    index: int
    owner: Optional[bytes]
    first_ct: CommittedTransaction

    def __post_init__(self):
        _check_digest("parent_hash", self.parent_hash)
        if self.index < 0:
            raise ValueError("index must be non-negative")


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    ledger: tuple[CommittedTransaction, ...] = ()

    @property
    def index(self) -> int:
        return self.header.index

    @property
    def owner(self) -> Optional[bytes]:
        return self.header.owner


@dataclass(frozen=True)
class Blockchain:
    blocks: tuple[Block, ...]
    owner_index: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def with_block(self, block: Block) -> "Blockchain":
        """Return a chain with ``block`` appended as the new last block."""
        owners = self.owner_index
        if block.owner is not None:
            owners = {**owners, block.owner: block.index}
        return Blockchain(self.blocks + (block,), owners)

    def replacing(self, block: Block) -> "Blockchain":
        i = block.index
        return Blockchain(self.blocks[:i] + (block,) + self.blocks[i + 1:], self.owner_index)

    def owns_block(self, public: bytes) -> bool:
        return public in self.owner_index


# -- encoding ---------------------------------------------------------------

def canonical_encode(entity) -> bytes:
    if isinstance(entity, Transaction):
        return (
            TAG_TRANSACTION
            + _lp(entity.data)
            + _opt(None if entity.to_block is None else _u64(entity.to_block))
            + _lp(entity.sig.to_bytes())
            + _lp(entity.pt)
            + _lp(_u64(int(entity.opcode)))
        )
    if isinstance(entity, CommittedTransaction):
        return (
            TAG_COMMITTED
            + _lp(entity.data)
            + _lp(entity.sig.to_bytes())
            + _lp(entity.pt)
            + _opt(entity.state_root)
        )
    if isinstance(entity, BlockHeader):
        return (
            TAG_HEADER
            + _lp(entity.parent_hash)
            + _lp(_u64(entity.index))
            + _opt(entity.owner)
            + _lp(canonical_encode(entity.first_ct))
        )
    raise TypeError(f"cannot encode {type(entity).__name__}")


def encode_chain(chain: Blockchain) -> bytes:
    """Whole-chain snapshot: every header followed by its ledger entries."""
    out = [TAG_CHAIN, _u64(len(chain.blocks))]
    for block in chain.blocks:
        out.append(_lp(canonical_encode(block.header)))
        out.append(_u64(len(block.ledger)))
        out.extend(_lp(canonical_encode(ct)) for ct in block.ledger)
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DecodeError("truncated input")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def lp(self) -> bytes:
        (n,) = struct.unpack(">I", self.take(4))
        return self.take(n)

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def u64_field(self) -> int:
        raw = self.lp()
        if len(raw) != 8:
            raise DecodeError("integer field must be 8 bytes")
        return struct.unpack(">Q", raw)[0]

    def opt(self) -> Optional[bytes]:
        flag = self.take(1)
        value = self.lp()
        if flag == b"\x00":
            if value:
                raise DecodeError("absent optional with payload")
            return None
        if flag != b"\x01":
            raise DecodeError("bad presence byte")
        return value

    def tag(self, expected: bytes) -> None:
        if self.take(1) != expected:
            raise DecodeError(f"expected tag {expected!r}")

    def done(self) -> None:
        if self.pos != len(self.raw):
            raise DecodeError("trailing bytes")


def _sig(raw: bytes) -> RecoverableSignature:
    try:
        return RecoverableSignature.from_bytes(raw)
    except ValueError as exc:
        raise DecodeError(str(exc)) from None


def decode_transaction(raw: bytes) -> Transaction:
    r = _Reader(raw)
    r.tag(TAG_TRANSACTION)
    data = r.lp()
    to_raw = r.opt()
    if to_raw is not None and len(to_raw) != 8:
        raise DecodeError("to_block must be 8 bytes")
    sig = _sig(r.lp())
    pt = r.lp()
    opcode = r.u64_field()
    r.done()
    try:
        return Transaction(
            data, None if to_raw is None else struct.unpack(">Q", to_raw)[0], sig, pt, OpCode(opcode)
        )
    except ValueError as exc:
        raise DecodeError(str(exc)) from None


def decode_committed(raw: bytes) -> CommittedTransaction:
    r = _Reader(raw)
    r.tag(TAG_COMMITTED)
    data = r.lp()
    sig = _sig(r.lp())
    pt = r.lp()
    root = r.opt()
    r.done()
    try:
        return CommittedTransaction(data, sig, pt, root)
    except ValueError as exc:
        raise DecodeError(str(exc)) from None


def decode_header(raw: bytes) -> BlockHeader:
    r = _Reader(raw)
    r.tag(TAG_HEADER)
    parent = r.lp()
    index = r.u64_field()
    owner = r.opt()
    first = decode_committed(r.lp())
    r.done()
    try:
        return BlockHeader(parent, index, owner, first)
    except ValueError as exc:
        raise DecodeError(str(exc)) from None


def decode_chain(raw: bytes) -> Blockchain:
    r = _Reader(raw)
    r.tag(TAG_CHAIN)
    n_blocks = r.u64()
    if n_blocks > len(raw):
        raise DecodeError("implausible block count")
    blocks = []
    owners: dict[bytes, int] = {}
    for _ in range(n_blocks):
        header = decode_header(r.lp())
        n_entries = r.u64()
        if n_entries > len(raw):
            raise DecodeError("implausible ledger length")
        ledger = tuple(decode_committed(r.lp()) for _ in range(n_entries))
        if header.owner is not None:
            owners.setdefault(header.owner, header.index)
        blocks.append(Block(header, ledger))
    r.done()
    return Blockchain(tuple(blocks), owners)


# -- queries ----------------------------------------------------------------

def header_hash(header: BlockHeader) -> bytes:
    return digest(canonical_encode(header))


def ct_hash(ct: CommittedTransaction) -> bytes:
    return digest(canonical_encode(ct))


GENESIS_CT = CommittedTransaction(b"", NULL_SIGNATURE, ZERO_DIGEST, None)
GENESIS = Block(BlockHeader(ZERO_DIGEST, 0, None, GENESIS_CT))


def new_chain() -> Blockchain:
    return Blockchain((GENESIS,), {})


def last_block(chain: Blockchain) -> Block:
    return chain.blocks[-1]


def get_block(chain: Blockchain, index: int) -> Block:
    if index < 0 or index >= len(chain.blocks):
        raise BlockNotFound(f"no block with index {index}")
    return chain.blocks[index]


def has_context(block: Block) -> bool:
    if block.index == 0:
        raise GenesisQuery("the genesis block has neither owner nor context")
    return block.header.owner is None


def pre_ct_hash(block: Block) -> bytes:
    if not block.ledger:
        return header_hash(block.header)
    return ct_hash(block.ledger[-1])


def last_ct(block: Block) -> CommittedTransaction:
    if not block.ledger:
        return block.header.first_ct
    return block.ledger[-1]


def creation_payload(block: Block) -> bytes:
    """Signing payload of the transaction that created ``block``."""
    opcode = OpCode.NEW_PURE_DATA_BLOCK if block.owner is not None else OpCode.NEW_CONTEXT_BLOCK
    ct = block.header.first_ct
    return Transaction.signing_payload(ct.data, None, ct.pt, opcode)


def append_payload(block: Block, ct: CommittedTransaction) -> bytes:
    return Transaction.signing_payload(ct.data, block.index, ct.pt, OpCode.APPEND)


# -- validation -------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    rule: str
    block: int
    entry: Optional[int] = None  # None = header; k = ledger position
    detail: str = ""


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}

    def add(self, rule: str, block: int, entry: Optional[int] = None, detail: str = "") -> None:
        self.violations.append(Violation(rule, block, entry, detail))


# replay(prev_root or None, data, caller public key) -> new root, raising on VM failure
Replay = Callable[[Optional[bytes], bytes, bytes], bytes]


def validate_chain(chain: Blockchain, replay: Optional[Replay] = None) -> ValidationReport:
    """Audit every structural invariant of ``chain``.

    With ``replay`` given, context blocks are re-executed from the empty state
    and every recorded state root is compared against the recomputed one.
    """
    report = ValidationReport()
    blocks = chain.blocks
    if not blocks:
        report.add("non-empty", 0, detail="chain has no genesis block")
        return report
    if blocks[0] != GENESIS:
        report.add("genesis", 0, detail="block 0 is not the canonical genesis block")

    owners: dict[bytes, int] = {}
    prev_hash = None
    for pos, block in enumerate(blocks):
        header = block.header
        if header.index != pos:
            report.add("index", pos, detail=f"header index {header.index} at position {pos}")
        if pos > 0 and header.parent_hash != prev_hash:
            report.add("parent-hash", pos, detail="parent_hash does not match previous header")
        prev_hash = header_hash(header)
        if pos == 0:
            if block.ledger:
                report.add("genesis", 0, detail="genesis ledger must be empty")
            continue

        if header.owner is not None:
            if len(header.owner) != PUBKEY_SIZE:
                report.add("owner-key", pos, detail="owner is not a compressed public key")
            if header.owner in owners:
                report.add("owner-unique", pos, detail=f"owner already owns block {owners[header.owner]}")
            else:
                owners[header.owner] = pos
        context = header.owner is None

        _check_signature(report, block, None, header.first_ct, creation_payload(block))
        for k, ct in enumerate(block.ledger):
            _check_signature(report, block, k, ct, append_payload(block, ct))

        entries = (header.first_ct,) + block.ledger
        for k, ct in enumerate(entries):
            slot = None if k == 0 else k - 1
            if context and ct.state_root is None:
                report.add("state-root", pos, slot, "context entry without state root")
            if not context and ct.state_root is not None:
                report.add("state-root", pos, slot, "pure-data entry with a state root")

        expected = prev_hash
        for k, ct in enumerate(block.ledger):
            if ct.pt != expected:
                report.add("pt-link", pos, k, "pt does not point to the previous entry")
            expected = ct_hash(ct)

        if context and replay is not None:
            _replay_block(report, block, replay)

    if dict(chain.owner_index) != owners and report.ok:
        report.add("owner-index", 0, detail="owner index disagrees with block headers")
    return report


def _check_signature(report, block: Block, k, ct: CommittedTransaction, payload: bytes) -> None:
    try:
        signer = recover(ct.sig, payload)
    except RecoveryFailure as exc:
        report.add("signature", block.index, k, f"recovery failed: {exc}")
        return
    if block.owner is not None and signer != block.owner:
        report.add("signer-owner", block.index, k, "entry not signed by the block owner")


def _replay_block(report, block: Block, replay: Replay) -> None:
    root = None
    entries = [(None, block.header.first_ct, creation_payload(block))]
    entries += [(k, ct, append_payload(block, ct)) for k, ct in enumerate(block.ledger)]
    for k, ct, payload in entries:
        try:
            caller = recover(ct.sig, payload)
            root = replay(root, ct.data, caller)
        except Exception as exc:  # any failure means the recorded entry cannot be reproduced
            report.add("state-replay", block.index, k, f"replay failed: {exc}")
            return
        if root != ct.state_root:
            report.add("state-replay", block.index, k, "recorded state root differs from replay")
            root = ct.state_root
            if root is None:
                return


def dump_chain(chain: Blockchain) -> str:
    """Human-readable chain listing used for golden files and debugging."""
    lines = []
    for block in chain.blocks:
        h = block.header
        kind = "genesis" if h.index == 0 else ("context" if h.owner is None else "pure-data")
        owner = h.owner.hex() if h.owner else "-"
        lines.append(f"block {h.index} [{kind}] hash={header_hash(h).hex()[:16]} parent={h.parent_hash.hex()[:16]} owner={owner[:16]}")
        for k, ct in enumerate((h.first_ct,) + block.ledger):
            label = "first" if k == 0 else f"{k - 1:5d}"
            root = ct.state_root.hex()[:16] if ct.state_root else "-"
            lines.append(f"  {label} pt={ct.pt.hex()[:16]} data={len(ct.data)}B root={root}")
    return "\n".join(lines) + "\n"


def transactions(chain: Blockchain) -> Iterable[CommittedTransaction]:
    for block in chain.blocks:
        yield block.header.first_ct
        yield from block.ledger


__all__ = [
    "OpCode", "Transaction", "CommittedTransaction", "BlockHeader", "Block", "Blockchain",
    "canonical_encode", "encode_chain", "decode_chain", "decode_transaction", "decode_committed",
    "decode_header", "header_hash", "ct_hash", "last_block", "get_block", "has_context",
    "pre_ct_hash", "last_ct", "validate_chain", "ValidationReport", "Violation", "dump_chain",
    "new_chain", "GENESIS", "BlockNotFound", "GenesisQuery", "DecodeError",
]
