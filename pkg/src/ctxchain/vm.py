"""Reference stack machine for context-block smart contracts.

One-byte opcodes with inline operands, 256-bit unsigned wrapping words, and
a flat gas schedule.  ``execute`` never mutates the store on failure: writes
are buffered in a per-execution working set and flushed with a single
``StateStore.update`` call only when the program finishes cleanly.

Binary operators take the deeper operand first, so ``PUSH1 5; PUSH1 3; SUB``
leaves 2.  ``SSTORE`` pops the slot then the word; ``JUMPI`` pops the target
then the condition; ``CALL`` pops the address, the argument count, then the
arguments, which start the callee's stack in their original order.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

from .crypto import ADDRESS_SIZE, digest
from .state import ZERO_WORD, StateStore

WORD_MOD = 1 << 256
STACK_LIMIT = 1024
CALL_DEPTH_LIMIT = 64
DEFAULT_GAS_LIMIT = 100_000

# Reserved account holding the per-context creation counter in slot 0.
SYSTEM_ADDRESS = bytes(ADDRESS_SIZE)


class Op(enum.IntEnum):
    HALT = 0x00
    PUSH1 = 0x01
    PUSH32 = 0x02
    POP = 0x03
    DUP = 0x04
    SWAP = 0x05
    ADD = 0x10
    SUB = 0x11
    MUL = 0x12
    DIV = 0x13
    LT = 0x14
    EQ = 0x15
    JUMP = 0x20
    JUMPI = 0x21
    SLOAD = 0x30
    SSTORE = 0x31
    CALLER = 0x40
    CREATE = 0x50
    CALL = 0x51
    RETURN1 = 0x60
    RETURNN = 0x61
    REVERT = 0x62


OPERAND_SIZE = {Op.PUSH1: 1, Op.PUSH32: 32, Op.DUP: 1, Op.SWAP: 1}
GAS_COST = {Op.SSTORE: 20, Op.CREATE: 20}


class VmErrorKind(str, enum.Enum):
    INVALID_BYTECODE = "InvalidBytecode"
    OUT_OF_GAS = "OutOfGas"
    STACK_VIOLATION = "StackViolation"
    CROSS_CONTEXT_CALL = "CrossContextCall"
    EXPLICIT_REVERT = "ExplicitRevert"
    ADAPTER_FAILURE = "AdapterFailure"

    @property
    def deterministic(self) -> bool:
        return self is not VmErrorKind.ADAPTER_FAILURE


class VmError(Exception):
    def __init__(self, kind: VmErrorKind, detail: str = ""):
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)
        self.kind = VmErrorKind(kind)
        self.detail = detail

    def __eq__(self, other):
        return isinstance(other, VmError) and (self.kind, self.detail) == (other.kind, other.detail)

    def __hash__(self):
        return hash((self.kind, self.detail))


class ParseError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class ExecutionResult:
    new_root: bytes
    return_data: bytes
    gas_used: int


# -- decoding ---------------------------------------------------------------

@dataclass(frozen=True)
class Instruction:
    offset: int
    op: Op
    operand: bytes = b""


def decode(code: bytes) -> list[Instruction]:
    """Split ``code`` into instructions; everything after CREATE is its payload."""
    out = []
    pc = 0
    while pc < len(code):
        try:
            op = Op(code[pc])
        except ValueError:
            raise VmError(VmErrorKind.INVALID_BYTECODE, f"unknown opcode 0x{code[pc]:02x} at {pc}") from None
        size = OPERAND_SIZE.get(op, 0)
        if op is Op.CREATE:
            size = len(code) - pc - 1
        operand = code[pc + 1:pc + 1 + size]
        if len(operand) != size:
            raise VmError(VmErrorKind.INVALID_BYTECODE, f"truncated operand for {op.name} at {pc}")
        if op in (Op.DUP, Op.SWAP) and not 1 <= operand[0] <= 16:
            raise VmError(VmErrorKind.INVALID_BYTECODE, f"{op.name} depth {operand[0]} out of range at {pc}")
        out.append(Instruction(pc, op, operand))
        pc += 1 + size
    return out


@lru_cache(maxsize=4096)
def _decoded(code: bytes):
    program = tuple(decode(code))
    return program, {ins.offset: i for i, ins in enumerate(program)}


_MNEMONICS = {op.name: op for op in Op}
_TOKEN = re.compile(r"\S+")


def assemble(source: str) -> bytes:
    """Assemble mnemonic text into bytecode.

    Statements are separated by newlines or ``;``; ``#`` starts a comment.
    ``name:`` defines a label and ``@name`` used as an operand resolves to its
    byte offset.  ``CREATE`` takes an optional hex payload (``CREATE 0x...``).
    """
    items = []  # (line, col, op, operand token or None)
    labels: dict[str, int] = {}
    offset = 0
    for lineno, line in enumerate(source.splitlines() or [""], start=1):
        body = line.split("#", 1)[0]
        col_base = 0
        for stmt in body.split(";"):
            tokens = [(m.group(), m.start() + col_base + 1) for m in _TOKEN.finditer(stmt)]
            col_base += len(stmt) + 1
            if not tokens:
                continue
            while tokens and tokens[0][0].endswith(":"):
                name, col = tokens.pop(0)
                name = name[:-1]
                if not name or name in labels:
                    raise ParseError(f"bad or duplicate label {name!r}", lineno, col)
                labels[name] = offset
            if not tokens:
                continue
            word, col = tokens[0]
            op = _MNEMONICS.get(word.upper())
            if op is None:
                raise ParseError(f"unknown mnemonic {word!r}", lineno, col)
            args = tokens[1:]
            if op is Op.CREATE:
                if len(args) > 1:
                    raise ParseError("CREATE takes at most one payload", lineno, col)
                payload = _parse_hex(args[0], lineno) if args else b""
                items.append((lineno, col, op, payload))
                offset += 1 + len(payload)
                continue
            need = 1 if op in OPERAND_SIZE else 0
            if len(args) != need:
                raise ParseError(f"{op.name} expects {need} operand(s)", lineno, col)
            items.append((lineno, col, op, args[0] if args else None))
            offset += 1 + OPERAND_SIZE.get(op, 0)

    out = bytearray()
    for lineno, col, op, arg in items:
        out.append(op)
        if op is Op.CREATE:
            out += arg
            continue
        if arg is None:
            continue
        text, acol = arg
        if text.startswith("@"):
            if text[1:] not in labels:
                raise ParseError(f"undefined label {text[1:]!r}", lineno, acol)
            value = labels[text[1:]]
        else:
            try:
                value = int(text, 0)
            except ValueError:
                raise ParseError(f"bad operand {text!r}", lineno, acol) from None
        size = OPERAND_SIZE[op]
        if not 0 <= value < (1 << (8 * size)):
            raise ParseError(f"operand {text} does not fit {op.name}", lineno, acol)
        if op in (Op.DUP, Op.SWAP) and not 1 <= value <= 16:
            raise ParseError(f"{op.name} depth must be 1..16", lineno, acol)
        out += value.to_bytes(size, "big")
    return bytes(out)


def _parse_hex(token, lineno) -> bytes:
    text, col = token
    raw = text[2:] if text.lower().startswith("0x") else text
    try:
        return bytes.fromhex(raw)
    except ValueError:
        raise ParseError(f"bad hex payload {text!r}", lineno, col) from None


def disassemble(code: bytes) -> str:
    lines = []
    for ins in decode(code):
        if ins.op is Op.CREATE:
            lines.append(f"CREATE 0x{ins.operand.hex()}" if ins.operand else "CREATE")
        elif ins.operand:
            lines.append(f"{ins.op.name} {int.from_bytes(ins.operand, 'big')}")
        else:
            lines.append(ins.op.name)
    return "\n".join(lines)


# -- execution --------------------------------------------------------------

def contract_address(creator: bytes, counter: int) -> bytes:
    """Address of the ``counter``-th contract created in this context by ``creator``.

    The counter is hashed as a full word: it lives in ordinary storage, so any
    value a program manages to leave there must still map to an address.
    """
    return digest(creator + counter.to_bytes(32, "big"))[-ADDRESS_SIZE:]


def word_to_address(word: int) -> bytes:
    return (word % (1 << 160)).to_bytes(ADDRESS_SIZE, "big")


def address_to_word(address: bytes) -> int:
    return int.from_bytes(address, "big")


class _WorkingSet:
    """Buffered view of one context's accounts during a single execution."""

    def __init__(self, store: StateStore, root: bytes):
        self.store = store
        self.root = root
        self._records: dict[bytes, Optional[tuple[bytes, bytes]]] = {}
        self.code: dict[bytes, bytes] = {}
        self.writes: dict[bytes, dict[bytes, bytes]] = {}

    def _record(self, address):
        if address not in self._records:
            self._records[address] = self.store.account_record(self.root, address)
        return self._records[address]

    def exists(self, address: bytes) -> bool:
        if address in self.code or any(v != ZERO_WORD for v in self.writes.get(address, {}).values()):
            return True
        return self._record(address) is not None

    def get_code(self, address: bytes) -> bytes:
        if address in self.code:
            return self.code[address]
        rec = self._record(address)
        return rec[0] if rec else b""

    def sload(self, address: bytes, slot: bytes) -> bytes:
        pending = self.writes.get(address)
        if pending is not None and slot in pending:
            return pending[slot]
        rec = self._record(address)
        if rec is None:
            return ZERO_WORD
        return self.store.storage_get(rec[1], slot)

    def sstore(self, address: bytes, slot: bytes, word: bytes) -> None:
        self.writes.setdefault(address, {})[slot] = word

    def changes(self):
        out = {}
        for address in set(self.code) | set(self.writes):
            out[address] = (self.code.get(address), self.writes.get(address, {}))
        return out


class _Machine:
    def __init__(self, world: _WorkingSet, gas_limit: int):
        self.world = world
        self.gas_limit = gas_limit
        self.gas_used = 0

    def charge(self, op: Op) -> None:
        cost = GAS_COST.get(op, 1)
        if self.gas_used + cost > self.gas_limit:
            self.gas_used = self.gas_limit
            raise VmError(VmErrorKind.OUT_OF_GAS, f"gas limit {self.gas_limit} exhausted")
        self.gas_used += cost

    def run(self, code: bytes, address: bytes, caller: bytes, stack: list[int], depth: int) -> bytes:
        program, by_offset = _decoded(code)
        world = self.world
        i = 0
        while i < len(program):
            ins = program[i]
            op = ins.op
            self.charge(op)
            i += 1
            if op is Op.HALT:
                return b""
            if op is Op.PUSH1 or op is Op.PUSH32:
                self._push(stack, int.from_bytes(ins.operand, "big"))
            elif op is Op.POP:
                self._pop(stack, 1)
            elif op is Op.DUP:
                n = ins.operand[0]
                if len(stack) < n:
                    raise VmError(VmErrorKind.STACK_VIOLATION, f"DUP {n} on stack of {len(stack)}")
                self._push(stack, stack[-n])
            elif op is Op.SWAP:
                n = ins.operand[0]
                if len(stack) < n + 1:
                    raise VmError(VmErrorKind.STACK_VIOLATION, f"SWAP {n} on stack of {len(stack)}")
                stack[-1], stack[-1 - n] = stack[-1 - n], stack[-1]
            elif op in _BINARY:
                a, b = self._pop(stack, 2)
                self._push(stack, _BINARY[op](a, b) % WORD_MOD)
            elif op is Op.JUMP or op is Op.JUMPI:
                if op is Op.JUMP:
                    (target,) = self._pop(stack, 1)
                    cond = 1
                else:
                    cond, target = self._pop(stack, 2)
                if cond:
                    if target not in by_offset:
                        raise VmError(VmErrorKind.INVALID_BYTECODE, f"jump to non-instruction offset {target}")
                    i = by_offset[target]
            elif op is Op.SLOAD:
                (slot,) = self._pop(stack, 1)
                self._push(stack, int.from_bytes(world.sload(address, slot.to_bytes(32, "big")), "big"))
            elif op is Op.SSTORE:
                word, slot = self._pop(stack, 2)
                world.sstore(address, slot.to_bytes(32, "big"), word.to_bytes(32, "big"))
            elif op is Op.CALLER:
                self._push(stack, address_to_word(caller))
            elif op is Op.CREATE:
                counter = int.from_bytes(world.sload(SYSTEM_ADDRESS, ZERO_WORD), "big")
                new = contract_address(address, counter)
                world.sstore(SYSTEM_ADDRESS, ZERO_WORD, ((counter + 1) % WORD_MOD).to_bytes(32, "big"))
                world.code[new] = ins.operand
                return new.rjust(32, b"\x00")
            elif op is Op.CALL:
                argc, target_word = self._pop(stack, 2)
                if argc > len(stack):
                    raise VmError(VmErrorKind.STACK_VIOLATION, f"CALL with {argc} arguments on stack of {len(stack)}")
                args = stack[len(stack) - argc:] if argc else []
                del stack[len(stack) - argc:]
                target = word_to_address(target_word)
                if not world.exists(target):
                    raise VmError(VmErrorKind.CROSS_CONTEXT_CALL, f"no account {target.hex()} in this context")
                if depth + 1 >= CALL_DEPTH_LIMIT:
                    raise VmError(VmErrorKind.STACK_VIOLATION, "call depth limit reached")
                out = self.run(world.get_code(target), target, address, list(args), depth + 1)
                for k in range(0, len(out), 32):
                    self._push(stack, int.from_bytes(out[k:k + 32], "big"))
            elif op is Op.RETURN1:
                (value,) = self._pop(stack, 1)
                return value.to_bytes(32, "big")
            elif op is Op.RETURNN:
                (n,) = self._pop(stack, 1)
                if n > len(stack):
                    raise VmError(VmErrorKind.STACK_VIOLATION, f"RETURNN {n} on stack of {len(stack)}")
                words = stack[len(stack) - n:] if n else []
                return b"".join(w.to_bytes(32, "big") for w in words)
            elif op is Op.REVERT:
                raise VmError(VmErrorKind.EXPLICIT_REVERT, f"REVERT at offset {ins.offset}")
        return b""

    @staticmethod
    def _push(stack, value):
        if len(stack) >= STACK_LIMIT:
            raise VmError(VmErrorKind.STACK_VIOLATION, "stack overflow")
        stack.append(value)

    @staticmethod
    def _pop(stack, n):
        if len(stack) < n:
            raise VmError(VmErrorKind.STACK_VIOLATION, f"stack underflow: need {n}, have {len(stack)}")
        out = stack[-n:]
        del stack[-n:]
        return out


_BINARY = {
    Op.ADD: lambda a, b: a + b,
    Op.SUB: lambda a, b: a - b,
    Op.MUL: lambda a, b: a * b,
    Op.DIV: lambda a, b: a // b if b else 0,
    Op.LT: lambda a, b: int(a < b),
    Op.EQ: lambda a, b: int(a == b),
}


def execute(
    store: StateStore,
    state: Optional[bytes],
    code: bytes,
    caller: bytes,
    gas_limit: int = DEFAULT_GAS_LIMIT,
) -> ExecutionResult:
    """Run ``code`` against ``state`` (the empty state when None).

    The top-level frame executes as ``caller``'s account.  Raises VmError;
    the store is only written when execution succeeds.
    """
    if gas_limit <= 0:
        raise ValueError("gas_limit must be positive")
    if len(caller) != ADDRESS_SIZE:
        raise ValueError("caller must be a 20-byte address")
    root = store.empty_root() if state is None else state
    world = _WorkingSet(store, root)
    world._record(caller)  # raises UnknownRoot early for bad roots
    machine = _Machine(world, gas_limit)
    out = machine.run(bytes(code), caller, caller, [], 0)
    changes = world.changes()
    new_root = store.update(root, changes) if changes else root
    return ExecutionResult(new_root, out, machine.gas_used)
