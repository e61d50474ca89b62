"""Contract fixtures: the GPS-distance workload contract and a small storage cell.

Coordinates are fixed-point integers (degrees x 10**6).  Negative values are
passed as 256-bit two's complement; the wrapping difference squares to the
true value, so the contract needs no signed arithmetic.
"""
from __future__ import annotations

from .vm import WORD_MOD, assemble, contract_address

# Callee stack on entry: x1 y1 x2 y2.  Stores the result under the caller's
# address, bumps a call counter in slot 1, and returns the squared distance.
GPS_DISTANCE_SOURCE = """
DUP 3; SUB; DUP 1; MUL          # x1 y1 x2 dy^2
SWAP 1; DUP 4; SUB; DUP 1; MUL  # x1 y1 dy^2 dx^2
ADD                             # x1 y1 d
DUP 1; CALLER; SSTORE
PUSH1 1; SLOAD; PUSH1 1; ADD; PUSH1 1; SSTORE
RETURN1
"""
GPS_DISTANCE_CODE = assemble(GPS_DISTANCE_SOURCE)

# selector on top.  0: get(slot) -> word; 1: set(word, slot).
CELL_SOURCE = """
DUP 1; PUSH1 1; EQ; PUSH1 @set; JUMPI
POP; SLOAD; RETURN1
set: POP; SSTORE; HALT
"""
CELL_CODE = assemble(CELL_SOURCE)


def deploy_code(runtime: bytes) -> bytes:
    """Transaction data that deploys ``runtime`` as a new contract."""
    return bytes([0x50]) + runtime


def to_word(value: int) -> int:
    return value % WORD_MOD


def push32(value: int) -> str:
    return f"PUSH32 {to_word(value)}"


def gps_call_code(contract: bytes, device: tuple[int, int], target: tuple[int, int]) -> bytes:
    """Call data asking ``contract`` for the squared distance device -> target."""
    (x1, y1), (x2, y2) = device, target
    return assemble(
        "\n".join([
            push32(x1), push32(y1), push32(x2), push32(y2),
            "PUSH1 4", f"PUSH32 {int.from_bytes(contract, 'big')}", "CALL", "RETURN1",
        ])
    )


def cell_call_code(contract: bytes, selector: int, *args: int) -> bytes:
    lines = [push32(a) for a in args] + [f"PUSH1 {selector}", f"PUSH1 {len(args) + 1}",
                                         f"PUSH32 {int.from_bytes(contract, 'big')}", "CALL"]
    lines.append("RETURN1" if selector == 0 else "HALT")
    return assemble("\n".join(lines))


__all__ = [
    "GPS_DISTANCE_CODE", "GPS_DISTANCE_SOURCE", "CELL_CODE", "CELL_SOURCE",
    "deploy_code", "gps_call_code", "cell_call_code", "contract_address",
]
