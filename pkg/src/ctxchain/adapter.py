"""Newline-delimited JSON bridge to an out-of-process VM.

Request::

    {"id": int, "state_root": hex64 | null, "state_nodes": [hex],
     "bytecode": hex, "caller": hex40, "gas_limit": int}

Response::

    {"id": int, "status": "ok" | "error", "error_kind": str?,
     "new_root": hex64?, "new_nodes": [hex]?, "return_data": hex?, "gas_used": int?}

One request is in flight per connection.  Anything off-schema in a response
(bad JSON, a wrong id, missing or mistyped fields, nodes that do not hash to
the announced root) is reported as an AdapterFailure and leaves the local
store untouched.  Running this module starts the reference VM as a server on
stdin/stdout, which doubles as the loopback stub for differential tests.
"""
from __future__ import annotations

import json
import re
import sys
from typing import BinaryIO, Callable, Optional

from .state import CorruptNode, StateStore, UnknownRoot
from .vm import DEFAULT_GAS_LIMIT, ExecutionResult, VmError, VmErrorKind, execute

_HEX = re.compile(r"^(?:[0-9a-f]{2})*$")
_KINDS = {k.value: k for k in VmErrorKind if k is not VmErrorKind.ADAPTER_FAILURE}


def _failure(detail: str) -> VmError:
    return VmError(VmErrorKind.ADAPTER_FAILURE, detail)


class StreamChannel:
    """Client end of a byte-stream connection (pipes, sockets, subprocess stdio)."""

    def __init__(self, reader: BinaryIO, writer: BinaryIO):
        self.reader = reader
        self.writer = writer
        self.next_id = 1

    def exchange(self, line: bytes) -> bytes:
        self.writer.write(line + b"\n")
        self.writer.flush()
        reply = self.reader.readline()
        if not reply:
            raise EOFError("adapter closed the connection")
        return reply


class LoopbackChannel:
    """In-process channel answered by ``handle_request`` with the reference VM."""

    def __init__(self, handler: Callable[[bytes], bytes] = None):
        self.handler = handler or handle_request
        self.next_id = 1

    def exchange(self, line: bytes) -> bytes:
        return self.handler(line)


def encode_request(request_id: int, store: StateStore, state: Optional[bytes], code: bytes,
                   caller: bytes, gas_limit: int) -> bytes:
    nodes = [] if state is None else store.export_nodes(state)
    body = {
        "id": request_id,
        "state_root": None if state is None else state.hex(),
        "state_nodes": [rec.hex() for rec in nodes],
        "bytecode": bytes(code).hex(),
        "caller": caller.hex(),
        "gas_limit": gas_limit,
    }
    return json.dumps(body, separators=(",", ":"), sort_keys=True).encode()


def _hex_field(msg: dict, name: str, size: Optional[int] = None) -> bytes:
    value = msg.get(name)
    if not isinstance(value, str) or not _HEX.match(value):
        raise _failure(f"field {name!r} is not lowercase hex")
    raw = bytes.fromhex(value)
    if size is not None and len(raw) != size:
        raise _failure(f"field {name!r} must be {size} bytes")
    return raw


def _int_field(msg: dict, name: str) -> int:
    value = msg.get(name)
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise _failure(f"field {name!r} is not a non-negative integer")
    return value


def execute_external(channel, store: StateStore, state: Optional[bytes], code: bytes,
                     caller: bytes, gas_limit: int = DEFAULT_GAS_LIMIT) -> ExecutionResult:
    """Same contract as ``vm.execute`` but delegated over ``channel``."""
    if state is not None and not store.is_known(state):
        raise UnknownRoot(state.hex())
    request_id = channel.next_id
    channel.next_id += 1
    line = encode_request(request_id, store, state, code, caller, gas_limit)
    try:
        reply = channel.exchange(line)
    except (OSError, EOFError, ValueError) as exc:
        raise _failure(f"transport: {exc}") from None

    try:
        msg = json.loads(reply)
    except (ValueError, UnicodeDecodeError):
        raise _failure("response is not JSON") from None
    if not isinstance(msg, dict):
        raise _failure("response is not a JSON object")
    if msg.get("id") != request_id or isinstance(msg.get("id"), bool):
        raise _failure(f"response id {msg.get('id')!r} does not echo {request_id}")
    status = msg.get("status")
    if status == "error":
        kind = _KINDS.get(msg.get("error_kind"))
        if kind is None:
            raise _failure(f"unknown error kind {msg.get('error_kind')!r}")
        raise VmError(kind, "reported by adapter")
    if status != "ok":
        raise _failure(f"bad status {status!r}")

    new_root = _hex_field(msg, "new_root", 32)
    return_data = _hex_field(msg, "return_data")
    gas_used = _int_field(msg, "gas_used")
    if gas_used > gas_limit:
        raise _failure("gas_used exceeds the gas limit")
    nodes = msg.get("new_nodes")
    if not isinstance(nodes, list):
        raise _failure("field 'new_nodes' is not a list")
    records = []
    for item in nodes:
        if not isinstance(item, str) or not _HEX.match(item):
            raise _failure("new_nodes entries must be hex strings")
        records.append(bytes.fromhex(item))

    overlay = store.overlay()
    try:
        overlay.import_nodes(records)
        overlay.register_root(new_root)
    except (CorruptNode, ValueError) as exc:
        raise _failure(f"returned state is incomplete: {exc}") from None
    overlay.commit()
    return ExecutionResult(new_root, return_data, gas_used)


def handle_request(line: bytes, vm=execute) -> bytes:
    """Server side: answer one request line with the reference VM."""
    try:
        msg = json.loads(line)
        request_id = msg["id"]
        store = StateStore()
        store.import_nodes(bytes.fromhex(h) for h in msg["state_nodes"])
        state = msg["state_root"]
        if state is not None:
            state = bytes.fromhex(state)
            store.register_root(state)
        before = set(store.all_nodes())
        result = vm(store, state, bytes.fromhex(msg["bytecode"]), bytes.fromhex(msg["caller"]), msg["gas_limit"])
    except VmError as exc:
        body = {"id": request_id, "status": "error", "error_kind": exc.kind.value}
    except Exception as exc:  # malformed request; report as adapter failure
        body = {"id": locals().get("request_id"), "status": "error", "error_kind": "AdapterFailure",
                "detail": str(exc)}
    else:
        nodes = store.all_nodes()
        fresh = sorted(h for h in store.reachable(result.new_root) if h not in before)
        body = {
            "id": request_id,
            "status": "ok",
            "new_root": result.new_root.hex(),
            "new_nodes": [nodes[h].hex() for h in fresh],
            "return_data": result.return_data.hex(),
            "gas_used": result.gas_used,
        }
    return json.dumps(body, separators=(",", ":"), sort_keys=True).encode()


def serve(reader: BinaryIO, writer: BinaryIO) -> None:
    for line in reader:
        if not line.strip():
            continue
        writer.write(handle_request(line.strip()) + b"\n")
        writer.flush()


def main() -> None:
    serve(sys.stdin.buffer, sys.stdout.buffer)


if __name__ == "__main__":
    main()
