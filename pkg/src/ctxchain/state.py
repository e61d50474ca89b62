"""Content-addressed, copy-on-write state store for context blocks.

Accounts live in a binary Merkle trie keyed by ``digest(address)``.  A
subtree holding no keys is the empty node, a subtree holding exactly one key
is a leaf, and anything larger is a branch on the next key bit.  That shape
depends only on the key set, so equal mappings always produce equal roots.

Node records (the unit of storage, snapshots and the adapter wire format)::

    empty   0x00
    leaf    0x01 || key(32) || slot(32) || word(32)        (storage)
    leaf    0x03 || key(32) || account value               (account)
    branch  0x02 || left_hash(32) || right_hash(32)

and a node's hash is the digest of its record.  An account leaf's value is
``address(20) || len(code)(4) || code || storage_root(32)``.  Each account's storage is its own trie in
the same node table.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, Mapping, Optional

from .crypto import ADDRESS_SIZE, digest

EMPTY_RECORD = b"\x00"
EMPTY_HASH = digest(EMPTY_RECORD)
LEAF = 1
BRANCH = 2
ACCOUNT = 3
LEAVES = (LEAF, ACCOUNT)
ZERO_WORD = bytes(32)

SNAPSHOT_MAGIC = b"CTXSTATE"
SNAPSHOT_VERSION = 1


class UnknownRoot(KeyError):
    pass


class CorruptNode(ValueError):
    pass


@dataclass(frozen=True)
class Account:
    address: bytes
    code: bytes = b""
    storage: Mapping[bytes, bytes] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.address) != ADDRESS_SIZE:
            raise ValueError("address must be 20 bytes")
        for k, v in self.storage.items():
            if len(k) != 32 or len(v) != 32:
                raise ValueError("storage keys and values must be 32 bytes")

    @property
    def is_empty(self) -> bool:
        return not self.code and not any(v != ZERO_WORD for v in self.storage.values())


def _bit(key: bytes, depth: int) -> int:
    return (key[depth >> 3] >> (7 - (depth & 7))) & 1


def encode_account_value(address: bytes, code: bytes, storage_root: bytes) -> bytes:
    return address + struct.pack(">I", len(code)) + code + storage_root


def decode_account_value(value: bytes) -> tuple[bytes, bytes, bytes]:
    address = value[:ADDRESS_SIZE]
    (n,) = struct.unpack(">I", value[ADDRESS_SIZE:ADDRESS_SIZE + 4])
    code = value[ADDRESS_SIZE + 4:ADDRESS_SIZE + 4 + n]
    storage_root = value[ADDRESS_SIZE + 4 + n:]
    if len(storage_root) != 32:
        raise CorruptNode("bad account record")
    return address, code, storage_root


class StateStore:
    """Node table plus the set of registered roots.

    ``overlay()`` returns a child store that reads through to this one and
    keeps its own writes private until ``commit()``; discarding the child
    leaves this store untouched.
    """

    def __init__(self, parent: Optional["StateStore"] = None):
        self.parent = parent
        self.nodes: dict[bytes, bytes] = {}
        self.known_roots: set[bytes] = set()
        if parent is None:
            self.nodes[EMPTY_HASH] = EMPTY_RECORD
            self.known_roots.add(EMPTY_HASH)

    # -- node table --------------------------------------------------------

    def _node(self, h: bytes) -> bytes:
        store = self
        while store is not None:
            rec = store.nodes.get(h)
            if rec is not None:
                return rec
            store = store.parent
        raise CorruptNode(f"missing node {h.hex()}")

    def has_node(self, h: bytes) -> bool:
        store = self
        while store is not None:
            if h in store.nodes:
                return True
            store = store.parent
        return False

    def _put_node(self, record: bytes) -> bytes:
        h = digest(record)
        if not self.has_node(h):
            self.nodes[h] = record
        return h

    def is_known(self, root: bytes) -> bool:
        store = self
        while store is not None:
            if root in store.known_roots:
                return True
            store = store.parent
        return False

    def _require(self, root: bytes) -> None:
        if not self.is_known(root):
            raise UnknownRoot(root.hex() if isinstance(root, bytes) else repr(root))

    # -- generic trie ------------------------------------------------------

    def _trie_get(self, h: bytes, key: bytes) -> Optional[bytes]:
        depth = 0
        while True:
            rec = self._node(h)
            tag = rec[0]
            if tag == 0:
                return None
            if tag != BRANCH:
                return rec[33:] if rec[1:33] == key else None
            h = rec[33:65] if _bit(key, depth) else rec[1:33]
            depth += 1

    def _leaf(self, tag: int, key: bytes, value: bytes) -> bytes:
        return self._put_node(bytes([tag]) + key + value)

    def _branch(self, left: bytes, right: bytes) -> bytes:
        if left == EMPTY_HASH and right == EMPTY_HASH:
            return EMPTY_HASH
        if right == EMPTY_HASH and self._node(left)[0] in LEAVES:
            return left
        if left == EMPTY_HASH and self._node(right)[0] in LEAVES:
            return right
        return self._put_node(bytes([BRANCH]) + left + right)

    def _join(self, a_key: bytes, a: bytes, b_key: bytes, b: bytes, depth: int) -> bytes:
        # two leaves with distinct keys meeting at ``depth``
        bit_a, bit_b = _bit(a_key, depth), _bit(b_key, depth)
        if bit_a != bit_b:
            left, right = (a, b) if bit_a == 0 else (b, a)
            return self._put_node(bytes([BRANCH]) + left + right)
        inner = self._join(a_key, a, b_key, b, depth + 1)
        pair = (inner, EMPTY_HASH) if bit_a == 0 else (EMPTY_HASH, inner)
        return self._put_node(bytes([BRANCH]) + pair[0] + pair[1])

    def _trie_set(self, h: bytes, key: bytes, value: Optional[bytes], leaf_tag: int, depth: int = 0) -> bytes:
        rec = self._node(h)
        tag = rec[0]
        if tag == 0:
            return h if value is None else self._leaf(leaf_tag, key, value)
        if tag != BRANCH:
            other = rec[1:33]
            if other == key:
                return EMPTY_HASH if value is None else self._leaf(leaf_tag, key, value)
            if value is None:
                return h
            return self._join(key, self._leaf(leaf_tag, key, value), other, h, depth)
        left, right = rec[1:33], rec[33:65]
        if _bit(key, depth):
            right = self._trie_set(right, key, value, leaf_tag, depth + 1)
        else:
            left = self._trie_set(left, key, value, leaf_tag, depth + 1)
        return self._branch(left, right)

    def _trie_items(self, h: bytes) -> Iterator[tuple[bytes, bytes]]:
        rec = self._node(h)
        if rec[0] in LEAVES:
            yield rec[1:33], rec[33:]
        elif rec[0] == BRANCH:
            yield from self._trie_items(rec[1:33])
            yield from self._trie_items(rec[33:65])

    # -- accounts ----------------------------------------------------------

    def empty_root(self) -> bytes:
        return EMPTY_HASH

    def root_of(self, root: bytes) -> bytes:
        return root

    def account_record(self, root: bytes, address: bytes) -> Optional[tuple[bytes, bytes]]:
        """``(code, storage_root)`` for ``address`` under ``root``, or None."""
        self._require(root)
        value = self._trie_get(root, digest(address))
        if value is None:
            return None
        _, code, storage_root = decode_account_value(value)
        return code, storage_root

    def storage_get(self, storage_root: bytes, slot: bytes) -> bytes:
        value = self._trie_get(storage_root, digest(slot))
        return ZERO_WORD if value is None else value[32:]

    def get_account(self, root: bytes, address: bytes) -> Optional[Account]:
        rec = self.account_record(root, address)
        if rec is None:
            return None
        code, storage_root = rec
        storage = {v[:32]: v[32:] for _, v in self._trie_items(storage_root)}
        return Account(address, code, storage)

    def update(self, root: bytes, changes: Mapping[bytes, tuple[Optional[bytes], Mapping[bytes, bytes]]]) -> bytes:
        """Apply ``{address: (new_code or None, {slot: word})}`` and register the result.

        ``None`` code keeps the existing code; all-zero words delete slots;
        an account left with no code and no storage is removed.
        """
        self._require(root)
        new_root = root
        for address in sorted(changes):
            code, writes = changes[address]
            key = digest(address)
            existing = self._trie_get(new_root, key)
            if existing is None:
                old_code, storage_root = b"", EMPTY_HASH
            else:
                _, old_code, storage_root = decode_account_value(existing)
            if code is None:
                code = old_code
            for slot in sorted(writes):
                word = writes[slot]
                value = None if word == ZERO_WORD else slot + word
                storage_root = self._trie_set(storage_root, digest(slot), value, LEAF)
            if not code and storage_root == EMPTY_HASH:
                new_root = self._trie_set(new_root, key, None, ACCOUNT)
            else:
                new_root = self._trie_set(new_root, key, encode_account_value(address, code, storage_root), ACCOUNT)
        self.known_roots.add(new_root)
        return new_root

    def put_account(self, root: bytes, account: Account) -> bytes:
        """Replace the account at ``account.address`` wholesale."""
        self._require(root)
        key = digest(account.address)
        storage_root = EMPTY_HASH
        for slot in sorted(account.storage):
            word = account.storage[slot]
            if word != ZERO_WORD:
                storage_root = self._trie_set(storage_root, digest(slot), slot + word, LEAF)
        if not account.code and storage_root == EMPTY_HASH:
            new_root = self._trie_set(root, key, None, ACCOUNT)
        else:
            new_root = self._trie_set(root, key, encode_account_value(account.address, account.code, storage_root), ACCOUNT)
        self.known_roots.add(new_root)
        return new_root

    def accounts(self, root: bytes) -> dict[bytes, Account]:
        self._require(root)
        out = {}
        for _, value in self._trie_items(root):
            address, _, _ = decode_account_value(value)
            out[address] = self.get_account(root, address)
        return out

    # -- reachability, export, import ------------------------------------

    def reachable(self, root: bytes) -> set[bytes]:
        seen: set[bytes] = set()
        stack = [root]
        while stack:
            h = stack.pop()
            if h in seen:
                continue
            seen.add(h)
            rec = self._node(h)
            if rec[0] == BRANCH:
                stack.extend((rec[1:33], rec[33:65]))
            elif rec[0] == ACCOUNT:
                stack.append(rec[-32:])
        return seen

    def export_nodes(self, root: bytes) -> list[bytes]:
        return [self._node(h) for h in sorted(self.reachable(root))]

    def import_nodes(self, records: Iterable[bytes]) -> None:
        for rec in records:
            if not rec or rec[0] not in (0, LEAF, BRANCH, ACCOUNT):
                raise CorruptNode("bad node tag")
            if rec[0] == 0 and rec != EMPTY_RECORD:
                raise CorruptNode("bad empty record")
            if rec[0] == BRANCH and len(rec) != 65:
                raise CorruptNode("bad branch length")
            if rec[0] == LEAF and len(rec) != 1 + 32 + 64:
                raise CorruptNode("bad storage leaf length")
            if rec[0] == ACCOUNT and len(rec) < 1 + 32 + ADDRESS_SIZE + 4 + 32:
                raise CorruptNode("bad account leaf length")
            self._put_node(rec)

    def register_root(self, root: bytes) -> None:
        """Register ``root`` after checking that every node under it is present."""
        self.reachable(root)
        self.known_roots.add(root)

    # -- overlays ----------------------------------------------------------

    def overlay(self) -> "StateStore":
        return StateStore(parent=self)

    def commit(self) -> None:
        if self.parent is None:
            raise RuntimeError("commit() is only meaningful on an overlay")
        for h, rec in self.nodes.items():
            if not self.parent.has_node(h):
                self.parent.nodes[h] = rec
        self.parent.known_roots |= self.known_roots
        self.nodes = {}
        self.known_roots = set()

    def all_nodes(self) -> dict[bytes, bytes]:
        chain = []
        store = self
        while store is not None:
            chain.append(store)
            store = store.parent
        out: dict[bytes, bytes] = {}
        for store in reversed(chain):
            out.update(store.nodes)
        return out

    def all_roots(self) -> set[bytes]:
        out: set[bytes] = set()
        store = self
        while store is not None:
            out |= store.known_roots
            store = store.parent
        return out

    # -- snapshot file -----------------------------------------------------

    def dump(self, fp: BinaryIO) -> None:
        """Write ``magic, version, node count, (len, record)*, root count, root*``."""
        nodes = self.all_nodes()
        roots = sorted(self.all_roots())
        fp.write(SNAPSHOT_MAGIC + struct.pack(">IQ", SNAPSHOT_VERSION, len(nodes)))
        for h in sorted(nodes):
            rec = nodes[h]
            fp.write(struct.pack(">I", len(rec)) + rec)
        fp.write(struct.pack(">Q", len(roots)))
        for r in roots:
            fp.write(r)

    @classmethod
    def load(cls, fp: BinaryIO) -> "StateStore":
        def read(n):
            raw = fp.read(n)
            if len(raw) != n:
                raise CorruptNode("truncated snapshot")
            return raw

        if read(len(SNAPSHOT_MAGIC)) != SNAPSHOT_MAGIC:
            raise CorruptNode("not a state snapshot")
        version, count = struct.unpack(">IQ", read(12))
        if version != SNAPSHOT_VERSION:
            raise CorruptNode(f"unsupported snapshot version {version}")
        store = cls()
        for _ in range(count):
            (n,) = struct.unpack(">I", read(4))
            store.import_nodes([read(n)])
        (n_roots,) = struct.unpack(">Q", read(8))
        for _ in range(n_roots):
            store.register_root(read(32))
        return store
