"""Context-based appendable-block blockchain with an isolated contract VM per context.

Modules, bottom up: ``crypto`` (hashing, recoverable signatures), ``model``
(transactions, blocks, canonical encoding, chain validation), ``state``
(content-addressed state trie), ``vm`` (stack machine with gas),
``adapter`` (external VM protocol), ``engine`` (state transitions and main
loop), ``gateway`` (PBFT replicas on a simulated network), ``workload``
(device schedules) and ``bench`` (metrics and the ``bench`` command).
"""
from .crypto import KeyPair, keygen, sign, recover, digest
from .engine import Engine, Rejection, Reason, append_t, new_c_block, new_pd_block
from .model import Blockchain, Block, OpCode, Transaction, new_chain, validate_chain
from .state import StateStore
from .vm import VmError, VmErrorKind, assemble, execute

__version__ = "0.1.0"

__all__ = [
    "KeyPair", "keygen", "sign", "recover", "digest",
    "Engine", "Rejection", "Reason", "append_t", "new_c_block", "new_pd_block",
    "Blockchain", "Block", "OpCode", "Transaction", "new_chain", "validate_chain",
    "StateStore", "VmError", "VmErrorKind", "assemble", "execute",
]
