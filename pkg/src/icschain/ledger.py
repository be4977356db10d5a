"""Transactions, blocks and the hash-linked chain with per-device ledgers."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

from .crypto import (
    DIGEST_SIZE,
    Entropy,
    Envelope,
    KeyPair,
    MalformedKeyError,
    envelope_encrypt,
    hash_bytes,
    public_key_of,
    sign,
    verify,
)
from .validators import ValidatorSet, scheduled_proposer

MAX_BLOCK_TXS = 256
ZERO_DIGEST = bytes(DIGEST_SIZE)
CHAIN_MAGIC = b"ICSCHAIN"
CHAIN_VERSION = 1


class TxKind(enum.IntEnum):
    GENESIS = 1
    KEY_UPDATE = 2
    LOG_STORE = 3
    ANOMALY_ALERT = 4


DEVICE_KINDS = (TxKind.LOG_STORE, TxKind.ANOMALY_ALERT)


class Verdict(enum.Enum):
    ACCEPT = "Accept"
    MISSING_FIELD = "MissingField"
    BAD_HASH = "BadHash"
    BAD_SIGNATURE = "BadSignature"
    UNAUTHORIZED = "Unauthorized"
    BROKEN_DEVICE_CHAIN = "BrokenDeviceChain"

    @property
    def ok(self) -> bool:
        return self is Verdict.ACCEPT


class MissingFieldError(ValueError):
    pass


# -- length-prefixed encoding ----------------------------------------------------

def _lp(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"truncated input at offset {self.pos}")
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def lp(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> bool:
        return self.pos == len(self.data)


# -- transactions ----------------------------------------------------------------

@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    t_id: bytes
    pk: bytes
    timestamp: int = 0
    p_t_id: Optional[bytes] = None
    pk_data: Optional[bytes] = None
    m_pk: Optional[bytes] = None
    log: Optional[Envelope] = None
    signature: bytes = b""
    authority_sig: Optional[bytes] = None

    def __repr__(self) -> str:
        return f"Transaction({self.kind.name}, t_id={self.t_id.hex()[:12]}, ts={self.timestamp})"


def canonical_serialize(tx: Transaction) -> bytes:
    """Bytes hashed into ``t_id``: kind tag, then the length-prefixed fields
    p_t_id, pk, pk_data, m_pk, log, timestamp. Absent fields are empty."""
    parts = [
        bytes([int(tx.kind)]),
        _lp(tx.p_t_id or b""),
        _lp(tx.pk),
        _lp(tx.pk_data or b""),
        _lp(tx.m_pk or b""),
        _lp(tx.log.to_bytes() if tx.log is not None else b""),
        _lp(struct.pack(">Q", tx.timestamp)),
    ]
    return b"".join(parts)


def compute_t_id(tx: Transaction) -> bytes:
    return hash_bytes(canonical_serialize(tx))


def _parse_content(data: bytes) -> dict:
    r = _Reader(data)
    kind = TxKind(r.u8())
    p_t_id, pk, pk_data, m_pk, log, ts = (r.lp() for _ in range(6))
    if len(ts) != 8 or not r.done():
        raise ValueError("malformed transaction content")
    return dict(
        kind=kind,
        p_t_id=p_t_id or None,
        pk=pk,
        pk_data=pk_data or None,
        m_pk=m_pk or None,
        log=Envelope.from_bytes(log) if log else None,
        timestamp=struct.unpack(">Q", ts)[0],
    )


def encode_transaction(tx: Transaction) -> bytes:
    """Storage form: t_id, content, signature, authority signature."""
    return (
        _lp(tx.t_id)
        + _lp(canonical_serialize(tx))
        + _lp(tx.signature)
        + _lp(tx.authority_sig or b"")
    )


def decode_transaction(data: bytes) -> Transaction:
    r = _Reader(data)
    t_id = r.lp()
    content = _parse_content(r.lp())
    sig = r.lp()
    auth = r.lp()
    if not r.done():
        raise ValueError("trailing bytes after transaction")
    return Transaction(t_id=t_id, signature=sig, authority_sig=auth or None, **content)


def _finish(tx: Transaction) -> Transaction:
    return replace(tx, t_id=compute_t_id(tx))


def build_genesis_tx(
    device_pk: bytes, pk_data: bytes, authority: KeyPair, timestamp: int = 0
) -> Transaction:
    """Authorise ``device_pk``; the manufacturer key signs the t_id."""
    tx = _finish(Transaction(TxKind.GENESIS, b"", bytes(device_pk), timestamp, pk_data=bytes(pk_data)))
    return replace(tx, authority_sig=sign(authority.secret, tx.t_id))


def build_device_tx(
    kind: TxKind,
    device: KeyPair,
    prev_t_id: bytes,
    payload: bytes,
    pk_data: bytes,
    m_pk: Optional[bytes] = None,
    timestamp: int = 0,
    entropy: Optional[Entropy] = None,
) -> Transaction:
    """Log Store or Anomaly Alert: payload encrypted under ``pk_data``, signed by the device."""
    kind = TxKind(kind)
    if kind not in DEVICE_KINDS:
        raise ValueError(f"{kind.name} is not a device transaction")
    if kind is TxKind.ANOMALY_ALERT and m_pk is None:
        raise MissingFieldError("anomaly alert requires m_pk (the suspect's public key)")
    if kind is TxKind.LOG_STORE and m_pk is not None:
        raise ValueError("log store transactions carry no m_pk")
    tx = _finish(Transaction(
        kind,
        b"",
        device.public,
        timestamp,
        p_t_id=bytes(prev_t_id),
        m_pk=bytes(m_pk) if m_pk is not None else None,
        log=envelope_encrypt(pk_data, payload, entropy=entropy),
    ))
    return replace(tx, signature=sign(device.secret, tx.t_id))


def build_key_update_tx(new_pk_data: bytes, old_sk_data: bytes, timestamp: int = 0) -> Transaction:
    """Announce a new data key, signed with the secret of the current one."""
    tx = _finish(Transaction(
        TxKind.KEY_UPDATE, b"", public_key_of(old_sk_data), timestamp, pk_data=bytes(new_pk_data)
    ))
    return replace(tx, signature=sign(old_sk_data, tx.t_id))


# -- ledger state ----------------------------------------------------------------

@dataclass(frozen=True)
class ChainParams:
    authority_pk: bytes
    initial_pk_data: bytes
    validators: ValidatorSet

    def encode(self) -> bytes:
        out = _lp(self.authority_pk) + _lp(self.initial_pk_data)
        out += struct.pack(">I", self.validators.n)
        return out + b"".join(_lp(m) for m in self.validators.members)

    @classmethod
    def decode(cls, data: bytes) -> "ChainParams":
        r = _Reader(data)
        auth, pkd = r.lp(), r.lp()
        members = tuple(r.lp() for _ in range(r.u32()))
        return cls(auth, pkd, ValidatorSet(members))


@dataclass
class LedgerState:
    """What validation needs: authorised devices, their latest t_id, live PK_data."""

    authority_pk: bytes
    pk_data: bytes
    pk_data_history: list[bytes] = field(default_factory=list)
    authorized: set[bytes] = field(default_factory=set)
    latest: dict[bytes, bytes] = field(default_factory=dict)

    @classmethod
    def initial(cls, params: ChainParams) -> "LedgerState":
        return cls(params.authority_pk, params.initial_pk_data, [params.initial_pk_data])

    def copy(self) -> "LedgerState":
        return LedgerState(
            self.authority_pk,
            self.pk_data,
            list(self.pk_data_history),
            set(self.authorized),
            dict(self.latest),
        )

    def apply(self, tx: Transaction) -> None:
        if tx.kind is TxKind.GENESIS:
            self.authorized.add(tx.pk)
            self.latest[tx.pk] = tx.t_id
        elif tx.kind is TxKind.KEY_UPDATE:
            self.pk_data = tx.pk_data
            self.pk_data_history.append(tx.pk_data)
        else:
            self.latest[tx.pk] = tx.t_id


_REQUIRED = {
    TxKind.GENESIS: ({"pk_data", "authority_sig"}, {"p_t_id", "log", "m_pk"}),
    TxKind.KEY_UPDATE: ({"pk_data", "signature"}, {"p_t_id", "log", "m_pk", "authority_sig"}),
    TxKind.LOG_STORE: ({"p_t_id", "log", "signature"}, {"pk_data", "m_pk", "authority_sig"}),
    TxKind.ANOMALY_ALERT: ({"p_t_id", "log", "signature", "m_pk"}, {"pk_data", "authority_sig"}),
}


def _sig_ok(pk: bytes, msg: bytes, sig: Optional[bytes]) -> bool:
    try:
        return verify(pk, msg, sig or b"")
    except MalformedKeyError:
        return False


def validate_transaction(chain: "Chain | LedgerState", tx: Transaction) -> Verdict:
    """First failed rule, in order: fields, hash, signature, authorisation, device chain."""
    state = chain.state if isinstance(chain, Chain) else chain
    required, forbidden = _REQUIRED[tx.kind]
    if any(not getattr(tx, f) for f in required) or any(getattr(tx, f) for f in forbidden):
        return Verdict.MISSING_FIELD
    if tx.t_id != compute_t_id(tx):
        return Verdict.BAD_HASH
    if tx.kind is TxKind.GENESIS:
        if not _sig_ok(state.authority_pk, tx.t_id, tx.authority_sig):
            return Verdict.BAD_SIGNATURE
        if tx.pk in state.authorized:
            return Verdict.BROKEN_DEVICE_CHAIN
        return Verdict.ACCEPT
    if tx.kind is TxKind.KEY_UPDATE:
        if tx.pk != state.pk_data or not _sig_ok(state.pk_data, tx.t_id, tx.signature):
            return Verdict.BAD_SIGNATURE
        return Verdict.ACCEPT
    if not _sig_ok(tx.pk, tx.t_id, tx.signature):
        return Verdict.BAD_SIGNATURE
    if tx.pk not in state.authorized:
        return Verdict.UNAUTHORIZED
    if state.latest.get(tx.pk) != tx.p_t_id:
        return Verdict.BROKEN_DEVICE_CHAIN
    return Verdict.ACCEPT


# -- blocks ----------------------------------------------------------------------

def tx_root(transactions: Iterable[Transaction]) -> bytes:
    return hash_bytes(b"".join(tx.t_id for tx in transactions))


@dataclass(frozen=True)
class Block:
    height: int
    prev_block_hash: bytes
    tx_root: bytes
    proposer_pk: bytes
    timestamp: int
    transactions: tuple[Transaction, ...] = ()
    proposer_sig: bytes = b""
    endorsements: tuple[tuple[bytes, bytes], ...] = ()

    def header_bytes(self) -> bytes:
        return (
            struct.pack(">Q", self.height)
            + _lp(self.prev_block_hash)
            + _lp(self.tx_root)
            + _lp(self.proposer_pk)
            + struct.pack(">Q", self.timestamp)
        )

    def hash(self) -> bytes:
        return hash_bytes(self.header_bytes())

    def encode(self) -> bytes:
        out = _lp(self.header_bytes()) + _lp(self.proposer_sig)
        out += struct.pack(">I", len(self.transactions))
        out += b"".join(_lp(encode_transaction(tx)) for tx in self.transactions)
        out += struct.pack(">I", len(self.endorsements))
        return out + b"".join(_lp(pk) + _lp(sig) for pk, sig in self.endorsements)

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        r = _Reader(data)
        h = _Reader(r.lp())
        height = h.u64()
        prev, root, proposer = h.lp(), h.lp(), h.lp()
        ts = h.u64()
        psig = r.lp()
        txs = tuple(decode_transaction(r.lp()) for _ in range(r.u32()))
        ends = tuple((r.lp(), r.lp()) for _ in range(r.u32()))
        if not r.done():
            raise ValueError("trailing bytes after block")
        return cls(height, prev, root, proposer, ts, txs, psig, ends)


def make_block(
    height: int,
    prev_block_hash: bytes,
    transactions: Iterable[Transaction],
    proposer: KeyPair,
    timestamp: int,
) -> Block:
    txs = tuple(transactions)
    block = Block(height, prev_block_hash, tx_root(txs), proposer.public, timestamp, txs)
    return replace(block, proposer_sig=sign(proposer.secret, block.hash()))


def endorsement_for(block: Block, validator: KeyPair) -> tuple[bytes, bytes]:
    return validator.public, sign(validator.secret, block.hash())


class BlockError(enum.Enum):
    STALE_PARENT = "StaleParent"
    INVALID_TX = "InvalidTx"
    WRONG_PROPOSER = "WrongProposer"
    INSUFFICIENT_ENDORSEMENTS = "InsufficientEndorsements"
    BAD_HEADER = "BadHeader"


class BlockRejected(Exception):
    def __init__(self, reason: BlockError, index: Optional[int] = None,
                 verdict: Optional[Verdict] = None, detail: str = ""):
        self.reason = reason
        self.index = index
        self.verdict = verdict
        msg = reason.value
        if index is not None:
            msg += f"({index}, {verdict.value if verdict else '?'})"
        super().__init__(msg + (f": {detail}" if detail else ""))


class UnknownDeviceError(KeyError):
    pass


def distinct_valid_endorsers(block: Block, validators: ValidatorSet) -> set[bytes]:
    bh = block.hash()
    return {
        pk for pk, sig in block.endorsements
        if pk in validators and _sig_ok(pk, bh, sig)
    }


def check_block(state: LedgerState, params: ChainParams, block: Block,
                tip_height: int, tip_hash: bytes, require_quorum: bool = True,
                strict_endorsements: bool = False) -> LedgerState:
    """Validate ``block`` on top of the tip; return the post-block state.

    Raises BlockRejected; ``state`` itself is never modified.
    """
    if block.height != tip_height + 1 or block.prev_block_hash != tip_hash:
        raise BlockRejected(BlockError.STALE_PARENT, detail=f"height {block.height}")
    if len(block.transactions) > MAX_BLOCK_TXS:
        raise BlockRejected(BlockError.BAD_HEADER, detail="too many transactions")
    vs = params.validators
    bh = block.hash()
    if block.proposer_pk != scheduled_proposer(vs, block.height) or not _sig_ok(
        block.proposer_pk, bh, block.proposer_sig
    ):
        raise BlockRejected(BlockError.WRONG_PROPOSER)
    if strict_endorsements:
        seen = set()
        for pk, sig in block.endorsements:
            if pk not in vs or pk in seen or not _sig_ok(pk, bh, sig):
                raise BlockRejected(BlockError.INSUFFICIENT_ENDORSEMENTS,
                                    detail="invalid endorsement recorded")
            seen.add(pk)
    if require_quorum and len(distinct_valid_endorsers(block, vs)) < vs.quorum:
        raise BlockRejected(BlockError.INSUFFICIENT_ENDORSEMENTS)
    staged = state.copy()
    for i, tx in enumerate(block.transactions):
        v = validate_transaction(staged, tx)
        if not v.ok:
            raise BlockRejected(BlockError.INVALID_TX, i, v)
        staged.apply(tx)
    if block.tx_root != tx_root(block.transactions):
        raise BlockRejected(BlockError.BAD_HEADER, detail="tx_root mismatch")
    return staged


@dataclass
class Chain:
    params: ChainParams
    blocks: list[Block] = field(default_factory=list)
    state: LedgerState = None  # type: ignore[assignment]
    device_index: dict[bytes, list[bytes]] = field(default_factory=dict)
    locations: dict[bytes, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.state is None:
            self.state = LedgerState.initial(self.params)

    @property
    def authorized_devices(self) -> set[bytes]:
        return self.state.authorized

    @property
    def current_pk_data(self) -> bytes:
        return self.state.pk_data

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    @property
    def tip_hash(self) -> bytes:
        return self.blocks[-1].hash() if self.blocks else ZERO_DIGEST

    def latest_t_id(self, pk: bytes) -> Optional[bytes]:
        return self.state.latest.get(pk)

    def transaction(self, t_id: bytes) -> Transaction:
        h, i = self.locations[t_id]
        return self.blocks[h].transactions[i]

    def transactions(self) -> Iterable[tuple[int, int, Transaction]]:
        for block in self.blocks:
            for i, tx in enumerate(block.transactions):
                yield block.height, i, tx

    def _commit(self, block: Block, new_state: LedgerState) -> None:
        self.blocks.append(block)
        self.state = new_state
        for i, tx in enumerate(block.transactions):
            self.locations[tx.t_id] = (block.height, i)
            if tx.kind is not TxKind.KEY_UPDATE:
                self.device_index.setdefault(tx.pk, []).append(tx.t_id)

    def copy(self) -> "Chain":
        c = Chain(self.params, list(self.blocks), self.state.copy())
        c.device_index = {k: list(v) for k, v in self.device_index.items()}
        c.locations = dict(self.locations)
        return c

    @classmethod
    def from_blocks(cls, params: ChainParams, blocks: Iterable[Block]) -> "Chain":
        """Rebuild indexes by replay, without validation (for auditing)."""
        chain = cls(params)
        for block in blocks:
            state = chain.state.copy()
            for tx in block.transactions:
                state.apply(tx)
            chain._commit(block, state)
        return chain


def create_chain(
    authority: KeyPair,
    pk_data: bytes,
    validators: ValidatorSet,
    devices: Iterable[bytes],
    timestamp: int = 0,
) -> Chain:
    """Chain with a height-0 block holding one Genesis per device."""
    params = ChainParams(authority.public, bytes(pk_data), validators)
    chain = Chain(params)
    txs = [build_genesis_tx(pk, pk_data, authority, timestamp) for pk in devices]
    if len(txs) > MAX_BLOCK_TXS:
        raise ValueError(f"at most {MAX_BLOCK_TXS} devices in the genesis block")
    block = make_block(0, ZERO_DIGEST, txs, authority, timestamp)
    state = chain.state.copy()
    for i, tx in enumerate(txs):
        v = validate_transaction(state, tx)
        if not v.ok:
            raise BlockRejected(BlockError.INVALID_TX, i, v)
        state.apply(tx)
    chain._commit(block, state)
    return chain


def append_block(chain: Chain, block: Block) -> Chain:
    """Validate and append; on rejection the chain is left untouched."""
    new_state = check_block(chain.state, chain.params, block, chain.height, chain.tip_hash,
                            strict_endorsements=True)
    chain._commit(block, new_state)
    return chain


@dataclass(frozen=True)
class AuditReport:
    ok: bool
    height: Optional[int] = None
    tx_index: Optional[int] = None
    rule: str = ""
    blocks_checked: int = 0

    def __str__(self) -> str:
        if self.ok:
            return f"clean: {self.blocks_checked} blocks verified"
        where = f"height {self.height}"
        if self.tx_index is not None:
            where += f", tx {self.tx_index}"
        return f"FAILED at {where}: {self.rule}"


def _check_genesis_block(block: Block, params: ChainParams) -> None:
    if block.height != 0 or block.prev_block_hash != ZERO_DIGEST:
        raise BlockRejected(BlockError.STALE_PARENT, detail="bad genesis block linkage")
    if block.proposer_pk != params.authority_pk or not _sig_ok(
        params.authority_pk, block.hash(), block.proposer_sig
    ):
        raise BlockRejected(BlockError.WRONG_PROPOSER, detail="genesis block not signed by authority")
    if block.endorsements:
        raise BlockRejected(BlockError.BAD_HEADER, detail="genesis block carries endorsements")


def verify_chain(chain: Chain) -> AuditReport:
    """Replay every block from genesis and report the first divergence."""
    params = chain.params
    state = LedgerState.initial(params)
    tip_hash = ZERO_DIGEST
    for n, block in enumerate(chain.blocks):
        try:
            if n == 0:
                _check_genesis_block(block, params)
                staged = state.copy()
                for i, tx in enumerate(block.transactions):
                    v = validate_transaction(staged, tx)
                    if not v.ok:
                        raise BlockRejected(BlockError.INVALID_TX, i, v)
                    staged.apply(tx)
                if block.tx_root != tx_root(block.transactions):
                    raise BlockRejected(BlockError.BAD_HEADER, detail="tx_root mismatch")
                state = staged
            else:
                state = check_block(state, params, block, n - 1, tip_hash,
                                    strict_endorsements=True)
        except BlockRejected as e:
            rule = e.verdict.value if e.verdict else e.reason.value
            return AuditReport(False, n, e.index, rule, n)
        tip_hash = block.hash()
    return AuditReport(True, blocks_checked=len(chain.blocks))


def device_history(chain: Chain, device_pk: bytes) -> list[Transaction]:
    """The device's transactions in ledger order, checking p_t_id links."""
    if device_pk not in chain.device_index:
        raise UnknownDeviceError(device_pk.hex())
    txs = [chain.transaction(t) for t in chain.device_index[device_pk]]
    for prev, tx in zip(txs, txs[1:]):
        if tx.p_t_id != prev.t_id:
            raise ValueError(f"device chain broken at {tx.t_id.hex()}")
    return txs


# -- persistence -----------------------------------------------------------------

def encode_chain(chain: Chain) -> bytes:
    out = CHAIN_MAGIC + bytes([CHAIN_VERSION]) + _lp(chain.params.encode())
    out += struct.pack(">I", len(chain.blocks))
    return out + b"".join(_lp(b.encode()) for b in chain.blocks)


def decode_chain(data: bytes) -> Chain:
    if not data.startswith(CHAIN_MAGIC):
        raise ValueError("not a chain file")
    r = _Reader(data[len(CHAIN_MAGIC):])
    if r.u8() != CHAIN_VERSION:
        raise ValueError("unsupported chain file version")
    params = ChainParams.decode(r.lp())
    blocks = [Block.decode(r.lp()) for _ in range(r.u32())]
    if not r.done():
        raise ValueError("trailing bytes after chain")
    return Chain.from_blocks(params, blocks)


def save_chain(chain: Chain, path: str | Path) -> None:
    Path(path).write_bytes(encode_chain(chain))


def load_chain(path: str | Path) -> Chain:
    return decode_chain(Path(path).read_bytes())


EXPORT_HEADER = "height,index,variant,t_id,p_t_id,pk,m_pk"


def export_lines(chain: Chain) -> list[str]:
    def hx(b: Optional[bytes]) -> str:
        return b.hex() if b else "-"

    lines = [EXPORT_HEADER]
    for h, i, tx in chain.transactions():
        lines.append(f"{h},{i},{tx.kind.name},{hx(tx.t_id)},{hx(tx.p_t_id)},{hx(tx.pk)},{hx(tx.m_pk)}")
    return lines


def export_text(chain: Chain) -> str:
    return "\n".join(export_lines(chain)) + "\n"
