"""Round-robin proposer with 2/3-quorum endorsements."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Iterable

from .crypto import KeyPair
from .ledger import (
    MAX_BLOCK_TXS,
    Block,
    BlockError,
    BlockRejected,
    Chain,
    Transaction,
    Verdict,
    append_block,
    check_block,
    distinct_valid_endorsers,
    endorsement_for,
    make_block,
    validate_transaction,
)
from .validators import ValidatorSet, scheduled_proposer

__all__ = [
    "ValidatorSet",
    "scheduled_proposer",
    "PendingPool",
    "Proposal",
    "NotScheduled",
    "EmptyProposal",
    "propose_block",
    "endorse_block",
    "finalize_block",
    "should_propose",
]

BATCH_TRIGGER = 16
TIMEOUT_TICKS = 50


class NotScheduled(Exception):
    pass


class EmptyProposal(Exception):
    pass


class PendingPool:
    """FIFO of pending transactions, deduplicated by t_id."""

    def __init__(self, txs: Iterable[Transaction] = ()):
        self._q: OrderedDict[bytes, Transaction] = OrderedDict()
        for tx in txs:
            self.add(tx)

    def add(self, tx: Transaction) -> bool:
        if tx.t_id in self._q:
            return False
        self._q[tx.t_id] = tx
        return True

    def discard(self, t_ids: Iterable[bytes]) -> None:
        for t in t_ids:
            self._q.pop(t, None)

    def prune(self, chain: Chain) -> None:
        self.discard([t for t in self._q if t in chain.locations])

    def __contains__(self, t_id: bytes) -> bool:
        return t_id in self._q

    def __len__(self) -> int:
        return len(self._q)

    def __iter__(self):
        return iter(list(self._q.values()))


@dataclass
class Proposal:
    block: Block
    skipped: list[tuple[bytes, Verdict]] = field(default_factory=list)
    deferred: list[bytes] = field(default_factory=list)


def should_propose(pool_size: int, now: int, last_block_tick: int) -> bool:
    return pool_size >= BATCH_TRIGGER or (pool_size > 0 and now - last_block_tick >= TIMEOUT_TICKS)


def propose_block(
    pool: PendingPool, chain: Chain, proposer: KeyPair, now: int, timeout: bool = False
) -> Proposal:
    """Pack up to 256 valid pool transactions into a signed block.

    A transaction whose parent has not been seen yet is deferred rather than
    skipped, since gossip can deliver a device's transactions out of order.
    Skipped transactions are permanently invalid and reported with a verdict.
    """
    height = chain.height + 1
    if proposer.public != scheduled_proposer(chain.params.validators, height):
        raise NotScheduled(f"{proposer.public.hex()[:12]} is not the proposer for height {height}")
    staged = chain.state.copy()
    included: list[Transaction] = []
    skipped: list[tuple[bytes, Verdict]] = []
    included_ids: set[bytes] = set()
    pending = list(pool)
    while pending and len(included) < MAX_BLOCK_TXS:
        waiting = []
        for tx in pending:
            if len(included) == MAX_BLOCK_TXS:
                waiting.append(tx)
                continue
            v = validate_transaction(staged, tx)
            if v.ok:
                included.append(tx)
                included_ids.add(tx.t_id)
                staged.apply(tx)
            elif v is Verdict.BROKEN_DEVICE_CHAIN and tx.p_t_id not in chain.locations \
                    and tx.p_t_id not in included_ids:
                waiting.append(tx)
            else:
                skipped.append((tx.t_id, v))
        if len(waiting) == len(pending):
            break
        pending = waiting
    if not included and not timeout:
        raise EmptyProposal("no valid transactions in the pool")
    block = make_block(height, chain.tip_hash, included, proposer, now)
    deferred = [tx.t_id for tx in pending if tx.t_id not in included_ids]
    return Proposal(block, skipped, deferred)


def endorse_block(block: Block, validator: KeyPair, chain: Chain) -> tuple[bytes, bytes]:
    """Re-validate locally and sign the block hash; raises BlockRejected."""
    if validator.public not in chain.params.validators:
        raise PermissionError("endorser is not in the validator set")
    check_block(chain.state, chain.params, block, chain.height, chain.tip_hash,
                require_quorum=False)
    return endorsement_for(block, validator)


def finalize_block(
    block: Block,
    endorsements: Iterable[tuple[bytes, bytes]],
    chain: Chain,
    pool: PendingPool | None = None,
) -> Chain:
    """Attach distinct valid endorsements and commit iff they reach quorum."""
    vs = chain.params.validators
    kept: list[tuple[bytes, bytes]] = []
    seen: set[bytes] = set()
    for pk, sig in endorsements:
        if pk in seen:
            continue
        trial = replace(block, endorsements=((pk, sig),))
        if distinct_valid_endorsers(trial, vs):
            kept.append((pk, sig))
            seen.add(pk)
    if len(kept) < vs.quorum:
        raise BlockRejected(BlockError.INSUFFICIENT_ENDORSEMENTS,
                            detail=f"{len(kept)} of {vs.quorum} required")
    append_block(chain, replace(block, endorsements=tuple(kept)))
    if pool is not None:
        pool.prune(chain)
    return chain
