"""Validator membership and the round-robin proposer schedule."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ValidatorSet:
    """Ordered validator public keys; quorum is floor(2n/3) + 1."""

    members: tuple[bytes, ...]

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(bytes(m) for m in self.members))
        if not self.members:
            raise ValueError("validator set is empty")
        if len(set(self.members)) != len(self.members):
            raise ValueError("validator set has duplicate members")

    @property
    def n(self) -> int:
        return len(self.members)

    @property
    def quorum(self) -> int:
        return (2 * self.n) // 3 + 1

    def __contains__(self, pk: bytes) -> bool:
        return pk in self.members


def scheduled_proposer(vs: ValidatorSet, height: int) -> bytes:
    """Round-robin leader for ``height`` (heights start at 1)."""
    if height < 1:
        raise ValueError(f"height must be >= 1, got {height}")
    return vs.members[(height - 1) % vs.n]
