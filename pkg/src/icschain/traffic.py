"""Seeded per-device log streams and attack transformations.

Every source draws its baseline stream from its own generator, and attack
effects from a second one, so injecting an attack never perturbs the
baseline records of any source.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .crypto import derive_seed
from .records import NETWORK, PHYSICAL, RawRecord
from .topology import TAP, Device

FLOODING = "flooding"
SPOOFING = "spoofing"
MITM = "mitm"
ATTACK_KINDS = (FLOODING, SPOOFING, MITM)

FLOOD_FACTOR = 20
TCP = 6
PSH_ACK = 0x18
SYN = 0x02
HEADER_BYTES = 54


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Attack:
    kind: str
    site: str
    source: str
    start: int
    end: int

    def covers(self, tick: int) -> bool:
        return self.start <= tick < self.end

    def line(self) -> str:
        return f"attack={self.kind},{self.site},{self.source},{self.start},{self.end}"


class AttackSchedule:
    """Attacks keyed by source; overlapping attacks on one source are rejected."""

    def __init__(self, duration: int, attacks: Iterable[Attack] = ()):
        self.duration = duration
        self._attacks: list[Attack] = []
        for a in attacks:
            self.inject(a)

    def inject(self, attack: Attack) -> bool:
        """Add ``attack``; returns False for an empty interval (no-op)."""
        if attack.kind not in ATTACK_KINDS:
            raise AttackConfigError(f"unknown attack kind {attack.kind!r}")
        if not 0 <= attack.start <= attack.end <= self.duration:
            raise AttackConfigError(
                f"attack interval [{attack.start}, {attack.end}) outside [0, {self.duration}]"
            )
        if attack.start == attack.end:
            return False
        for other in self.for_source(attack.source):
            if attack.start < other.end and other.start < attack.end:
                raise AttackConfigError(
                    f"{attack.kind} on {attack.source} overlaps {other.kind} "
                    f"[{other.start}, {other.end})"
                )
        self._attacks.append(attack)
        self._attacks.sort(key=lambda a: (a.start, a.source))
        return True

    def for_source(self, source: str) -> list[Attack]:
        return [a for a in self._attacks if a.source == source]

    def __iter__(self):
        return iter(list(self._attacks))

    def __len__(self) -> int:
        return len(self._attacks)


def inject_attack(schedule: AttackSchedule, kind: str, site: str, source: str,
                  start: int, end: int) -> bool:
    return schedule.inject(Attack(kind, site, source, start, end))


def check_attack_target(attack: Attack, device: Device) -> None:
    if attack.kind in (FLOODING, SPOOFING) and device.kind != TAP:
        raise AttackConfigError(f"{attack.kind} needs a network tap, {device.name} is a {device.kind}")


def active_attack(attacks: Sequence[Attack], tick: int) -> Attack | None:
    for a in attacks:
        if a.covers(tick):
            return a
    return None


# -- emission profiles -----------------------------------------------------------

@dataclass(frozen=True)
class Channel:
    base: float
    amp: float
    period: float
    noise: float
    binary: bool = False


PHYSICAL_PROFILES: dict[str, tuple[Channel, ...]] = {
    "swat-sensors": (
        Channel(500.0, 300.0, 2000, 5.0),     # raw water tank level
        Channel(2.5, 0.5, 700, 0.05),         # feed flow
        Channel(7.0, 0.4, 1500, 0.02),        # pH
        Channel(20.0, 5.0, 900, 0.3),         # UF differential pressure
        Channel(800.0, 150.0, 2500, 4.0),     # RO feed tank level
        Channel(250.0, 30.0, 1100, 1.0),      # conductivity
    ),
    "swat-actuators": (
        Channel(0.5, 0.5, 1200, 0.0, True),   # P101
        Channel(0.5, 0.5, 1700, 0.0, True),   # P201
        Channel(0.5, 0.5, 800, 0.0, True),    # P301
        Channel(50.0, 45.0, 1300, 1.0),       # MV101 opening
        Channel(50.0, 45.0, 1900, 1.0),       # MV201
        Channel(50.0, 45.0, 1000, 1.0),       # MV301
    ),
    "factory-process": (
        Channel(1.2, 0.3, 600, 0.02),         # conveyor speed
        Channel(60.0, 25.0, 1800, 0.5),       # tank level
        Channel(3.0, 0.8, 900, 0.05),         # vessel pressure
    ),
}

PHYSICAL_PERIOD = 5


@dataclass(frozen=True)
class TapProfile:
    service_port: int
    request_payload: tuple[int, int]
    response_payload: tuple[int, int]
    gap: tuple[int, int] = (2, 6)


TAP_PROFILES = {
    "modbus-tap": TapProfile(502, (12, 12), (11, 19)),
    "s7-tap": TapProfile(102, (25, 31), (22, 40)),
}


def _rng(seed: int, *label: object) -> np.random.Generator:
    return np.random.default_rng(int.from_bytes(derive_seed(seed, "traffic", *label)[:8], "big"))


def mitm_shift(channel: Channel) -> float:
    return 3.0 * channel.amp


def _physical(device: Device, duration: int, attacks: Sequence[Attack], seed: int) -> list[RawRecord]:
    channels = PHYSICAL_PROFILES[device.profile]
    rng = _rng(seed, device.name)
    phase = int(rng.integers(0, PHYSICAL_PERIOD))
    ticks = np.arange(phase, duration, PHYSICAL_PERIOD)
    phis = rng.uniform(0, 1, len(channels))
    noise = rng.standard_normal((len(ticks), len(channels)))
    cols = []
    for j, ch in enumerate(channels):
        v = ch.base + ch.amp * np.sin(2 * math.pi * (ticks / ch.period + phis[j]))
        if ch.binary:
            v = (v >= ch.base).astype(float)
        else:
            v = v + ch.noise * noise[:, j]
        cols.append(v)
    values = np.round(np.stack(cols, axis=1), 3) if cols else np.zeros((len(ticks), 0))
    shifts = np.array([mitm_shift(ch) for ch in channels])
    out = []
    for t, row in zip(ticks.tolist(), values):
        a = active_attack(attacks, t)
        if a is not None and a.kind == MITM:
            row = np.round(row + shifts, 3)
        out.append(RawRecord(device.name, t, PHYSICAL, values=tuple(float(x) for x in row)))
    return out


def _tap(device: Device, duration: int, attacks: Sequence[Attack], seed: int) -> list[RawRecord]:
    prof = TAP_PROFILES[device.profile]
    rng = _rng(seed, device.name)
    arng = _rng(seed, device.name, "attack")
    seq = [int(rng.integers(0, 2**31)), int(rng.integers(0, 2**31))]
    eph = 40000 + int(rng.integers(0, 4))
    t = int(rng.integers(0, prof.gap[1]))
    n = 0
    normal: list[RawRecord] = []
    while t < duration:
        direction = n % 2
        if direction == 0:
            if n % 100 == 0:
                eph = 40000 + int(rng.integers(0, 4))
            lo, hi = prof.request_payload
            src, dst = eph, prof.service_port
        else:
            lo, hi = prof.response_payload
            src, dst = prof.service_port, eph
        payload = int(rng.integers(lo, hi + 1))
        length, ttl = HEADER_BYTES + payload, 64
        a = active_attack(attacks, t)
        if a is not None and a.kind == SPOOFING:
            src, ttl = int(arng.integers(1024, 65536)), 128
        elif a is not None and a.kind == MITM:
            payload, length, ttl = payload + 8, length + 8, ttl - 1
        header = (src, dst, TCP, length, ttl, PSH_ACK, 8192, seq[direction],
                  seq[1 - direction], payload, direction)
        normal.append(RawRecord(device.name, t, NETWORK, header=header))
        seq[direction] = (seq[direction] + payload) % 2**32
        n += 1
        t += int(rng.integers(prof.gap[0], prof.gap[1] + 1))
    flood: list[RawRecord] = []
    mean_gap = (prof.gap[0] + prof.gap[1]) / 2
    extra_rate = (FLOOD_FACTOR - 1) / mean_gap
    for a in attacks:
        if a.kind != FLOODING:
            continue
        for tick in range(a.start, min(a.end, duration)):
            for _ in range(int(arng.poisson(extra_rate))):
                header = (int(arng.integers(1024, 65536)), prof.service_port, TCP, HEADER_BYTES,
                          64, SYN, 1024, int(arng.integers(0, 2**32)), 0, 0, 0)
                flood.append(RawRecord(device.name, tick, NETWORK, header=header))
    if not flood:
        return normal
    merged = sorted(
        [(r.tick, 0, i, r) for i, r in enumerate(normal)] + [(r.tick, 1, i, r) for i, r in enumerate(flood)],
        key=lambda x: x[:3],
    )
    return [m[3] for m in merged]


def generate_traffic(device: Device, duration: int, attacks: Sequence[Attack], seed: int) -> list[RawRecord]:
    """All records ``device`` emits in [0, duration), ordered by tick."""
    mine = [a for a in attacks if a.source == device.name]
    for a in mine:
        check_attack_target(a, device)
    if device.profile in PHYSICAL_PROFILES:
        return _physical(device, duration, mine, seed)
    if device.profile in TAP_PROFILES:
        return _tap(device, duration, mine, seed)
    raise AttackConfigError(f"device {device.name} has no emission profile")


# -- ground truth ----------------------------------------------------------------

def record_is_attacked(record: RawRecord, attacks: Sequence[Attack]) -> bool:
    return any(a.source == record.source_id and a.covers(record.tick) for a in attacks)


LABEL_THRESHOLD = 0.5


def window_starts(duration: int, window_len: int, stride: int) -> range:
    return range(0, max(duration - window_len + 1, 0), stride)


def attacked_fraction(records: Sequence[RawRecord], attacks: Sequence[Attack]) -> float:
    if not records:
        return 0.0
    hit = sum(1 for r in records if record_is_attacked(r, attacks))
    return hit / len(records)


@dataclass(frozen=True)
class SourceWindowLabel:
    source_id: str
    window_start: int
    window_end: int
    label: str


def label_source_windows(records: Sequence[RawRecord], attacks: Sequence[Attack], duration: int,
                         window_len: int, stride: int) -> list[SourceWindowLabel]:
    """Per-source window labels: anomalous iff >= 50% of its records are attacked."""
    if not records:
        return []
    source = records[0].source_id
    mine = [a for a in attacks if a.source == source]
    ticks = np.array([r.tick for r in records])
    out = []
    for w in window_starts(duration, window_len, stride):
        lo, hi = np.searchsorted(ticks, [w, w + window_len])
        frac = attacked_fraction(records[lo:hi], mine) if mine else 0.0
        out.append(SourceWindowLabel(source, w, w + window_len,
                                     "anomalous" if frac >= LABEL_THRESHOLD else "normal"))
    return out
