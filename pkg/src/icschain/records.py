"""Raw device records and their CSV form.

Each record is also the plaintext payload of a Log Store transaction, encoded
as one CSV line without the header.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

NETWORK = "network"
PHYSICAL = "physical"

NETWORK_FIELDS = (
    "src_port",
    "dst_port",
    "protocol",
    "length",
    "ttl",
    "flags",
    "window_size",
    "seq",
    "ack",
    "payload_len",
    "direction",
)

CSV_COLUMNS = ("source_id", "tick", "kind") + NETWORK_FIELDS + ("values",)


@dataclass(frozen=True)
class RawRecord:
    """One log record.

    ``header`` holds the integer packet-header fields (``NETWORK_FIELDS``
    order) for network records; ``values`` holds the readings of a physical
    record. Exactly one of the two is non-empty.
    """

    source_id: str
    tick: int
    kind: str
    header: tuple[int, ...] = ()
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == NETWORK:
            if len(self.header) != len(NETWORK_FIELDS) or self.values:
                raise ValueError("network record needs 11 header fields and no values")
        elif self.kind == PHYSICAL:
            if self.header or not self.values:
                raise ValueError("physical record needs values and no header fields")
        else:
            raise ValueError(f"unknown record kind {self.kind!r}")

    def field(self, name: str) -> int:
        return self.header[NETWORK_FIELDS.index(name)]

    def row(self) -> list[str]:
        if self.kind == NETWORK:
            net = [str(v) for v in self.header]
            vals = ""
        else:
            net = [""] * len(NETWORK_FIELDS)
            vals = ";".join(repr(float(v)) for v in self.values)
        return [self.source_id, str(self.tick), self.kind, *net, vals]

    def to_payload(self) -> bytes:
        return ",".join(self.row()).encode()

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "RawRecord":
        if len(row) != len(CSV_COLUMNS):
            raise ValueError(f"expected {len(CSV_COLUMNS)} columns, got {len(row)}")
        source_id, tick, kind = row[0], int(row[1]), row[2]
        if not source_id:
            raise ValueError("empty source_id")
        net = row[3:3 + len(NETWORK_FIELDS)]
        if kind == NETWORK:
            return cls(source_id, tick, kind, header=tuple(int(v) for v in net))
        if any(net):
            raise ValueError("physical record with header fields")
        values = tuple(float(v) for v in row[-1].split(";")) if row[-1] else ()
        return cls(source_id, tick, kind, values=values)

    @classmethod
    def from_payload(cls, payload: bytes) -> "RawRecord":
        return cls.from_row(payload.decode().split(","))


class RecordFileError(Exception):
    pass


@dataclass
class ParseResult:
    records: list[RawRecord]
    errors: list[tuple[int, str]]


MAX_BAD_FRACTION = 0.10


def parse_records(path: str | Path) -> ParseResult:
    """Read a record CSV; bad lines are reported by line number and skipped.

    Raises RecordFileError if the file is unreadable, lacks the header, or
    more than 10% of its data lines are malformed.
    """
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise RecordFileError(f"cannot read {path}: {e}") from e
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_COLUMNS:
        raise RecordFileError(f"{path}: missing or wrong header row")
    records, errors, n = [], [], 0
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        n += 1
        try:
            records.append(RawRecord.from_row(row))
        except ValueError as e:
            errors.append((lineno, str(e)))
    if n and len(errors) / n > MAX_BAD_FRACTION:
        raise RecordFileError(f"{path}: {len(errors)} of {n} lines malformed")
    return ParseResult(records, errors)


def write_records(path: str | Path, records: Iterable[RawRecord]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    Path(path).write_text(buf.getvalue())
