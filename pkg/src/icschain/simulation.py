"""Deterministic discrete-event simulation of devices, gossip and validators."""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from .consensus import (
    EmptyProposal,
    PendingPool,
    endorse_block,
    finalize_block,
    propose_block,
    should_propose,
)
from .crypto import DeterministicEntropy, derive_seed
from .ledger import (
    Block,
    BlockRejected,
    Chain,
    Transaction,
    TxKind,
    append_block,
    build_device_tx,
    create_chain,
    encode_chain,
)
from .records import RawRecord
from .topology import MANAGER, SiteTopology, TopologyError, build_topology
from .traffic import (
    ATTACK_KINDS,
    Attack,
    AttackConfigError,
    AttackSchedule,
    SourceWindowLabel,
    check_attack_target,
    generate_traffic,
    label_source_windows,
)
from .validators import ValidatorSet, scheduled_proposer

log = logging.getLogger(__name__)

DEVICE_LOG = "DeviceLog"
DELIVER = "Deliver"
PROPOSE_TIMER = "ProposeTimer"
ATTACK_START = "AttackStart"
ATTACK_END = "AttackEnd"
DETECT_TIMER = "DetectTimer"

TIMER_PERIOD = 5
PROPOSAL_TIMEOUT = 100


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    seed: int = 0
    duration: int = 1000
    topology: str = "two-site"
    link_delay: tuple[int, int] = (1, 5)
    attacks: list[Attack] = field(default_factory=list)
    window_len: int = 50
    stride: int = 50
    drain: int = 150
    detect_lag: int = 150
    faulty: tuple[str, ...] = ()

    def to_text(self) -> str:
        lines = [
            f"seed={self.seed}",
            f"duration={self.duration}",
            f"topology={self.topology}",
            f"link_delay={self.link_delay[0]},{self.link_delay[1]}",
            f"window_len={self.window_len}",
            f"stride={self.stride}",
            f"drain={self.drain}",
            f"detect_lag={self.detect_lag}",
        ]
        if self.faulty:
            lines.append("faulty=" + ",".join(self.faulty))
        lines += [a.line() for a in self.attacks]
        return "\n".join(lines) + "\n"


def parse_kv_lines(text: str) -> list[tuple[str, str]]:
    """``key=value`` pairs in order; blank lines and ``#`` comments skipped."""
    out = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def parse_scenario(text: str) -> SimConfig:
    cfg = SimConfig()
    ints = {"seed", "duration", "window_len", "stride", "drain", "detect_lag"}
    for k, v in parse_kv_lines(text):
        try:
            if k in ints:
                setattr(cfg, k, int(v))
            elif k == "topology":
                cfg.topology = v
            elif k == "link_delay":
                lo, hi = (int(x) for x in v.split(","))
                cfg.link_delay = (lo, hi)
            elif k == "faulty":
                cfg.faulty = tuple(x.strip() for x in v.split(",") if x.strip())
            elif k == "attack":
                kind, site, source, start, end = (x.strip() for x in v.split(","))
                cfg.attacks.append(Attack(kind, site, source, int(start), int(end)))
            else:
                raise ConfigError(f"unknown scenario key {k!r}")
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad value for {k!r}: {v!r}") from e
    return cfg


def load_scenario(path: str | Path) -> SimConfig:
    return parse_scenario(Path(path).read_text())


@dataclass(order=True)
class SimEvent:
    at: int
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(compare=False, default=None)
    parent: Optional[int] = field(compare=False, default=None)


@dataclass
class NodeState:
    name: str
    site: str
    is_manager: bool
    seen: set[bytes] = field(default_factory=set)
    latest: bytes = b""
    chain: Optional[Chain] = None
    pool: Optional[PendingPool] = None
    last_block_tick: int = 0
    proposal: Optional[Block] = None
    proposal_at: int = 0
    endorsements: list[tuple[bytes, bytes]] = field(default_factory=list)
    future: list[tuple[str, Block]] = field(default_factory=list)


@dataclass
class SimResult:
    chain: Chain
    replicas: dict[str, Chain]
    records: dict[str, list[RawRecord]]
    record_tx: dict[bytes, tuple[str, int]]
    labels: list[SourceWindowLabel]
    alerts: list[Transaction] = field(default_factory=list)
    reports: list[Any] = field(default_factory=list)
    trace: list[tuple[int, int, str, Optional[int]]] = field(default_factory=list)
    deliveries: dict[str, int] = field(default_factory=dict)
    duplicates: int = 0

    def chain_bytes(self) -> bytes:
        return encode_chain(self.chain)


def labels_csv(labels: Iterable[SourceWindowLabel]) -> str:
    lines = ["source_id,window_start,window_end,label"]
    lines += [f"{l.source_id},{l.window_start},{l.window_end},{l.label}" for l in labels]
    return "\n".join(lines) + "\n"


class Simulator:
    """Single event loop; events run in (tick, insertion order)."""

    def __init__(self, config: SimConfig, topo: Optional[SiteTopology] = None,
                 detectors: Optional[dict[str, Any]] = None):
        self.config = config
        self.topo = topo if topo is not None else build_topology(config.topology, config.seed)
        self.detectors = detectors or {}
        self._validate()
        self.rng = np.random.default_rng(int.from_bytes(derive_seed(config.seed, "links")[:8], "big"))
        self.entropy = DeterministicEntropy(derive_seed(config.seed, "envelopes"))
        self.queue: list[SimEvent] = []
        self._seq = 0
        self.now = 0
        self.current: Optional[SimEvent] = None
        self.trace: list[tuple[int, int, str, Optional[int]]] = []
        self.deliveries: dict[str, int] = {}
        self.duplicates = 0
        self.alerts: list[Transaction] = []
        self.reports: list[Any] = []
        topo = self.topo
        vset = ValidatorSet(tuple(v.pk for v in topo.validators()))
        all_pks = [d.pk for d in topo.nodes()]
        self.nodes: dict[str, NodeState] = {}
        for dev in topo.nodes():
            self.nodes[dev.name] = NodeState(dev.name, topo.site_of(dev.name), dev.kind == MANAGER)
        for v in topo.validators():
            node = self.nodes[v.name]
            node.chain = create_chain(topo.authority, topo.data_keys.public, vset, all_pks)
            node.pool = PendingPool()
        genesis = next(iter(self.nodes[topo.validator_names[0]].chain.blocks))
        for tx in genesis.transactions:
            dev = topo.by_pk(tx.pk)
            self.nodes[dev.name].latest = tx.t_id
        self.records: dict[str, list[RawRecord]] = {}
        self.record_tx: dict[bytes, tuple[str, int]] = {}

    def _validate(self) -> None:
        c = self.config
        if c.duration < 0:
            raise ConfigError("duration must be >= 0")
        lo, hi = c.link_delay
        if lo < 1 or hi < lo:
            raise ConfigError(f"link delays must satisfy 1 <= min <= max, got {c.link_delay}")
        if c.window_len < 1 or c.stride < 1:
            raise ConfigError("window_len and stride must be >= 1")
        for f in c.faulty:
            if f not in self.topo.validator_names:
                raise ConfigError(f"faulty node {f!r} is not a validator")
        try:
            self.schedule_attacks = AttackSchedule(c.duration)
            for a in c.attacks:
                if a.kind not in ATTACK_KINDS:
                    raise AttackConfigError(f"unknown attack kind {a.kind!r}")
                dev = self.topo.device(a.source)
                if self.topo.site_of(a.source) != a.site:
                    raise ConfigError(f"{a.source} is not in site {a.site}")
                check_attack_target(a, dev)
                self.schedule_attacks.inject(a)
        except (AttackConfigError, TopologyError) as e:
            raise ConfigError(str(e)) from e

    # -- queue ---------------------------------------------------------------

    def schedule(self, at: int, kind: str, payload: Any = None) -> SimEvent:
        if at < self.now:
            raise RuntimeError(f"cannot schedule {kind} at {at} before now={self.now}")
        ev = SimEvent(at, self._seq, kind, payload,
                      self.current.seq if self.current is not None else None)
        self._seq += 1
        heapq.heappush(self.queue, ev)
        return ev

    def delay(self) -> int:
        lo, hi = self.config.link_delay
        return int(self.rng.integers(lo, hi + 1))

    def send(self, frm: str, to: str, msg: tuple) -> SimEvent:
        return self.schedule(self.now + self.delay(), DELIVER, (to, frm, msg))

    # -- gossip --------------------------------------------------------------

    def _forward_targets(self, node: str, tx: Transaction, exclude: Optional[str]) -> list[str]:
        out = []
        me = self.nodes[node]
        origin = self.topo.by_pk(tx.pk)
        origin_site = self.topo.site_of(origin.name) if origin else me.site
        for n in self.topo.neighbors(node):
            if n == exclude:
                continue
            other = self.nodes[n]
            # cross-site copies only travel between managers
            if other.site != me.site and not other.is_manager:
                continue
            if me.is_manager and not other.is_manager and origin_site != me.site:
                continue
            out.append(n)
        return out

    def broadcast_transaction(self, from_device: str | bytes, tx: Transaction) -> list[SimEvent]:
        """Send ``tx`` from a device to each of its neighbours."""
        if isinstance(from_device, bytes):
            dev = self.topo.by_pk(from_device)
            if dev is None:
                raise TopologyError(f"unknown device {from_device.hex()[:12]}")
            from_device = dev.name
        node = self.nodes.get(from_device)
        if node is None:
            raise TopologyError(f"unknown device {from_device!r}")
        node.seen.add(tx.t_id)
        if node.pool is not None:
            node.pool.add(tx)
        return [self.send(from_device, n, ("tx", tx))
                for n in self._forward_targets(from_device, tx, None)]

    def _on_tx(self, node: NodeState, frm: str, tx: Transaction) -> None:
        if tx.t_id in node.seen:
            self.duplicates += 1
            return
        node.seen.add(tx.t_id)
        self.deliveries[node.name] = self.deliveries.get(node.name, 0) + 1
        if node.pool is not None and tx.t_id not in node.chain.locations:
            node.pool.add(tx)
        for n in self._forward_targets(node.name, tx, frm):
            self.send(node.name, n, ("tx", tx))

    # -- consensus -----------------------------------------------------------

    def _keys(self, name: str):
        return self.topo.device(name).keys

    def _on_timer(self, node: NodeState) -> None:
        chain = node.chain
        me = self._keys(node.name)
        if node.proposal is not None:
            if self.now - node.proposal_at < PROPOSAL_TIMEOUT:
                return
            log.debug("%s abandons proposal at height %d", node.name, node.proposal.height)
            node.proposal = None
        if scheduled_proposer(chain.params.validators, chain.height + 1) != me.public:
            return
        if not should_propose(len(node.pool), self.now, node.last_block_tick):
            return
        try:
            prop = propose_block(node.pool, chain, me, self.now)
        except EmptyProposal:
            return
        node.pool.discard(t for t, _ in prop.skipped)
        node.proposal, node.proposal_at, node.endorsements = prop.block, self.now, []
        if node.name not in self.config.faulty:
            node.endorsements.append(endorse_block(prop.block, me, chain))
        for v in self.topo.validator_names:
            if v != node.name:
                self.send(node.name, v, ("proposal", prop.block))
        self._try_finalize(node)

    def _try_finalize(self, node: NodeState) -> None:
        block = node.proposal
        if block is None or len({pk for pk, _ in node.endorsements}) < node.chain.params.validators.quorum:
            return
        try:
            finalize_block(block, node.endorsements, node.chain, node.pool)
        except BlockRejected as e:
            log.debug("finalize failed: %s", e)
            return
        node.proposal = None
        node.last_block_tick = self.now
        final = node.chain.blocks[-1]
        for v in self.topo.validator_names:
            if v != node.name:
                self.send(node.name, v, ("commit", final))
        self._drain_future(node)

    def _on_proposal(self, node: NodeState, frm: str, block: Block) -> None:
        if block.height > node.chain.height + 1:
            node.future.append(("proposal", block))
            return
        if node.name in self.config.faulty:
            return
        try:
            endorsement = endorse_block(block, self._keys(node.name), node.chain)
        except (BlockRejected, PermissionError) as e:
            log.debug("%s rejects proposal: %s", node.name, e)
            return
        self.send(node.name, frm, ("endorse", block.hash(), endorsement))

    def _on_endorse(self, node: NodeState, block_hash: bytes, endorsement: tuple[bytes, bytes]) -> None:
        if node.proposal is None or node.proposal.hash() != block_hash:
            return
        node.endorsements.append(endorsement)
        self._try_finalize(node)

    def _on_commit(self, node: NodeState, block: Block) -> None:
        if block.height <= node.chain.height:
            return
        if block.height > node.chain.height + 1:
            node.future.append(("commit", block))
            return
        try:
            append_block(node.chain, block)
        except BlockRejected as e:
            log.warning("%s rejects committed block %d: %s", node.name, block.height, e)
            return
        node.pool.prune(node.chain)
        node.last_block_tick = self.now
        if node.proposal is not None and node.proposal.height <= node.chain.height:
            node.proposal = None
        self._drain_future(node)

    def _drain_future(self, node: NodeState) -> None:
        pending, node.future = node.future, []
        for kind, block in sorted(pending, key=lambda kb: (kb[1].height, kb[0] != "commit")):
            if kind == "commit":
                self._on_commit(node, block)
            else:
                self._on_proposal(node, self.topo.by_pk(block.proposer_pk).name, block)

    # -- devices and detection -----------------------------------------------

    def _on_log(self, source: str, index: int) -> None:
        rec = self.records[source][index]
        node = self.nodes[source]
        dev = self.topo.device(source)
        tx = build_device_tx(TxKind.LOG_STORE, dev.keys, node.latest, rec.to_payload(),
                             self.topo.data_keys.public, timestamp=rec.tick, entropy=self.entropy)
        node.latest = tx.t_id
        self.record_tx[tx.t_id] = (source, index)
        self.broadcast_transaction(source, tx)

    def _on_detect(self, site_id: str) -> None:
        det = self.detectors[site_id]
        manager = self.topo.site(site_id).manager.name
        node = self.nodes[manager]
        chain = node.chain if node.chain is not None else self._reference_chain()
        up_to = self.now - self.config.detect_lag
        if up_to <= 0:
            return
        reports, alerts = det.detect(chain, up_to, entropy=self.entropy, timestamp=self.now)
        self.reports.extend(reports)
        for tx in alerts:
            self.broadcast_transaction(manager, tx)

    def _reference_chain(self) -> Chain:
        return self.nodes[self.topo.validator_names[0]].chain

    # -- main loop -----------------------------------------------------------

    def _bootstrap(self) -> None:
        c = self.config
        attacks = list(self.schedule_attacks)
        for dev in self.topo.sources():
            recs = generate_traffic(dev, c.duration, attacks, c.seed)
            self.records[dev.name] = recs
            for i, r in enumerate(recs):
                self.schedule(r.tick, DEVICE_LOG, (dev.name, i))
        for a in attacks:
            self.schedule(a.start, ATTACK_START, a)
            self.schedule(a.end, ATTACK_END, a)
        end = c.duration + c.drain if c.duration > 0 else 0
        for v in self.topo.validator_names:
            for t in range(TIMER_PERIOD, end + 1, TIMER_PERIOD):
                self.schedule(t, PROPOSE_TIMER, v)
        for site_id in sorted(self.detectors):
            for t in range(c.window_len, end + 1, c.window_len):
                self.schedule(t, DETECT_TIMER, site_id)
        self.end = end

    def process(self, until: int) -> int:
        """Execute queued events with ``at <= until``; returns how many ran."""
        n = 0
        while self.queue and self.queue[0].at <= until:
            ev = heapq.heappop(self.queue)
            self.now = ev.at
            self.current = ev
            self.trace.append((ev.at, ev.seq, ev.kind, ev.parent))
            self._dispatch(ev)
            n += 1
        self.current = None
        return n

    def run(self) -> SimResult:
        self._bootstrap()
        self.process(self.end)
        return self._result()

    def _dispatch(self, ev: SimEvent) -> None:
        if ev.kind == DEVICE_LOG:
            self._on_log(*ev.payload)
        elif ev.kind == DELIVER:
            to, frm, (kind, body, *rest) = ev.payload
            node = self.nodes[to]
            if kind == "tx":
                self._on_tx(node, frm, body)
            elif kind == "proposal":
                self._on_proposal(node, frm, body)
            elif kind == "endorse":
                self._on_endorse(node, body, rest[0])
            elif kind == "commit":
                self._on_commit(node, body)
        elif ev.kind == PROPOSE_TIMER:
            self._on_timer(self.nodes[ev.payload])
        elif ev.kind == DETECT_TIMER:
            self._on_detect(ev.payload)
        elif ev.kind in (ATTACK_START, ATTACK_END):
            log.debug("%s %s on %s at %d", ev.kind, ev.payload.kind, ev.payload.source, ev.at)

    def _result(self) -> SimResult:
        c = self.config
        replicas = {v: self.nodes[v].chain for v in self.topo.validator_names}
        chain = self._reference_chain()
        attacks = list(self.schedule_attacks)
        labels = []
        for dev in self.topo.sources():
            labels += label_source_windows(self.records[dev.name], attacks, c.duration,
                                           c.window_len, c.stride)
        alerts = [tx for _, _, tx in chain.transactions() if tx.kind is TxKind.ANOMALY_ALERT]
        return SimResult(chain, replicas, self.records, self.record_tx, labels, alerts,
                         self.reports, self.trace, self.deliveries, self.duplicates)


def run_simulation(config: SimConfig, topo: Optional[SiteTopology] = None,
                   detectors: Optional[dict[str, Any]] = None) -> SimResult:
    """Run to ``duration`` (plus drain ticks for in-flight blocks)."""
    return Simulator(config, topo, detectors).run()
