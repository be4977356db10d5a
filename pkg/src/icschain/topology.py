"""Multi-site ICS topologies: devices, site managers and their links."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .crypto import KeyPair, derive_seed, generate_keypair

SENSOR = "sensor"
ACTUATOR = "actuator"
TAP = "network-tap"
MANAGER = "manager"
DEVICE_KINDS = (SENSOR, ACTUATOR, TAP)


@dataclass(frozen=True)
class Device:
    name: str
    kind: str
    keys: KeyPair
    profile: str | None = None

    @property
    def pk(self) -> bytes:
        return self.keys.public


@dataclass(frozen=True)
class Site:
    site_id: str
    devices: tuple[Device, ...]
    manager: Device
    edges: tuple[tuple[str, str], ...] = ()

    @property
    def sources(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.devices)

    def nodes(self) -> tuple[Device, ...]:
        return self.devices + (self.manager,)


class TopologyError(ValueError):
    pass


@dataclass
class SiteTopology:
    sites: tuple[Site, ...]
    authority: KeyPair
    data_keys: KeyPair
    validator_names: tuple[str, ...] = ()
    _by_name: dict[str, Device] = field(init=False, repr=False)
    _site_of: dict[str, str] = field(init=False, repr=False)
    _adj: dict[str, list[str]] = field(init=False, repr=False)
    _pk_index: dict[bytes, Device] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_name, self._site_of, self._adj = {}, {}, {}
        for site in self.sites:
            for dev in site.nodes():
                if dev.name in self._by_name:
                    raise TopologyError(f"device {dev.name!r} appears in more than one site")
                if dev is not site.manager and dev.kind not in DEVICE_KINDS:
                    raise TopologyError(f"device {dev.name!r} has unknown kind {dev.kind!r}")
                self._by_name[dev.name] = dev
                self._site_of[dev.name] = site.site_id
                self._adj[dev.name] = []
        self._pk_index = {d.pk: d for d in self._by_name.values()}
        for site in self.sites:
            for a, b in site.edges:
                self._link(a, b, same_site=site.site_id)
        managers = [s.manager.name for s in self.sites]
        for i, a in enumerate(managers):
            for b in managers[i + 1:]:
                self._link(a, b)
        if not self.validator_names:
            self.validator_names = tuple(managers)
        for v in self.validator_names:
            if v not in self._by_name:
                raise TopologyError(f"validator {v!r} is not a node")

    def _link(self, a: str, b: str, same_site: str | None = None) -> None:
        for n in (a, b):
            if n not in self._by_name:
                raise TopologyError(f"edge references unknown node {n!r}")
            if same_site and self._site_of[n] != same_site:
                raise TopologyError(f"edge {a}-{b} leaves site {same_site}")
        if a == b:
            raise TopologyError(f"self-loop on {a!r}")
        if b not in self._adj[a]:
            self._adj[a].append(b)
            self._adj[b].append(a)

    def device(self, name: str) -> Device:
        try:
            return self._by_name[name]
        except KeyError:
            raise TopologyError(f"unknown device {name!r}") from None

    def by_pk(self, pk: bytes) -> Device | None:
        return self._pk_index.get(pk)

    def neighbors(self, name: str) -> list[str]:
        self.device(name)
        return list(self._adj[name])

    def site(self, site_id: str) -> Site:
        for s in self.sites:
            if s.site_id == site_id:
                return s
        raise TopologyError(f"unknown site {site_id!r}")

    def site_of(self, name: str) -> str:
        self.device(name)
        return self._site_of[name]

    def nodes(self) -> list[Device]:
        return list(self._by_name.values())

    def sources(self) -> list[Device]:
        return [d for s in self.sites for d in s.devices]

    def validators(self) -> list[Device]:
        return [self._by_name[v] for v in self.validator_names]


def _keys(seed: int, *label: object) -> KeyPair:
    return generate_keypair(derive_seed(seed, "key", *label))


def _site(seed: int, site_id: str, layout: Iterable[tuple[str, str, str]], ring: bool = True) -> Site:
    devices = tuple(Device(n, k, _keys(seed, n), p) for n, k, p in layout)
    manager = Device(f"{site_id}-manager", MANAGER, _keys(seed, site_id, "manager"))
    names = [d.name for d in devices]
    edges = [(n, manager.name) for n in names]
    if ring:
        edges += list(zip(names, names[1:]))
    return Site(site_id, devices, manager, tuple(edges))


def swat_like_site(seed: int, site_id: str = "A") -> Site:
    """Six-stage water treatment: stage sensors, stage actuators, Modbus tap."""
    return _site(seed, site_id, [
        (f"{site_id}-sensors", SENSOR, "swat-sensors"),
        (f"{site_id}-actuators", ACTUATOR, "swat-actuators"),
        (f"{site_id}-tap", TAP, "modbus-tap"),
    ])


def factory_like_site(seed: int, site_id: str = "B") -> Site:
    """Three-stage factory: conveyor, tank and pressure-vessel PLC taps plus process sensors."""
    return _site(seed, site_id, [
        (f"{site_id}-conveyor-tap", TAP, "s7-tap"),
        (f"{site_id}-tank-tap", TAP, "s7-tap"),
        (f"{site_id}-vessel-tap", TAP, "s7-tap"),
        (f"{site_id}-process", SENSOR, "factory-process"),
    ])


def make_topology(sites: Iterable[Site], seed: int, validator_names: Iterable[str] = ()) -> SiteTopology:
    return SiteTopology(
        tuple(sites),
        authority=generate_keypair(derive_seed(seed, "authority")),
        data_keys=generate_keypair(derive_seed(seed, "pk_data")),
        validator_names=tuple(validator_names),
    )


TOPOLOGIES = ("site-a", "site-b", "two-site")
PROFILE_TOPOLOGY = {"swat-like": "site-a", "factory-like": "site-b"}


def build_topology(name: str, seed: int) -> SiteTopology:
    name = PROFILE_TOPOLOGY.get(name, name)
    if name == "site-a":
        return make_topology([swat_like_site(seed, "A")], seed)
    if name == "site-b":
        return make_topology([factory_like_site(seed, "B")], seed)
    if name == "two-site":
        return make_topology([swat_like_site(seed, "A"), factory_like_site(seed, "B")], seed)
    raise TopologyError(f"unknown topology {name!r}; choose from {', '.join(TOPOLOGIES)}")
