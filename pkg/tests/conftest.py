"""Shared fixtures: deterministic keys, small committed chains, trained models."""
from __future__ import annotations

import time
from dataclasses import dataclass

import pytest

from icschain.consensus import PendingPool, endorse_block, finalize_block, propose_block
from icschain.crypto import DeterministicEntropy, derive_seed, generate_keypair
from icschain.detector import ModelBundle
from icschain.features import Dataset, generate_synthetic
from icschain.ledger import Chain, TxKind, build_device_tx, create_chain
from icschain.msdnn import TrainConfig, TrainResult, gradient_check, init_model, train
from icschain.validators import ValidatorSet, scheduled_proposer


def keys(*label):
    return generate_keypair(derive_seed("tests", *label))


class ChainBuilder:
    """Drives propose/endorse/finalize directly, without the simulator."""

    def __init__(self, n_devices: int = 3, n_validators: int = 4, seed: int = 0):
        self.authority = keys(seed, "authority")
        self.data = keys(seed, "pk_data")
        self.devices = [keys(seed, "device", i) for i in range(n_devices)]
        self.validators = [keys(seed, "validator", i) for i in range(n_validators)]
        self.vset = ValidatorSet(tuple(v.public for v in self.validators))
        self.entropy = DeterministicEntropy(derive_seed(seed, "entropy"))
        self.chain: Chain = create_chain(self.authority, self.data.public, self.vset,
                                         [d.public for d in self.devices])
        self.latest = {d.public: self.chain.latest_t_id(d.public) for d in self.devices}
        self.tick = 0

    def log_tx(self, device_index: int, payload: bytes = b"reading"):
        dev = self.devices[device_index]
        self.tick += 1
        tx = build_device_tx(TxKind.LOG_STORE, dev, self.latest[dev.public], payload,
                             self.chain.current_pk_data, timestamp=self.tick, entropy=self.entropy)
        self.latest[dev.public] = tx.t_id
        return tx

    def proposer(self, height: int | None = None):
        pk = scheduled_proposer(self.vset, height or self.chain.height + 1)
        return next(v for v in self.validators if v.public == pk)

    def commit(self, txs) -> None:
        pool = PendingPool(txs)
        prop = propose_block(pool, self.chain, self.proposer(), self.tick)
        ends = [endorse_block(prop.block, v, self.chain) for v in self.validators]
        finalize_block(prop.block, ends, self.chain, pool)

    def grow(self, n_blocks: int, per_block: int) -> Chain:
        for b in range(n_blocks):
            self.commit([self.log_tx((b + i) % len(self.devices), f"log {b}.{i}".encode())
                         for i in range(per_block)])
        return self.chain


@pytest.fixture
def builder() -> ChainBuilder:
    return ChainBuilder()


@pytest.fixture(scope="session")
def small_chain() -> ChainBuilder:
    b = ChainBuilder()
    b.grow(4, 3)
    return b


SMALL_HIDDEN = 16


def small_bundle(profile: str, seed: int = 11) -> ModelBundle:
    """A 16-unit model trained briefly on a reduced dataset; enough to detect
    the synthetic attacks reliably in unit tests."""
    ds = generate_synthetic(profile, seed, n_train=600, n_test=300)
    X, y = ds.arrays("train")
    model = init_model(X[0].shape[1], ds.n_classes, SMALL_HIDDEN, seed=0)
    res = train(model, X, y, TrainConfig(learning_rate=0.05, max_iterations=400))
    return ModelBundle.from_dataset(res.model, ds)


@pytest.fixture(scope="session")
def bundle_for():
    """Lazily trains and caches one small bundle per profile."""
    cache: dict[str, ModelBundle] = {}

    def get(profile: str) -> ModelBundle:
        if profile not in cache:
            cache[profile] = small_bundle(profile)
        return cache[profile]
    return get


@dataclass
class FullRun:
    """A default-size model trained with the default configuration."""
    dataset: Dataset
    result: TrainResult
    seconds: float

    @property
    def bundle(self) -> ModelBundle:
        return ModelBundle.from_dataset(self.result.model, self.dataset)


@pytest.fixture(scope="session")
def gradient_gate():
    """Training-based checks depend on this; a failed check stops them."""
    report = gradient_check()
    if not report.passed:
        pytest.fail(f"gradient check failed (worst block {report.worst_block}); training checks skipped")
    return report


@pytest.fixture(scope="session")
def full_run(gradient_gate):
    """Lazily trains and caches one full model per (profile, seed)."""
    cache: dict[tuple[str, int], FullRun] = {}

    def get(profile: str, seed: int) -> FullRun:
        if (profile, seed) not in cache:
            ds = generate_synthetic(profile, seed)
            X, y = ds.arrays("train")
            start = time.perf_counter()
            res = train(init_model(X[0].shape[1], ds.n_classes, seed=seed), X, y,
                        TrainConfig(seed=seed))
            cache[profile, seed] = FullRun(ds, res, time.perf_counter() - start)
        return cache[profile, seed]
    return get


# -- acceptance summary ------------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    if rep.failed:
        entry["details"].append(f"{item.name} failed in {rep.when}")
    elif rep.skipped:
        entry["ok"] = False
        entry["details"].append(f"{item.name} skipped")
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {e['title']}  [{'; '.join(e['details'])}]")
