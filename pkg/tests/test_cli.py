"""Command-line verbs, exit codes, config precedence and manifests."""
from __future__ import annotations

import hashlib
import json
import subprocess
import sys

import pytest

from icschain.cli import VERBS, build_parser, main, path_digest, read_devices
from icschain.crypto import read_key_file
from icschain.ledger import load_chain


def run(*argv: str) -> int:
    return main([str(a) for a in argv])


def tree(path) -> dict[str, str]:
    return {p.relative_to(path).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One small dataset, model and simulated chain shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--profile", "factory-like", "--seed", 7, "--n-train", 120,
               "--n-test", 60, "--out-dir", root / "data") == 0
    assert run("train", "--data", root / "data", "--iters", 40, "--hidden", 8, "--lr", 0.05,
               "--out-dir", root / "model") == 0
    assert run("simulate", "--topology", "site-b", "--duration", 400, "--seed", 3,
               "--attack", "flooding,B,B-tank-tap,100,250", "--out-dir", root / "sim") == 0
    return root


class TestParser:
    def test_all_verbs_present(self):
        _, subs = build_parser()
        assert tuple(subs) == VERBS

    @pytest.mark.parametrize("verb", VERBS)
    def test_verb_help(self, verb, capsys):
        assert run(verb, "--help") == 0
        assert f"usage: icschain {verb}" in capsys.readouterr().out

    def test_unknown_verb(self, capsys):
        assert run("mine") == 2
        assert "invalid choice" in capsys.readouterr().err

    def test_unknown_flag_names_verb(self, tmp_path, capsys):
        assert run("keygen", "--colour", "red", "--out-dir", tmp_path / "k") == 2
        err = capsys.readouterr().err
        assert "--colour" in err
        assert "usage: icschain keygen" in err
        assert not (tmp_path / "k").exists()

    @pytest.mark.parametrize("argv", [
        ["train"],
        ["train", "--data", "x", "--iters", "-5"],
        ["simulate", "--attack", "flooding,B"],
        ["gen-data", "--profile", "brewery"],
        ["detect", "--chain", "c"],
    ])
    def test_usage_errors(self, argv, tmp_path):
        assert run(*argv, "--out-dir", tmp_path / "o") == 2
        assert not (tmp_path / "o").exists()

    def test_missing_input(self, tmp_path, capsys):
        assert run("verify", "--chain", tmp_path / "nope.bin", "--out-dir", tmp_path / "o") == 2
        assert "does not exist" in capsys.readouterr().err

    def test_out_dir_may_not_be_input(self, workspace):
        assert run("train", "--data", workspace / "data", "--out-dir", workspace / "data") == 2


class TestKeysAndChains:
    def test_keygen(self, tmp_path):
        assert run("keygen", "--name", "plc1", "--seed", 4, "--out-dir", tmp_path / "a") == 0
        assert run("keygen", "--name", "plc1", "--seed", 4, "--out-dir", tmp_path / "b") == 0
        assert run("keygen", "--name", "plc1", "--seed", 5, "--out-dir", tmp_path / "c") == 0
        kind, pk = read_key_file(tmp_path / "a" / "plc1.pk")
        assert kind == "pk" and len(pk) == 32
        assert read_key_file(tmp_path / "a" / "plc1.sk")[0] == "sk"
        assert (tmp_path / "a" / "plc1.pk").read_bytes() == (tmp_path / "b" / "plc1.pk").read_bytes()
        assert (tmp_path / "a" / "plc1.pk").read_bytes() != (tmp_path / "c" / "plc1.pk").read_bytes()

    def test_chain_init_then_verify(self, tmp_path, capsys):
        assert run("chain-init", "--topology", "site-a", "--out-dir", tmp_path / "c") == 0
        chain = load_chain(tmp_path / "c" / "chain.bin")
        assert chain.height == 0
        assert len(read_devices(tmp_path / "c" / "devices.csv")) == 4
        assert run("verify", "--chain", tmp_path / "c" / "chain.bin", "--out-dir", tmp_path / "v") == 0
        assert (tmp_path / "v" / "audit.txt").read_text().startswith("clean")

    def test_verify_tampered(self, workspace, tmp_path, capsys):
        data = bytearray((workspace / "sim" / "chain.bin").read_bytes())
        chain = load_chain(workspace / "sim" / "chain.bin")
        target = chain.blocks[3].transactions[1]
        pos = bytes(data).index(target.t_id)
        data[pos] ^= 0x01
        bad = tmp_path / "bad.bin"
        bad.write_bytes(bytes(data))
        assert run("verify", "--chain", bad, "--out-dir", tmp_path / "v") == 1
        report = (tmp_path / "v" / "audit.txt").read_text()
        assert report.startswith("FAILED at height 3, tx 1")

    def test_verify_undecodable(self, tmp_path):
        junk = tmp_path / "junk.bin"
        junk.write_bytes(b"\x00\x01garbage")
        assert run("verify", "--chain", junk, "--out-dir", tmp_path / "v") == 1
        assert "does not decode" in (tmp_path / "v" / "audit.txt").read_text()

    def test_export(self, workspace, tmp_path):
        assert run("export", "--chain", workspace / "sim" / "chain.bin", "--out-dir", tmp_path) == 0
        lines = (tmp_path / "chain.csv").read_text().splitlines()
        chain = load_chain(workspace / "sim" / "chain.bin")
        assert len(lines) == 1 + sum(len(b.transactions) for b in chain.blocks)


class TestPipeline:
    def test_gen_data_outputs(self, workspace):
        names = set(tree(workspace / "data"))
        assert {"windows.bin", "labels.csv", "normalizer.txt", "dataset.txt", "manifest.json"} <= names
        assert "records/B-tank-tap.csv" in names

    def test_gen_data_deterministic(self, workspace, tmp_path):
        assert run("gen-data", "--profile", "factory-like", "--seed", 7, "--n-train", 120,
                   "--n-test", 60, "--out-dir", tmp_path) == 0
        assert tree(tmp_path) == tree(workspace / "data")

    def test_train_outputs(self, workspace):
        m = workspace / "model"
        assert {"model.bin", "normalizer.txt", "bundle.txt", "trace.csv", "convergence.png"} <= set(tree(m))
        assert len((m / "trace.csv").read_text().splitlines()) == 41

    def test_train_deterministic(self, workspace, tmp_path):
        assert run("train", "--data", workspace / "data", "--iters", 40, "--hidden", 8, "--lr", 0.05,
                   "--out-dir", tmp_path) == 0
        assert tree(tmp_path) == tree(workspace / "model")

    def test_simulate_outputs(self, workspace):
        s = workspace / "sim"
        names = set(tree(s))
        assert {"chain.bin", "devices.csv", "scenario.txt", "labels.csv", "alerts.csv",
                "reports.jsonl", "pk_data.sk", "authority.pk"} <= names
        assert "attack=flooding,B,B-tank-tap,100,250" in (s / "scenario.txt").read_text()
        assert ",anomalous" in (s / "labels.csv").read_text()

    def test_simulate_deterministic(self, workspace, tmp_path):
        assert run("simulate", "--topology", "site-b", "--duration", 400, "--seed", 3,
                   "--attack", "flooding,B,B-tank-tap,100,250", "--out-dir", tmp_path) == 0
        assert tree(tmp_path) == tree(workspace / "sim")

    def test_metrics(self, workspace, tmp_path):
        assert run("metrics", "--data", workspace / "data", "--model", workspace / "model",
                   "--out-dir", tmp_path) == 0
        assert (tmp_path / "metrics.csv").read_text().startswith(
            "dataset,method,precision,recall,f1,accuracy\nfactory-like,MS-DNN,")
        roc = (tmp_path / "roc.csv").read_text().splitlines()
        assert roc[0] == "threshold,tpr,fpr" and roc[1] == "0.0,1.0,1.0"
        assert (tmp_path / "roc.png").read_bytes().startswith(b"\x89PNG")
        assert "auc=" in (tmp_path / "metrics.txt").read_text()

    def test_detect(self, workspace, tmp_path):
        s = workspace / "sim"
        assert run("detect", "--chain", s / "chain.bin", "--devices", s / "devices.csv",
                   "--model", workspace / "model", "--key", s / "pk_data.sk", "--site", "B",
                   "--out-dir", tmp_path) == 0
        lines = (tmp_path / "reports.csv").read_text().splitlines()
        assert lines[0] == "window_start,window_end,suspect,category,score"
        assert len(lines) - 1 == len((tmp_path / "reports.jsonl").read_text().splitlines())

    def test_detect_runtime_failure(self, workspace, tmp_path, capsys):
        s = workspace / "sim"
        assert run("detect", "--chain", s / "chain.bin", "--devices", s / "devices.csv",
                   "--model", workspace / "model", "--key", s / "pk_data.sk", "--site", "A",
                   "--out-dir", tmp_path) == 1
        assert "outside site A" in capsys.readouterr().err

    def test_inputs_not_mutated(self, workspace, tmp_path):
        before = tree(workspace / "data"), tree(workspace / "model")
        run("metrics", "--data", workspace / "data", "--model", workspace / "model", "--out-dir", tmp_path)
        assert (tree(workspace / "data"), tree(workspace / "model")) == before


class TestManifestAndConfig:
    def test_manifest(self, workspace):
        man = json.loads((workspace / "model" / "manifest.json").read_text())
        assert man["verb"] == "train"
        assert man["seed"] == 0
        assert man["options"]["iters"] == 40 and man["options"]["hidden"] == 8
        assert man["inputs"] == {"data": path_digest(workspace / "data")}
        files = tree(workspace / "model")
        files.pop("manifest.json")
        assert man["outputs"] == files

    def test_simulate_manifest_records_seed(self, workspace):
        man = json.loads((workspace / "sim" / "manifest.json").read_text())
        assert man["seed"] == 3
        assert man["options"]["attack"] == ["attack=flooding,B,B-tank-tap,100,250"]

    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("topology=site-a\nduration=100\nseed=9\n")
        assert run("simulate", "--config", cfg, "--duration", 60, "--out-dir", tmp_path / "o") == 0
        text = (tmp_path / "o" / "scenario.txt").read_text()
        assert "duration=60" in text and "seed=9" in text and "topology=site-a" in text
        assert json.loads((tmp_path / "o" / "manifest.json").read_text())["inputs"]["config"] == \
            path_digest(cfg)

    def test_config_supplies_repeatable_option(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("topology=site-b\nduration=200\nattack=flooding,B,B-tank-tap,50,100\n")
        assert run("simulate", "--config", cfg, "--out-dir", tmp_path / "o") == 0
        assert "attack=flooding,B,B-tank-tap,50,100" in (tmp_path / "o" / "scenario.txt").read_text()

    def test_config_satisfies_required(self, workspace, tmp_path):
        cfg = tmp_path / "v.cfg"
        cfg.write_text(f"chain={workspace / 'sim' / 'chain.bin'}\n")
        assert run("verify", "--config", cfg, "--out-dir", tmp_path / "o") == 0

    @pytest.mark.parametrize("text", ["colour=red\n", "duration=soon\n", "topology=moon\n", "novalue\n"])
    def test_bad_config(self, tmp_path, text):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(text)
        assert run("simulate", "--config", cfg, "--out-dir", tmp_path / "o") == 2

    def test_scenario_file(self, tmp_path):
        sc = tmp_path / "s.txt"
        sc.write_text("seed=2\nduration=120\ntopology=site-a\nattack=mitm,A,A-sensors,50,100\n")
        assert run("simulate", "--scenario", sc, "--out-dir", tmp_path / "o") == 0
        assert (tmp_path / "o" / "scenario.txt").read_text().startswith("seed=2\nduration=120\n")

    def test_bad_scenario_is_runtime_failure(self, tmp_path):
        sc = tmp_path / "s.txt"
        sc.write_text("topology=site-a\nattack=flooding,A,A-sensors,0,10\n")
        assert run("simulate", "--scenario", sc, "--out-dir", tmp_path / "o") == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "icschain", "keygen", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert (tmp_path / "device.pk").exists()
