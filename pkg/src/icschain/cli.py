"""``icschain`` command line: keys, chains, simulation, datasets, training, detection."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Optional

from .crypto import derive_seed, generate_keypair, read_key_file, write_key_file
from .detector import (
    ModelBundle,
    SiteDetector,
    auc,
    evaluate,
    metrics_csv,
    org_detect,
    read_alert,
    roc_csv,
    roc_points,
)
from .features import PROFILES, generate_synthetic, load_dataset, save_dataset
from .ledger import TxKind, create_chain, export_text, load_chain, save_chain, verify_chain
from .msdnn import HIDDEN, TrainConfig, init_model, train
from .records import write_records
from .simulation import ConfigError, SimConfig, labels_csv, load_scenario, parse_kv_lines, run_simulation
from .topology import TOPOLOGIES, SiteTopology, build_topology
from .traffic import Attack
from .validators import ValidatorSet

log = logging.getLogger("icschain")

VERBS = ("keygen", "chain-init", "simulate", "gen-data", "train", "detect", "metrics", "verify", "export")
DEFAULT_SEED = 0


class UsageError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------

def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def path_digest(path: str | Path) -> str:
    """sha256 of a file, or of a directory's sorted (relative path, digest) list."""
    p = Path(path)
    if p.is_file():
        return file_digest(p)
    h = hashlib.sha256()
    for f in sorted(q for q in p.rglob("*") if q.is_file()):
        h.update(f"{f.relative_to(p).as_posix()}\0{file_digest(f)}\n".encode())
    return h.hexdigest()


def devices_csv(topo: SiteTopology) -> str:
    lines = ["name,site,kind,pk"]
    for d in topo.nodes():
        lines.append(f"{d.name},{topo.site_of(d.name)},{d.kind},{d.pk.hex()}")
    return "\n".join(lines) + "\n"


def read_devices(path: str | Path) -> dict[str, tuple[str, bytes]]:
    """name -> (site, public key) from a devices.csv written by chain-init or simulate."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "name,site,kind,pk":
        raise ValueError(f"{path}: not a devices.csv file")
    out = {}
    for line in lines[1:]:
        name, site, _, pk = line.split(",")
        out[name] = (site, bytes.fromhex(pk))
    return out


def write_topology_files(topo: SiteTopology, out: Path) -> None:
    (out / "devices.csv").write_text(devices_csv(topo))
    write_key_file(out / "pk_data.sk", "sk", topo.data_keys.secret)
    write_key_file(out / "authority.pk", "pk", topo.authority.public)


def _attack(text: str) -> Attack:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 5:
        raise argparse.ArgumentTypeError("expected kind,site,source,start,end")
    try:
        return Attack(parts[0], parts[1], parts[2], int(parts[3]), int(parts[4]))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad attack {text!r}") from None


def _site_model(text: str) -> tuple[str, str]:
    site, sep, path = text.partition("=")
    if not sep or not site or not path:
        raise argparse.ArgumentTypeError("expected SITE=MODEL_DIR")
    return site, path


def _positive(kind: Callable):
    def conv(text: str):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v
    return conv


def _nonneg(kind: Callable):
    def conv(text: str):
        v = kind(text)
        if v < 0:
            raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
        return v
    return conv


# -- verbs -----------------------------------------------------------------------

def cmd_keygen(args, out: Path) -> int:
    keys = generate_keypair(derive_seed(args.seed, "keygen", args.name))
    write_key_file(out / f"{args.name}.pk", "pk", keys.public)
    write_key_file(out / f"{args.name}.sk", "sk", keys.secret)
    print(f"{args.name}: {keys.public.hex()}")
    return 0


def cmd_chain_init(args, out: Path) -> int:
    topo = build_topology(args.topology, args.seed)
    vset = ValidatorSet(tuple(v.pk for v in topo.validators()))
    chain = create_chain(topo.authority, topo.data_keys.public, vset, [d.pk for d in topo.nodes()])
    save_chain(chain, out / "chain.bin")
    write_topology_files(topo, out)
    print(f"genesis block with {len(chain.blocks[0].transactions)} devices, "
          f"{vset.n} validators (quorum {vset.quorum})")
    return 0


def _sim_config(args) -> SimConfig:
    cfg = load_scenario(args.scenario) if args.scenario else SimConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.topology is not None:
        cfg.topology = args.topology
    if args.duration is not None:
        cfg.duration = args.duration
    if args.attack:
        cfg.attacks = list(args.attack)
    return cfg


def cmd_simulate(args, out: Path) -> int:
    cfg = _sim_config(args)
    topo = build_topology(cfg.topology, cfg.seed)
    detectors = {}
    for site, path in args.model or []:
        bundle = ModelBundle.load(path)
        site_obj = topo.site(site)
        detectors[site] = SiteDetector(
            site, bundle, [topo.device(s).pk for s in bundle.sources], [topo.data_keys.secret],
            manager=site_obj.manager.keys)
    res = run_simulation(cfg, topo, detectors)
    save_chain(res.chain, out / "chain.bin")
    write_topology_files(topo, out)
    (out / "scenario.txt").write_text(cfg.to_text())
    (out / "labels.csv").write_text(labels_csv(res.labels))
    (out / "records").mkdir(exist_ok=True)
    for name, recs in res.records.items():
        write_records(out / "records" / f"{name}.csv", recs)
    lines = ["height,index,suspect,window_start,window_end,category,score"]
    for h, i, tx in res.chain.transactions():
        if tx.kind is not TxKind.ANOMALY_ALERT:
            continue
        rep = read_alert(tx, [topo.data_keys.secret])
        suspect = topo.by_pk(tx.m_pk)
        lines.append(f"{h},{i},{suspect.name if suspect else tx.m_pk.hex()},{rep.window[0]},"
                     f"{rep.window[1]},{rep.category},{rep.score!r}")
    (out / "alerts.csv").write_text("\n".join(lines) + "\n")
    (out / "reports.jsonl").write_text("".join(r.to_json() + "\n" for r in res.reports))
    print(f"{len(res.chain.blocks)} blocks, {sum(len(b.transactions) for b in res.chain.blocks)} "
          f"transactions, {len(res.alerts)} committed alerts")
    return 0


def cmd_gen_data(args, out: Path) -> int:
    ds = generate_synthetic(args.profile, args.seed, args.n_train, args.n_test,
                            args.window_len, args.max_steps)
    save_dataset(ds, out)
    n_anom = sum(w.label != 0 for w in ds.train + ds.test)
    print(f"{args.profile}: {len(ds.train)} train / {len(ds.test)} test windows, "
          f"{n_anom} anomalous, {len(ds.sources)} sources")
    return 0


def cmd_train(args, out: Path) -> int:
    from .plotting import plot_convergence

    ds = load_dataset(args.data)
    X, y = ds.arrays("train")
    cfg = TrainConfig(args.lr, args.momentum, args.batch_size, args.iters, args.clip, args.seed)
    model = init_model(X[0].shape[1], ds.n_classes, args.hidden, seed=args.seed)
    result = train(model, X, y, cfg)
    ModelBundle.from_dataset(result.model, ds).save(out)
    (out / "trace.csv").write_text(result.trace_csv())
    plot_convergence(result.trace, out / "convergence.png", title=f"{ds.profile} training")
    final = result.trace[-1] if result.trace else None
    if final:
        print(f"iteration {final.iteration}: loss {final.loss:.5f}, accuracy {final.accuracy:.4f}")
    return 0


def cmd_detect(args, out: Path) -> int:
    chain = load_chain(args.chain)
    devices = read_devices(args.devices)
    bundle = ModelBundle.load(args.model)
    ring = [read_key_file(k)[1] for k in args.key]
    missing = [s for s in bundle.sources if s not in devices]
    if missing:
        raise ValueError(f"model sources not in {args.devices}: {', '.join(missing)}")
    if args.site is not None:
        foreign = [s for s in bundle.sources if devices[s][0] != args.site]
        if foreign:
            raise ValueError(f"sources outside site {args.site}: {', '.join(foreign)}")
    pks = [devices[s][1] for s in bundle.sources]
    reports = org_detect(chain, bundle, pks, ring, args.up_to)
    names = {pk: n for n, (_, pk) in devices.items()}
    lines = ["window_start,window_end,suspect,category,score"]
    lines += [f"{r.window[0]},{r.window[1]},{names.get(r.suspect_pk, r.suspect_pk.hex())},"
              f"{r.category},{r.score!r}" for r in reports]
    (out / "reports.csv").write_text("\n".join(lines) + "\n")
    (out / "reports.jsonl").write_text("".join(r.to_json() + "\n" for r in reports))
    print(f"{len(reports)} anomalous windows")
    return 0


def cmd_metrics(args, out: Path) -> int:
    from .plotting import plot_roc

    ds = load_dataset(args.data)
    bundle = ModelBundle.load(args.model)
    if bundle.sources != ds.sources:
        raise ValueError("model and dataset were built for different sources")
    windows = ds.test if args.split == "test" else ds.train
    ev = evaluate(bundle, windows)
    m = ev.metrics
    (out / "metrics.csv").write_text(metrics_csv([(ds.profile, "MS-DNN", m)]))
    pts = roc_points(ev.scored)
    (out / "roc.csv").write_text(roc_csv(pts))
    area = auc(pts)
    plot_roc(pts, out / "roc.png", title=f"{ds.profile} {args.split} split")
    (out / "metrics.txt").write_text(
        f"tp={m.tp}\nfp={m.fp}\nfn={m.fn}\ntn={m.tn}\nattribution={m.attribution!r}\nauc={area!r}\n")
    print(f"precision {m.precision:.4f} recall {m.recall:.4f} f1 {m.f1:.4f} "
          f"accuracy {m.accuracy:.4f} attribution {m.attribution:.4f} auc {area:.4f}")
    return 0


def cmd_verify(args, out: Path) -> int:
    try:
        chain = load_chain(args.chain)
    except (ValueError, KeyError) as e:
        text = f"FAILED: chain file does not decode: {e}"
    else:
        report = verify_chain(chain)
        text = str(report)
        if report.ok:
            (out / "audit.txt").write_text(text + "\n")
            print(text)
            return 0
    (out / "audit.txt").write_text(text + "\n")
    print(text)
    return 1


def cmd_export(args, out: Path) -> int:
    chain = load_chain(args.chain)
    (out / "chain.csv").write_text(export_text(chain))
    print(f"{sum(len(b.transactions) for b in chain.blocks)} transactions exported")
    return 0


# -- parser ----------------------------------------------------------------------

# options that name input files or directories: recorded by digest in the manifest
INPUT_OPTIONS = ("chain", "data", "model", "devices", "key", "scenario", "config")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=_nonneg(int), default=None, help=f"RNG seed (default {DEFAULT_SEED})")
    g.add_argument("--out-dir", default="out", help="directory for all outputs (default: out)")
    g.add_argument("--config", help="key=value file of option defaults; flags take precedence")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="icschain", description=__doc__)
    sub = parser.add_subparsers(dest="verb", metavar="VERB", required=True)
    subs = {}

    def verb(name: str, help: str, fn) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help, description=help)
        p.set_defaults(func=fn)
        subs[name] = p
        return p

    p = verb("keygen", "generate a seeded Ed25519 key pair", cmd_keygen)
    p.add_argument("--name", default="device", help="basename for NAME.pk / NAME.sk")

    p = verb("chain-init", "create a chain holding one Genesis per topology node", cmd_chain_init)
    p.add_argument("--topology", default="two-site", choices=TOPOLOGIES)

    p = verb("simulate", "run the multi-site network simulation", cmd_simulate)
    p.add_argument("--scenario", help="scenario file (key=value, attack=kind,site,source,start,end)")
    p.add_argument("--topology", choices=TOPOLOGIES)
    p.add_argument("--duration", type=_nonneg(int))
    p.add_argument("--attack", type=_attack, action="append", metavar="KIND,SITE,SOURCE,START,END")
    p.add_argument("--model", type=_site_model, action="append", metavar="SITE=DIR",
                   help="attach a site detector using the trained model in DIR")

    p = verb("gen-data", "generate a synthetic windowed dataset", cmd_gen_data)
    p.add_argument("--profile", default="swat-like", choices=PROFILES)
    p.add_argument("--n-train", type=_positive(int), default=2000)
    p.add_argument("--n-test", type=_positive(int), default=1000)
    p.add_argument("--window-len", type=_positive(int), default=50)
    p.add_argument("--max-steps", type=_positive(int), default=64)

    p = verb("train", "train the BLSTM classifier on a dataset directory", cmd_train)
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=_nonneg(int), default=1000)
    p.add_argument("--lr", type=_nonneg(float), default=0.01)
    p.add_argument("--momentum", type=_nonneg(float), default=0.9)
    p.add_argument("--batch-size", type=_positive(int), default=32)
    p.add_argument("--hidden", type=_positive(int), default=HIDDEN)
    p.add_argument("--clip", type=_positive(float), default=5.0)

    p = verb("detect", "classify chain windows with a trained model", cmd_detect)
    p.add_argument("--chain", required=True)
    p.add_argument("--devices", required=True, help="devices.csv from chain-init or simulate")
    p.add_argument("--model", required=True, help="directory written by train")
    p.add_argument("--key", action="append", required=True, help="PK_data secret key file (repeatable)")
    p.add_argument("--site", help="restrict to one site (checks the model's sources)")
    p.add_argument("--up-to", type=_positive(int), help="last tick (exclusive) to classify")

    p = verb("metrics", "precision/recall/F1 and ROC of a model on a dataset", cmd_metrics)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = verb("verify", "replay and audit a chain file", cmd_verify)
    p.add_argument("--chain", required=True)

    p = verb("export", "write chain transactions as CSV", cmd_export)
    p.add_argument("--chain", required=True)
    return parser, subs


def _install_config(verb: str, path: str, subs) -> dict[str, list]:
    """Install config-file values as the verb's defaults before parsing.

    Returns values for repeatable options; they apply only when the command
    line gives none.
    """
    sub = subs[verb]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    try:
        pairs = parse_kv_lines(Path(path).read_text())
    except (OSError, ConfigError) as e:
        sub.error(f"--config: {e}")
    defaults, appended = {}, {}
    for key, raw in pairs:
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None:
            sub.error(f"--config: unknown option {key!r} for {verb}")
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                value = action.type(raw) if action.type else raw
            except (argparse.ArgumentTypeError, ValueError) as e:
                sub.error(f"--config: bad value for {key}: {e}")
            if action.choices is not None and value not in action.choices:
                sub.error(f"--config: {key} must be one of {', '.join(map(str, action.choices))}")
        if isinstance(action, argparse._AppendAction):
            appended.setdefault(dest, []).append(value)
        else:
            defaults[dest] = value
        action.required = False
    sub.set_defaults(**defaults)
    return appended


def _manifest(args, out: Path) -> dict:
    options, inputs = {}, {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "out_dir", "verbose", "verb"):
            continue
        if k in INPUT_OPTIONS:
            if v is None:
                continue
            paths = v if isinstance(v, list) else [v]
            for i, p in enumerate(paths):
                p = p[1] if isinstance(p, tuple) else p
                label = k if len(paths) == 1 else f"{k}[{i}]"
                inputs[label] = path_digest(p)
        elif isinstance(v, list):
            options[k] = [a.line() if isinstance(a, Attack) else str(a) for a in v]
        else:
            options[k] = v
    outputs = {f.relative_to(out).as_posix(): file_digest(f)
               for f in sorted(out.rglob("*")) if f.is_file() and f.name != "manifest.json"}
    return {"verb": args.verb, "seed": args.seed, "options": options,
            "inputs": inputs, "outputs": outputs}


def _check_inputs(args, out: Path) -> None:
    """Inputs must exist, and outputs must not land on top of them."""
    target = out.resolve()
    for k in INPUT_OPTIONS:
        v = getattr(args, k, None)
        if v is None:
            continue
        for p in v if isinstance(v, list) else [v]:
            p = Path(p[1] if isinstance(p, tuple) else p)
            if not p.exists():
                raise UsageError(f"--{k.replace('_', '-')}: {p} does not exist")
            if p.is_dir() and p.resolve() == target:
                raise UsageError(f"--out-dir must differ from input directory {p}")


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    try:
        config = pre.parse_known_args(argv)[0].config
        verb = next((a for a in argv if a in subs), None)
        appended = _install_config(verb, config, subs) if config and verb else {}
        args, extra = parser.parse_known_args(argv)
        if extra:
            subs[args.verb].error(f"unrecognized arguments: {' '.join(extra)}")
        for dest, values in appended.items():
            if getattr(args, dest) is None:
                setattr(args, dest, values)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb != "simulate" and args.seed is None:
        args.seed = DEFAULT_SEED
    out = Path(args.out_dir)
    try:
        _check_inputs(args, out)
    except UsageError as e:
        subs[args.verb].print_usage(sys.stderr)
        print(f"icschain {args.verb}: error: {e}", file=sys.stderr)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    try:
        status = args.func(args, out)
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("command failed", exc_info=True)
        print(f"icschain {args.verb}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    if args.verb == "simulate" and args.seed is None:
        args.seed = _sim_config(args).seed
    (out / "manifest.json").write_text(json.dumps(_manifest(args, out), indent=2, sort_keys=True) + "\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
