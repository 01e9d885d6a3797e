"""Command-line entry point: ``shieldrun <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import bench
from .enclave import EnclaveConfig, Mode, create_enclave, measure, parse_mode, parse_size, read_env_config
from .errors import ShieldRunError
from .fsshield import parse_policy_file

log = logging.getLogger("shieldrun")


def _on_off(text: str) -> bool:
    t = text.strip().lower()
    if t not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return t == "on"


def _size(text: str) -> int:
    try:
        return parse_size(text)
    except ShieldRunError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _mode(text: str) -> Mode:
    try:
        return parse_mode(text)
    except ShieldRunError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError("expected host:port")
    return host, int(port)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)


def _finish(problems: list[str]) -> int:
    for p in problems:
        print(f"self-check failed: {p}", file=sys.stderr)
    return 1 if problems else 0


# -- bench verbs ---------------------------------------------------------------

def cmd_classify(args: argparse.Namespace) -> int:
    rep, logits = bench.bench_classify(args.mode, images=args.images, fs_shield=args.fs_shield,
                                       seed=args.seed, epc=args.epc, tcs=args.tcs)
    _emit(bench.reports_csv([rep]), args.out)
    if args.top:
        for i, row in enumerate(bench.top_k(logits, 4)):
            print(f"image {i}: " + "  ".join(f"{label}:{p:.5f}" for label, p in row))
    problems = rep.self_check()
    if not np.isfinite(logits).all():
        problems.append("non-finite logits")
    return _finish(problems)


def cmd_train(args: argparse.Namespace) -> int:
    res = bench.bench_train(args.mode, steps=args.steps, threads=args.threads, heap=args.heap,
                            fs_shield=args.fs_shield, batch=args.batch, lr=args.lr, seed=args.seed,
                            epc=args.epc, tcs=args.tcs, samples=args.samples)
    _emit(bench.reports_csv([res.report]), args.out)
    if args.latencies:
        print("step,latency,loss")
        for i, (lat, loss) in enumerate(zip(res.report.latencies, res.losses)):
            print(f"{i},{lat},{loss:.6f}")
    return _finish(res.report.self_check())


def cmd_epc_sweep(args: argparse.Namespace) -> int:
    rows = bench.epc_sweep(args.lo, args.hi, args.epc)
    _emit(bench.sweep_csv(rows), args.out)
    problems = []
    costs = [r["mean_cost"] for r in rows]
    if any(b < a for a, b in zip(costs, costs[1:])):
        problems.append("mean access cost decreased with a larger working set")
    return _finish(problems)


def cmd_syscalls(args: argparse.Namespace) -> int:
    kw = {"images": args.items} if args.workload == "classify" else {"steps": args.items, "batch": 32}
    prof = bench.syscall_profile(args.workload, seed=args.seed, **kw)
    _emit(prof.to_csv(), args.out)
    print(prof.render(), file=sys.stderr)
    problems = []
    if prof.row("futex").bridge_calls:
        problems.append("futex calls crossed the bridge")
    return _finish(problems)


# -- attestation verbs -------------------------------------------------------------

def _cas_paths(d: Path) -> dict[str, Path]:
    return {k: d / v for k, v in {
        "platform": "platform.key", "identity": "cas_identity.key",
        "registry_key": "registry.key", "registry": "registry.tsfs",
    }.items()}


def cmd_cas_init(args: argparse.Namespace) -> int:
    from .attestation import SecretsRegistry, _raw_private
    from .quote import Platform

    d = Path(args.dir)
    d.mkdir(parents=True, exist_ok=True)
    p = _cas_paths(d)
    Platform().save(p["platform"])
    p["identity"].write_bytes(_raw_private(Ed25519PrivateKey.generate()))
    p["registry_key"].write_bytes(os.urandom(32))
    SecretsRegistry().save(p["registry"], p["registry_key"].read_bytes())
    for f in p.values():
        os.chmod(f, 0o600)
    print(f"initialized CAS state in {d}")
    return 0


def cmd_cas_register(args: argparse.Namespace) -> int:
    from .attestation import SecretsBundle, SecretsRegistry

    p = _cas_paths(Path(args.dir))
    key = p["registry_key"].read_bytes()
    reg = SecretsRegistry.load(p["registry"], key)
    policies = parse_policy_file(Path(args.policy).read_text()) if args.policy else []
    digest = bytes.fromhex(args.measurement)
    reg.register(digest, SecretsBundle.generate(policies))
    reg.save(p["registry"], key)
    print(f"registered {digest.hex()}")
    return 0


def cmd_cas_serve(args: argparse.Namespace) -> int:
    from .attestation import CasServer, CasService, SecretsRegistry
    from .quote import Platform

    p = _cas_paths(Path(args.dir))
    reg = SecretsRegistry.load(p["registry"], p["registry_key"].read_bytes())
    platform = Platform.load(p["platform"])
    ident = Ed25519PrivateKey.from_private_bytes(p["identity"].read_bytes())
    server = CasServer(CasService(reg, platform.verification_key), ident, args.bind)
    print(f"CAS listening on {server.address[0]}:{server.address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def _config(args: argparse.Namespace) -> EnclaveConfig:
    cfg = read_env_config()
    if getattr(args, "mode", None) is not None:
        cfg = replace(cfg, mode=args.mode)
    return cfg


def cmd_provision(args: argparse.Namespace) -> int:
    from .attestation import provision
    from .netshield import identity_public
    from .quote import Platform

    p = _cas_paths(Path(args.dir))
    platform = Platform.load(p["platform"])
    cas_pub = identity_public(Ed25519PrivateKey.from_private_bytes(p["identity"].read_bytes()))
    code = Path(args.code).read_bytes()
    with create_enclave(code, _config(args), platform=platform) as enc:
        bundle = provision(enc, args.cas, cas_pub)
        print(f"measurement {enc.measurement.hex}")
        print(f"provisioned: {len(bundle.policies())} path policies, "
              f"identity {identity_public(bundle.identity_key()).hex()}")
    return 0


def cmd_freeze(args: argparse.Namespace) -> int:
    from .tensor import Session, build_cifar_model, export_frozen

    g = build_cifar_model(lr=args.lr, batch=args.batch, seed=args.seed)
    ckpt = None
    if not args.blank:
        s = Session(g)
        s.initialize()
        ckpt = s.checkpoint()
    export_frozen(g, args.out, ckpt)
    print(f"wrote {'blank' if args.blank else 'folded'} graph with {len(g.nodes)} nodes to {args.out}")
    return 0


def cmd_measure(args: argparse.Namespace) -> int:
    m = measure(Path(args.code).read_bytes(), _config(args))
    if args.json:
        print(json.dumps({"measurement": m.hex}))
    else:
        print(m.hex)
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shieldrun", description="Shielded-execution simulator and benches.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p: argparse.ArgumentParser, mode: bool = True) -> None:
        if mode:
            p.add_argument("--mode", type=_mode, default=Mode.HARDWARE_SIM,
                           help="native, simulation or hardware-sim")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="also write the CSV here")

    p = sub.add_parser("classify", help="classify test images")
    common(p)
    p.add_argument("--images", type=int, default=20)
    p.add_argument("--fs-shield", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--epc", type=_size, default=None, help="default: working set / 3.6")
    p.add_argument("--tcs", type=int, default=4)
    p.add_argument("--top", action="store_true", help="print top-4 labels per image")
    p.set_defaults(fn=cmd_classify)

    p = sub.add_parser("train", help="train the Cifar model on the bundled dataset")
    common(p)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--heap", type=_size, default=bench.DEFAULT_TRAIN_HEAP)
    p.add_argument("--fs-shield", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epc", type=_size, default=90 << 20)
    p.add_argument("--tcs", type=int, default=4)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--latencies", action="store_true", help="print the per-step latency series")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("epc-sweep", help="mean page access cost against working set size")
    common(p, mode=False)
    p.add_argument("--from", dest="lo", type=_size, default=2 << 20)
    p.add_argument("--to", dest="hi", type=_size, default=64 << 20)
    p.add_argument("--epc", type=_size, default=16 << 20)
    p.set_defaults(fn=cmd_epc_sweep)

    p = sub.add_parser("syscalls", help="syscall profile of a workload")
    common(p, mode=False)
    p.add_argument("--workload", choices=("classify", "train"), default="classify")
    p.add_argument("--items", type=int, default=10, help="images (classify) or steps (train)")
    p.set_defaults(fn=cmd_syscalls)

    cas = sub.add_parser("cas", help="configuration and secrets service")
    cas_sub = cas.add_subparsers(dest="cas_verb", required=True)
    p = cas_sub.add_parser("init", help="create keys and an empty registry")
    p.add_argument("--dir", required=True)
    p.set_defaults(fn=cmd_cas_init)
    p = cas_sub.add_parser("register", help="register a measurement with fresh secrets")
    p.add_argument("--dir", required=True)
    p.add_argument("--measurement", required=True, help="hex digest")
    p.add_argument("--policy", help="path policy file released with the secrets")
    p.set_defaults(fn=cmd_cas_register)
    p = cas_sub.add_parser("serve", help="serve attestation requests")
    p.add_argument("--dir", required=True)
    p.add_argument("--bind", type=_address, default=("127.0.0.1", 7443))
    p.set_defaults(fn=cmd_cas_serve)

    p = sub.add_parser("provision", help="attest an enclave to the CAS and receive its secrets")
    p.add_argument("--dir", required=True, help="directory holding the platform key and CAS identity")
    p.add_argument("--cas", type=_address, required=True)
    p.add_argument("--code", required=True)
    p.add_argument("--mode", type=_mode, default=None)
    p.set_defaults(fn=cmd_provision)

    p = sub.add_parser("freeze", help="export the Cifar model as a frozen graph")
    p.add_argument("--out", required=True)
    p.add_argument("--blank", action="store_true", help="leave variables uninitialized")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=128)
    p.set_defaults(fn=cmd_freeze)

    p = sub.add_parser("measure", help="print the measurement of a code image under TS_* config")
    p.add_argument("--code", required=True)
    p.add_argument("--mode", type=_mode, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_measure)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ShieldRunError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
