"""Command line entry point.

Subcommands: ``agent serve``, ``cloud serve``, ``device
burn|provision|rotate|update|dump``, ``demo``, ``faultsweep``,
``adversary sweep`` and ``sim fig7|fig8|fig9|gray``.  Every command is
deterministic under a fixed ``--seed`` and machine-readable artifacts
(JSON/CSV) land where ``--report``/``--out`` points.

Exit codes: 0 success, 1 invariant violation, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import socket
import subprocess
import sys
import tempfile
import time
from pathlib import Path

from . import adversary, flash, fleetsim, orchestrate
from .agent import build_agent
from .cloud import CloudSocketClient, CloudStub
from .device import Device, DeviceIdentity
from .envelope import Rng
from .errors import CorruptRegistry, OtaProvError
from .registry import ProductOrderRecord, save_po_file
from .transport import FrameServer, SocketLink

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2


def _addr(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {value!r}")
    return host, int(port)


def _hex(value: str) -> bytes:
    try:
        return bytes.fromhex(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not hex: {value!r}")


# agent / cloud services

def cmd_agent_serve(args) -> int:
    cloud = CloudSocketClient(SocketLink(*args.cloud))
    core = build_agent(args.registry, args.po_file, cloud,
                       rng=Rng(args.seed), fsync=args.fsync)
    server = FrameServer(core, *args.listen)
    print(f"agent listening on {server.host}:{server.port}")
    server.serve_forever()
    return EXIT_OK


def cmd_agent_revoke(args) -> int:
    cloud = CloudSocketClient(SocketLink(*args.cloud)) if args.cloud else CloudStub()
    core = build_agent(args.registry, args.po_file, cloud)
    count = core.revoke(device_id=args.id, po=args.po)
    core.shutdown()
    print(json.dumps({"revoked": count}))
    return EXIT_OK


def cmd_agent_anomaly(args) -> int:
    core = build_agent(args.registry, args.po_file, CloudStub())
    report = core.anomaly_scan(args.po)
    core.shutdown()
    print(json.dumps(report.to_json(), indent=1))
    return EXIT_OK


def cmd_agent_reset(args) -> int:
    """Operator override letting a device provision from scratch again."""
    core = build_agent(args.registry, args.po_file, CloudStub())
    changed = core.reset_device(args.id)
    core.shutdown()
    print(json.dumps({"reset": changed}))
    return EXIT_OK


def cmd_cloud_serve(args) -> int:
    server = FrameServer(CloudStub(rng=Rng(args.seed)), *args.listen)
    print(f"cloud listening on {server.host}:{server.port}")
    server.serve_forever()
    return EXIT_OK


def cmd_cloud_dump(args) -> int:
    client = CloudSocketClient(SocketLink(*args.connect))
    print(json.dumps(client.dump_state(), indent=1))
    return EXIT_OK


# device tool

def _load_meta(args) -> DeviceIdentity:
    device_id, po = args.id, args.po
    meta = Path(str(args.image) + ".meta.json")
    if (device_id is None or po is None) and meta.exists():
        stored = json.loads(meta.read_text())
        device_id = device_id or bytes.fromhex(stored["id_hex"])
        po = po or bytes.fromhex(stored["po_hex"])
    if device_id is None or po is None:
        raise CorruptRegistry("device id and product order required (flags or sidecar)")
    return DeviceIdentity(device_id, po)


def cmd_device_burn(args) -> int:
    image = flash.FlashImage()
    firmware = Path(args.firmware).read_bytes() if args.firmware else b""
    flash.first_stage_burn(image, args.pk, firmware)
    image.save(args.image)
    if args.id is not None and args.po is not None:
        Path(str(args.image) + ".meta.json").write_text(
            json.dumps({"id_hex": args.id.hex(), "po_hex": args.po.hex()}))
    print(f"burned {args.image} ({image.size} bytes)")
    return EXIT_OK


def cmd_device_flow(args) -> int:
    identity = _load_meta(args)
    image = flash.FlashImage.load(args.image)
    device = Device(identity, image, Rng(args.seed))
    link = SocketLink(*args.agent)
    if args.flow == "provision":
        key = device.request_ak(link)
    elif args.flow == "rotate":
        key = device.rotate_ak(link)
    else:
        key = device.update_cloud_key(link)
    image.save(args.image)
    print(json.dumps({"flow": args.flow, "phase": device.phase.name,
                      "key_fingerprint": key.hex()[:8]}))
    return EXIT_OK


def cmd_device_dump(args) -> int:
    image = flash.FlashImage.load(args.image)
    print(flash.hexdump(image, length=args.length))
    state = flash.boot_scan(image)
    for kind, (rec, slot) in sorted(state.records.items()):
        print(f"{kind.name:8} seq={rec.seq} slot=0x{slot.start:08X} "
              f"key={rec.key.hex()[:8]}... payload={len(rec.payload)}B")
    return EXIT_OK


# scenario commands

def cmd_demo(args) -> int:
    if args.spawn:
        report = _spawned_demo(args)
    else:
        registry_path = Path(args.out) / "registry.jsonl" if args.out else None
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
        report = orchestrate.demo_end_to_end(
            args.devices, seed=args.seed, fault_device=args.fault_device,
            parallel=args.parallel, registry_path=registry_path)
    payload = report.to_json()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "demo_report.json").write_text(json.dumps(payload, indent=1))
    print(json.dumps(payload, indent=1))
    return EXIT_OK if report.passed else EXIT_VIOLATION


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _wait_port(port: int, timeout: float = 10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return
        except OSError:
            time.sleep(0.05)
    raise CorruptRegistry(f"service on port {port} never came up")


def _spawned_demo(args):
    """Run agent and cloud as real processes over loopback sockets."""
    pk, po, _firmware, _rng = orchestrate.demo_material(args.seed)
    with tempfile.TemporaryDirectory() as tmp:
        po_file = Path(tmp) / "po.json"
        save_po_file(po_file, [ProductOrderRecord(po, pk, args.devices, 0.0, 2**33)])
        cloud_port, agent_port = _free_port(), _free_port()
        procs = []
        try:
            procs.append(subprocess.Popen(
                [sys.executable, "-m", "otaprov.cli", "cloud", "serve",
                 "--listen", f"127.0.0.1:{cloud_port}", "--seed", str(args.seed + 1)],
                stdout=subprocess.DEVNULL))
            _wait_port(cloud_port)
            procs.append(subprocess.Popen(
                [sys.executable, "-m", "otaprov.cli", "agent", "serve",
                 "--listen", f"127.0.0.1:{agent_port}",
                 "--registry", str(Path(tmp) / "registry.jsonl"),
                 "--po-file", str(po_file),
                 "--cloud", f"127.0.0.1:{cloud_port}", "--seed", str(args.seed + 2)],
                stdout=subprocess.DEVNULL))
            _wait_port(agent_port)
            return orchestrate.demo_end_to_end(
                args.devices, seed=args.seed, fault_device=args.fault_device,
                parallel=args.parallel,
                agent_link=SocketLink("127.0.0.1", agent_port),
                cloud_iface=CloudSocketClient(SocketLink("127.0.0.1", cloud_port)))
        finally:
            for proc in procs:
                proc.terminate()
            for proc in procs:
                proc.wait(timeout=5)


def cmd_faultsweep(args) -> int:
    flows = adversary.FLOWS if args.flow == "all" else (args.flow,)
    reports = orchestrate.run_fault_sweeps(flows, seed=args.seed,
                                           write_stride=args.write_stride,
                                           erase_stride=args.erase_stride)
    for rep in reports:
        status = "pass" if rep.passed else "FAIL"
        print(f"{rep.flow}: {rep.total_cut_points} cut points, "
              f"{len(rep.violations)} violations [{status}]")
        for v in rep.violations:
            print(f"  cut {v.cut_event}@{v.cut_byte} ({v.label}): {v.detail}")
    if args.report:
        orchestrate.save_sweep_reports(reports, args.report)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VIOLATION


def cmd_adversary_sweep(args) -> int:
    report = adversary.tamper_sweep(args.flow, budget=args.budget, seed=args.seed,
                                    keep_outcomes=True)
    print(f"{args.flow}: {report.total_runs} tampered runs, "
          f"{report.accepting_violations} attacker-accepting")
    if args.report:
        report.save(args.report)
    return EXIT_OK if report.accepting_violations == 0 else EXIT_VIOLATION


def cmd_sim(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.grid == "fig7":
        rows = fleetsim.single_device_grid(delta_ratio=args.delta_ratio)
        path = out / "fig7_single_device_time.csv"
    elif args.grid in ("fig8", "fig9"):
        rows = fleetsim.fleet_grid(failure_rate=args.failure_rate,
                                   delta_ratio=args.delta_ratio, seed=args.seed)
        path = out / ("fig8_fleet_time.csv" if args.grid == "fig8"
                      else "fig9_fleet_volume.csv")
    else:
        rows = fleetsim.gray_release_grid()
        path = out / "gray_release.csv"
    fleetsim._write_csv(path, rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otaprov", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    agent = sub.add_parser("agent", help="key-issuing agent service").add_subparsers(
        dest="agent_cmd", required=True)
    serve = agent.add_parser("serve")
    serve.add_argument("--listen", type=_addr, required=True)
    serve.add_argument("--registry", type=Path, required=True)
    serve.add_argument("--po-file", type=Path, required=True)
    serve.add_argument("--cloud", type=_addr, required=True)
    serve.add_argument("--seed", type=int, default=None)
    serve.add_argument("--fsync", action="store_true")
    serve.set_defaults(fn=cmd_agent_serve)
    revoke = agent.add_parser("revoke")
    revoke.add_argument("--registry", type=Path, required=True)
    revoke.add_argument("--po-file", type=Path, required=True)
    revoke.add_argument("--id", type=_hex)
    revoke.add_argument("--po", type=_hex)
    revoke.add_argument("--cloud", type=_addr)
    revoke.set_defaults(fn=cmd_agent_revoke)
    anomaly = agent.add_parser("anomaly")
    anomaly.add_argument("--registry", type=Path, required=True)
    anomaly.add_argument("--po-file", type=Path, required=True)
    anomaly.add_argument("--po", type=_hex, required=True)
    anomaly.set_defaults(fn=cmd_agent_anomaly)
    reset = agent.add_parser("reset")
    reset.add_argument("--registry", type=Path, required=True)
    reset.add_argument("--po-file", type=Path, required=True)
    reset.add_argument("--id", type=_hex, required=True)
    reset.set_defaults(fn=cmd_agent_reset)

    cloud = sub.add_parser("cloud", help="mock cloud service").add_subparsers(
        dest="cloud_cmd", required=True)
    cserve = cloud.add_parser("serve")
    cserve.add_argument("--listen", type=_addr, required=True)
    cserve.add_argument("--seed", type=int, default=None)
    cserve.set_defaults(fn=cmd_cloud_serve)
    cdump = cloud.add_parser("dump")
    cdump.add_argument("--connect", type=_addr, required=True)
    cdump.set_defaults(fn=cmd_cloud_dump)

    device = sub.add_parser("device", help="emulated device tool").add_subparsers(
        dest="device_cmd", required=True)
    burn = device.add_parser("burn")
    burn.add_argument("--image", type=Path, required=True)
    burn.add_argument("--pk", type=_hex, required=True)
    burn.add_argument("--firmware", type=Path)
    burn.add_argument("--id", type=_hex)
    burn.add_argument("--po", type=_hex)
    burn.set_defaults(fn=cmd_device_burn)
    for flow in ("provision", "rotate", "update"):
        p = device.add_parser(flow)
        p.add_argument("--image", type=Path, required=True)
        p.add_argument("--agent", type=_addr, required=True)
        p.add_argument("--id", type=_hex)
        p.add_argument("--po", type=_hex)
        p.add_argument("--seed", type=int, default=None)
        p.set_defaults(fn=cmd_device_flow, flow=flow)
    dump = device.add_parser("dump")
    dump.add_argument("--image", type=Path, required=True)
    dump.add_argument("--length", type=int, default=None)
    dump.set_defaults(fn=cmd_device_dump)

    demo = sub.add_parser("demo", help="end-to-end fleet scenario")
    demo.add_argument("--devices", type=int, default=100)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--out", type=Path)
    demo.add_argument("--fault-device", type=int, default=None)
    demo.add_argument("--parallel", type=int, default=1)
    demo.add_argument("--spawn", action="store_true",
                      help="run agent and cloud as separate processes")
    demo.set_defaults(fn=cmd_demo)

    sweep = sub.add_parser("faultsweep", help="power-cut atomicity sweep")
    sweep.add_argument("--flow", choices=(*adversary.FLOWS, "all"), default="all")
    sweep.add_argument("--seed", type=int, default=0)
    sweep.add_argument("--write-stride", type=int, default=1)
    sweep.add_argument("--erase-stride", type=int, default=16)
    sweep.add_argument("--report", type=Path)
    sweep.set_defaults(fn=cmd_faultsweep)

    adv = sub.add_parser("adversary", help="network attacker harness").add_subparsers(
        dest="adversary_cmd", required=True)
    asweep = adv.add_parser("sweep")
    asweep.add_argument("--flow", choices=adversary.FLOWS, required=True)
    asweep.add_argument("--budget", type=int, default=2)
    asweep.add_argument("--seed", type=int, default=0)
    asweep.add_argument("--report", type=Path)
    asweep.set_defaults(fn=cmd_adversary_sweep)

    sim = sub.add_parser("sim", help="fleet update simulator grids")
    sim.add_argument("grid", choices=("fig7", "fig8", "fig9", "gray"))
    sim.add_argument("--out", type=Path, required=True)
    sim.add_argument("--delta-ratio", type=float, default=0.20)
    sim.add_argument("--failure-rate", type=float, default=0.05)
    sim.add_argument("--seed", type=int, default=None)
    sim.set_defaults(fn=cmd_sim)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CorruptRegistry, FileNotFoundError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OtaProvError as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except KeyboardInterrupt:
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
