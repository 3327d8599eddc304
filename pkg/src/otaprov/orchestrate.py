"""End-to-end scenario drivers shared by the CLI and the test suite:
the full-fleet demo, the power-cut fault sweep, and the agent crash
drill.

The fault sweep is the atomicity oracle.  It first runs a flow once
under an event-counting plan to learn the timeline (wire deliveries and
flash mutations with their byte spans), then replays the flow in a
fresh identical world for every cut point: each frame boundary, and
each byte boundary (strided) inside each flash write and page erase.
After the cut the device reboots and three things must hold: flash
holds exactly the old or the fully-new record (never a torn one), the
key the device now presents is inside the agent/cloud accept set, and
the interrupted flow can be re-run to a working end state.
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import flash, messages
from .adversary import FLOWS, World, build_world
from .agent import AgentCore
from .cloud import CloudStub
from .device import Device, DeviceIdentity
from .envelope import Rng
from .errors import AgentKilled, OtaProvError, PowerLost
from .flash import FaultPlan, FlashImage, KeyKind
from .registry import ProductOrderRecord, Registry
from .transport import LocalLink

DEMO_FIRMWARE_SIZE = 4096


def demo_material(seed: int):
    """Deterministic factory material for a demo fleet."""
    rng = Rng(seed)
    pk = rng.key()
    po = rng.bytes(messages.PRODUCT_ORDER_SIZE)
    firmware = rng.bytes(DEMO_FIRMWARE_SIZE)
    return pk, po, firmware, rng


@dataclass
class DemoReport:
    n_devices: int
    seed: int
    distinct_agent_keys: bool = False
    distinct_cloud_keys: bool = False
    agent_keys_differ_from_pk: bool = False
    residual_product_keys: int = -1
    cloud_auth_ok: int = 0
    updated_devices: int = 0
    fault_device: int | None = None
    fault_device_auth_with_old_key: bool | None = None
    elapsed_s: float = 0.0

    @property
    def passed(self) -> bool:
        ok = (self.distinct_agent_keys and self.distinct_cloud_keys
              and self.agent_keys_differ_from_pk
              and self.residual_product_keys == 0
              and self.cloud_auth_ok == self.n_devices)
        if self.fault_device is not None:
            ok = ok and self.fault_device_auth_with_old_key is True \
                and self.updated_devices == self.n_devices - 1
        else:
            ok = ok and self.updated_devices == self.n_devices
        return ok

    def to_json(self) -> dict:
        out = dict(self.__dict__)
        out["passed"] = self.passed
        return out


def demo_end_to_end(n_devices: int, seed: int = 0, fault_device: int | None = None,
                    parallel: int = 1, agent_link=None, cloud_iface=None,
                    registry_path=None) -> DemoReport:
    """Provision a fleet from one product key and drive every flow.

    Stage 1 burns identical firmware plus the shared product key; stage
    2 trades it per-device for a unique agent key.  Then: initial cloud
    key, agent-key rotation, cloud-key update, cloud login.  With
    ``fault_device`` set, that device loses power mid-way through its
    cloud-key update and must come back up still able to log in with
    the old key.
    """
    t0 = time.monotonic()
    pk, po, firmware, rng = demo_material(seed)
    report = DemoReport(n_devices=n_devices, seed=seed, fault_device=fault_device)

    in_process = agent_link is None
    if in_process:
        cloud = CloudStub(rng=rng.spawn())
        registry = Registry.open(registry_path) if registry_path else Registry("<memory>")
        po_records = {po: ProductOrderRecord(po, pk, expected_count=n_devices,
                                             window_start=0.0, window_end=2**33)}
        agent = AgentCore(registry, po_records, cloud, rng.spawn())
        agent_link = LocalLink(agent)
        cloud_iface = cloud
    elif cloud_iface is None:
        raise ValueError("external agent link needs a cloud interface too")

    # stage 1: one image per device, identical bytes
    devices: list[Device] = []
    for i in range(n_devices):
        identity = DeviceIdentity(i.to_bytes(messages.DEVICE_ID_SIZE, "big"), po)
        image = FlashImage()
        flash.first_stage_burn(image, pk, firmware)
        devices.append(Device(identity, image, rng.spawn(), sleep=lambda _s: None))

    def run_phase(fn, skip: set[int] = frozenset()):
        targets = [(i, d) for i, d in enumerate(devices) if i not in skip]
        if parallel > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=parallel) as pool:
                list(pool.map(lambda pair: fn(pair[1]), targets))
        else:
            for _, d in targets:
                fn(d)

    # stage 2 and the update cycle
    run_phase(lambda d: d.request_ak(agent_link))
    run_phase(lambda d: d.update_cloud_key(agent_link))
    first_cloud_keys = [d.cloud_key for d in devices]
    run_phase(lambda d: d.rotate_ak(agent_link))

    faulted: set[int] = set()
    if fault_device is not None:
        if not 0 <= fault_device < n_devices:
            raise ValueError("fault_device out of range")
        faulted = {fault_device}
        victim = devices[fault_device]
        # local link counts two frame events before the record write;
        # over sockets only flash events are counted
        is_local = isinstance(agent_link, LocalLink)
        plan = FaultPlan(cut_event=2 if is_local else 0, cut_byte=18)
        victim.image.fault_plan = plan
        victim_link = LocalLink(agent_link.core, plan=plan) if is_local else agent_link
        try:
            victim.update_cloud_key(victim_link)
        except PowerLost:
            pass
        victim.image.clear_power_cut()
        devices[fault_device] = Device(victim.identity, victim.image,
                                       rng.spawn(), sleep=lambda _s: None)
        old_ck = first_cloud_keys[fault_device]
        rebooted = devices[fault_device]
        report.fault_device_auth_with_old_key = (
            rebooted.cloud_key == old_ck and rebooted.authenticate_to_cloud(cloud_iface))

    run_phase(lambda d: d.update_cloud_key(agent_link), skip=faulted)
    report.updated_devices = sum(
        1 for i, d in enumerate(devices)
        if i not in faulted and d.cloud_key != first_cloud_keys[i])

    # verification
    aks = [d.agent_key for d in devices]
    cks = [d.cloud_key for d in devices]
    report.distinct_agent_keys = len(set(aks)) == n_devices and None not in aks
    report.distinct_cloud_keys = len(set(cks)) == n_devices and None not in cks
    report.agent_keys_differ_from_pk = pk not in aks
    report.residual_product_keys = sum(
        1 for d in devices
        if flash.boot_scan(d.image).active(KeyKind.PRODUCT) is not None)
    report.cloud_auth_ok = sum(1 for d in devices if d.authenticate_to_cloud(cloud_iface))
    report.elapsed_s = round(time.monotonic() - t0, 3)
    return report


# power-cut fault sweep

@dataclass
class CutResult:
    cut_event: int
    cut_byte: int | None
    label: str
    ok: bool
    detail: str = ""

    def to_json(self) -> dict:
        return {"cut_event": self.cut_event, "cut_byte": self.cut_byte,
                "label": self.label, "ok": self.ok, "detail": self.detail}


@dataclass
class FaultSweepReport:
    flow: str
    total_cut_points: int = 0
    violations: list[CutResult] = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {"flow": self.flow, "total_cut_points": self.total_cut_points,
                "violations": [v.to_json() for v in self.violations],
                "passed": self.passed, "elapsed_s": self.elapsed_s}


def _flow_timeline(flow: str, seed: int) -> list[tuple[str, int]]:
    """Dry run under a counting plan to learn the event timeline."""
    world = build_world(flow, seed)
    plan = FaultPlan()
    world.device.image.fault_plan = plan
    link = LocalLink(world.agent, plan=plan)
    world.reseed(seed + 1)
    world.run_flow_link(flow, link)
    world.device.image.fault_plan = None
    return plan.events


def _enumerate_cuts(events: list[tuple[str, int]], write_stride: int,
                    erase_stride: int) -> list[tuple[int, int | None, str]]:
    cuts = []
    for idx, (label, nbytes) in enumerate(events):
        if nbytes == 0:
            cuts.append((idx, None, label))
        else:
            stride = erase_stride if label.startswith("erase") else write_stride
            for b in range(0, nbytes + 1, max(1, stride)):
                cuts.append((idx, b, label))
    return cuts


def _current_device_key(device: Device) -> bytes | None:
    return device.agent_key if device.agent_key is not None else device.product_key


def _check_consistency(world: World, device: Device) -> str:
    """Empty string when consistent, else a description."""
    device_id = world.identity.device_id
    key = _current_device_key(device)
    if key is None:
        return "device lost every agent-side key"
    if key not in world.agent.accept_keys(device_id, world.po):
        return "device key not in agent accept set"
    ck = device.cloud_key
    if ck is not None and ck not in world.cloud.enabled_keys(device_id):
        return "device cloud key not in cloud accept set"
    return ""


def _expected_records(world: World, flow: str) -> dict[KeyKind, set[bytes]]:
    """Old-or-new key sets allowed on flash after a cut."""
    entry = world.agent.registry.get(world.identity.device_id)
    allowed = {KeyKind.AGENT: set(), KeyKind.PRODUCT: {world.pk}}
    if entry is not None:
        allowed[KeyKind.AGENT] = {k for k in (entry.ak, *entry.pending_aks) if k}
    rec = world.cloud.records.get(world.identity.device_id)
    cloud_allowed = set()
    if rec is not None:
        cloud_allowed = {k for k in (rec.old_key, rec.new_key) if k}
    allowed[KeyKind.CLOUD] = cloud_allowed
    return allowed


def run_fault_sweep(flow: str, seed: int = 0, write_stride: int = 1,
                    erase_stride: int = 16) -> FaultSweepReport:
    """Sweep one flow; see the module docstring for the invariant."""
    t0 = time.monotonic()
    report = FaultSweepReport(flow=flow)
    events = _flow_timeline(flow, seed)
    cuts = _enumerate_cuts(events, write_stride, erase_stride)
    report.total_cut_points = len(cuts)

    for cut_event, cut_byte, label in cuts:
        world = build_world(flow, seed)
        plan = FaultPlan(cut_event=cut_event, cut_byte=cut_byte)
        world.device.image.fault_plan = plan
        link = LocalLink(world.agent, plan=plan)
        world.reseed(seed + 1)
        detail = ""
        try:
            world.run_flow_link(flow, link)
            detail = "flow completed despite the cut plan"
        except PowerLost:
            pass
        except OtaProvError as exc:
            detail = f"unexpected {type(exc).__name__}: {exc}"
        world.device.image.fault_plan = None

        if not detail:
            detail = _verify_cut(world, flow)
        if detail:
            report.violations.append(CutResult(cut_event, cut_byte, label, False, detail))
    report.elapsed_s = round(time.monotonic() - t0, 3)
    return report


def _verify_cut(world: World, flow: str) -> str:
    """Reboot after the cut and check atomicity, consistency, liveness."""
    allowed = _expected_records(world, flow)
    state = flash.boot_scan(world.device.image)
    for kind, (rec, _slot) in state.records.items():
        if rec.key not in allowed.get(kind, set()):
            return f"torn or foreign {kind.name} record survived the cut"

    rebooted = Device(world.identity, world.device.image,
                      world.device.rng.spawn(), sleep=lambda _s: None)
    world.device = rebooted
    problem = _check_consistency(world, rebooted)
    if problem:
        return problem

    # liveness: the interrupted update must be completable
    link = LocalLink(world.agent)
    try:
        if flow == "ak-init" and rebooted.agent_key is None:
            rebooted.request_ak(link)
        if flow == "ck-update" and rebooted.cloud_key is not None:
            # scenario check: whatever generation survived must log in
            if not rebooted.authenticate_to_cloud(world.cloud):
                return "surviving cloud key rejected before retry"
        rebooted.update_cloud_key(link)
        if not rebooted.authenticate_to_cloud(world.cloud):
            return "cloud login failed after recovery"
    except OtaProvError as exc:
        return f"recovery failed: {type(exc).__name__}: {exc}"
    return _check_consistency(world, rebooted)


def run_fault_sweeps(flows=FLOWS, seed: int = 0, write_stride: int = 1,
                     erase_stride: int = 16) -> list[FaultSweepReport]:
    return [run_fault_sweep(flow, seed, write_stride, erase_stride) for flow in flows]


def save_sweep_reports(reports: list[FaultSweepReport], path):
    payload = {
        "reports": [r.to_json() for r in reports],
        "total_cut_points": sum(r.total_cut_points for r in reports),
        "passed": all(r.passed for r in reports),
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")
    return payload


# agent crash drill

@dataclass
class CrashDrillReport:
    n_devices: int
    kill_points: int
    runs: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {"n_devices": self.n_devices, "kill_points": self.kill_points,
                "runs": self.runs, "violations": self.violations, "passed": self.passed}


def run_agent_crash_drill(workdir, n_devices: int = 100, kill_points: int = 20,
                          seed: int = 0) -> CrashDrillReport:
    """Kill the agent at random points mid-fleet, reload from the journal,
    and require every acknowledged key to have survived."""
    report = CrashDrillReport(n_devices=n_devices, kill_points=kill_points)
    workdir = Path(workdir)
    picker = random.Random(seed)

    for run in range(kill_points):
        report.runs += 1
        rng = Rng(seed * 1000 + run)
        pk = rng.key()
        po = rng.bytes(messages.PRODUCT_ORDER_SIZE)
        po_records = {po: ProductOrderRecord(po, pk, n_devices, 0.0, 2**33)}
        reg_path = workdir / f"crash-{run}.jsonl"
        cloud = CloudStub(rng=rng.spawn())
        agent = AgentCore(Registry.open(reg_path), po_records, cloud, rng.spawn())
        agent.crash_after = picker.randint(1, n_devices * 8)
        link = LocalLink(agent)

        devices = []
        crashed = False
        for i in range(n_devices):
            identity = DeviceIdentity(i.to_bytes(messages.DEVICE_ID_SIZE, "big"), po)
            image = FlashImage()
            flash.first_stage_burn(image, pk, b"fw")
            device = Device(identity, image, rng.spawn(), sleep=lambda _s: None)
            devices.append(device)
            try:
                device.request_ak(link)
            except AgentKilled:
                crashed = True
                break
            except OtaProvError as exc:
                report.violations.append(f"run {run}: device {i} failed pre-crash: {exc}")
        agent.registry.close()

        # reload from disk only; in-memory state is gone.  Any device
        # holding a key (acknowledged or mid-flight) must still be
        # covered: the journal entry precedes the wire response.
        agent2 = AgentCore(Registry.open(reg_path), po_records, cloud, rng.spawn())
        link2 = LocalLink(agent2)
        for device in devices:
            key = device.agent_key
            if key is not None and key not in agent2.accept_keys(device.identity.device_id, po):
                report.violations.append(
                    f"run {run}: issued key missing after reload "
                    f"(device {device.identity.device_id.hex()})")
        if crashed:
            # the fleet must be completable after the restart
            for device in devices:
                try:
                    if device.agent_key is None:
                        device.request_ak(link2)
                except OtaProvError as exc:
                    report.violations.append(
                        f"run {run}: device could not finish after restart: {exc}")
                    break
        agent2.registry.close()
    return report
