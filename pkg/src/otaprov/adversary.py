"""Network-attacker harness: knowledge closure over recorded transcripts
plus bounded-exhaustive tampering of live runs.

The attacker owns the device/agent wire.  Its knowledge starts from the
bytes it observed, closes under splitting (frame and payload structure
is public) and symmetric decryption with keys it knows, and can be
seeded (for drills) with compromised keys.  Secrecy holds when none of
the protocol's secrets appear in the closure.

Tampering replays, reorders, drops, bit-flips and (when the knowledge
closure ever yields a key) injects frames on a live run whose
pre-attack state matches the recorded one, then cross-checks the end
state: the device must never accept a key the live agent did not issue,
the agent/cloud accept sets must still cover whatever the device holds,
and no substituted frame may drive either side to an accepting state.

This is bounded concrete checking, not a proof: sequences up to the
budget are enumerated exhaustively over a parameter lattice that keeps
the run count at desk scale.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from . import envelope, flash, messages
from .agent import AgentCore
from .cloud import CloudStub
from .device import Device, DeviceIdentity
from .envelope import Rng, SealedMessage
from .errors import LinkTimeout, OtaProvError
from .messages import Frame, MsgType
from .registry import ProductOrderRecord, Registry
from .transport import LocalLink

FLOWS = ("ak-init", "ak-rotate", "ck-update")

_SEALED_MIN = envelope.IV_SIZE + envelope.TAG_SIZE + envelope.BLOCK_SIZE


@dataclass
class WireFrame:
    index: int
    direction: str  # "d>a" or "a>d"
    data: bytes
    ts: float


@dataclass
class World:
    """One self-contained device/agent/cloud universe."""

    pk: bytes
    po: bytes
    identity: DeviceIdentity
    cloud: CloudStub
    agent: AgentCore
    device: Device

    def reseed(self, seed: int):
        """Fresh session randomness on top of identical pre-flow state."""
        stream = Rng(seed)
        self.device.rng = stream.spawn()
        self.agent.rng = stream.spawn()
        self.cloud.rng = stream.spawn()

    def run_flow(self, flow: str, interceptor=None):
        return self.run_flow_link(flow, LocalLink(self.agent, interceptor=interceptor))

    def run_flow_link(self, flow: str, link):
        if flow == "ak-init":
            return self.device.request_ak(link)
        if flow == "ak-rotate":
            return self.device.rotate_ak(link)
        if flow == "ck-update":
            return self.device.update_cloud_key(link)
        raise ValueError(f"unknown flow {flow}")


def build_world(flow: str, setup_seed: int = 0) -> World:
    """Provision a world up to the starting state of ``flow``."""
    rng = Rng(setup_seed)
    pk = rng.key()
    po = rng.bytes(messages.PRODUCT_ORDER_SIZE)
    identity = DeviceIdentity(rng.bytes(messages.DEVICE_ID_SIZE), po)
    cloud = CloudStub(rng=rng.spawn())
    registry = Registry(path="<memory>")  # journal-less, harness scale
    po_records = {po: ProductOrderRecord(po, pk, expected_count=16,
                                         window_start=0.0, window_end=2**33)}
    agent = AgentCore(registry, po_records, cloud, rng.spawn())

    image = flash.FlashImage()
    flash.first_stage_burn(image, pk, firmware=rng.bytes(2048))
    device = Device(identity, image, rng.spawn(), sleep=lambda _s: None)
    world = World(pk=pk, po=po, identity=identity, cloud=cloud, agent=agent, device=device)

    link = LocalLink(agent)
    if flow in ("ak-rotate", "ck-update"):
        device.request_ak(link)
    if flow == "ck-update":
        device.update_cloud_key(link)
    return world


def record_honest_run(flow: str, setup_seed: int = 0, flow_seed: int = 1):
    """Run ``flow`` untouched, returning (transcript, secrets, world)."""
    world = build_world(flow, setup_seed)
    transcript: list[WireFrame] = []

    def tap(direction: str, frame: Frame) -> Frame:
        label = "d>a" if direction == "to_peer" else "a>d"
        transcript.append(WireFrame(len(transcript), label, frame.encode(), time.time()))
        return frame

    world.reseed(flow_seed)
    world.run_flow(flow, interceptor=tap)
    secrets = gather_secrets(world)
    return transcript, secrets, world


def gather_secrets(world: World) -> dict[str, bytes]:
    """Everything the attacker must not learn, by name."""
    out = {"pk": world.pk}
    entry = world.agent.registry.get(world.identity.device_id)
    if entry is not None:
        if entry.ak is not None:
            out["ak"] = entry.ak
        for i, key in enumerate(entry.pending_aks):
            out[f"ak_pending_{i}"] = key
    dev_ak = world.device.agent_key
    if dev_ak is not None:
        out["ak_device"] = dev_ak
    ck = world.device.cloud_key
    if ck is not None:
        out["cloud_key"] = ck
    rec = world.cloud.records.get(world.identity.device_id)
    if rec is not None and rec.new_key is not None:
        out["cloud_key_staged"] = rec.new_key
    return out


# knowledge closure

class AttackerKnowledge:
    """Set of byte strings closed under structure splitting and
    decryption with known keys."""

    def __init__(self, initial: set[bytes] | None = None):
        self.known: set[bytes] = set(initial or ())
        self._sealed: list[SealedMessage] = []

    def observe(self, transcript: list[WireFrame]):
        for wf in transcript:
            self.known.add(wf.data)
            try:
                frame = Frame.decode(wf.data)
            except OtaProvError:
                continue
            self.known.add(bytes([frame.msg_type]))
            if frame.header:
                self.known.add(frame.header)
            if len(frame.body) >= _SEALED_MIN:
                try:
                    sealed = SealedMessage.from_bytes(frame.body)
                except ValueError:
                    continue
                self.known.update((sealed.iv, sealed.tag, sealed.ciphertext))
                self._sealed.append(sealed)

    def candidate_keys(self) -> list[bytes]:
        return [k for k in self.known if len(k) == envelope.KEY_SIZE]

    def close(self):
        """Fixpoint of dec(k, c) for known k plus payload splitting."""
        changed = True
        while changed:
            changed = False
            for sealed in list(self._sealed):
                for key in self.candidate_keys():
                    try:
                        plain = envelope.decrypt_noverify(key, sealed)
                    except OtaProvError:
                        continue
                    if plain not in self.known and self._plausible(plain):
                        self.known.add(plain)
                        self.known.update(self._split(plain))
                        changed = True

    @staticmethod
    def _plausible(plain: bytes) -> bool:
        return bool(plain) and plain[0] in (
            MsgType.AK_REQUEST, MsgType.AK_RESPONSE, MsgType.AK_CONFIRM, MsgType.AK_ACK,
            MsgType.CK_REQUEST, MsgType.CK_RESPONSE, MsgType.CK_CONFIRM, MsgType.CK_ACK)

    @staticmethod
    def _split(plain: bytes) -> set[bytes]:
        parsers = {
            MsgType.AK_REQUEST: messages.parse_ak_request,
            MsgType.AK_RESPONSE: messages.parse_ak_response,
            MsgType.AK_CONFIRM: messages.parse_ak_confirm,
            MsgType.AK_ACK: lambda b: (messages.parse_ak_ack(b),),
            MsgType.CK_REQUEST: lambda b: (messages.parse_ck_request(b),),
            MsgType.CK_RESPONSE: messages.parse_ck_response,
            MsgType.CK_CONFIRM: messages.parse_ck_confirm,
            MsgType.CK_ACK: lambda b: (messages.parse_ck_ack(b),),
        }
        try:
            fields = parsers[MsgType(plain[0])](plain)
        except OtaProvError:
            return set()
        return {f for f in fields if isinstance(f, bytes) and f}

    def knows(self, secret: bytes) -> bool:
        return secret in self.known


def secrecy_check(transcript: list[WireFrame], secrets: dict[str, bytes],
                  initial_knowledge: set[bytes] | None = None) -> dict[str, bool]:
    """True per secret name when the closure cannot derive it.

    The confirmation payloads (the ones carrying the success marker) are
    part of ``secrets`` via the keys that seal them: leak of a sealing
    key exposes them, so the check also asks for the payload plaintexts
    themselves.
    """
    knowledge = AttackerKnowledge(initial_knowledge)
    knowledge.observe(transcript)
    knowledge.close()
    verdicts = {name: not knowledge.knows(value) for name, value in secrets.items()}
    # success-marker payloads: no derived plaintext may parse as a confirm
    leaked_confirm = any(
        plain[0] in (MsgType.AK_CONFIRM, MsgType.CK_CONFIRM)
        for plain in knowledge.known if plain and len(plain) in (34, 35))
    verdicts["success_marker"] = not leaked_confirm
    return verdicts


# tampering

@dataclass(frozen=True)
class Tamper:
    action: str  # drop | flip | replay | reorder | inject
    index: int   # live frame index it fires on
    bit: int = 0
    source: int = 0
    payload: bytes = b""

    def describe(self) -> dict:
        out = {"action": self.action, "index": self.index}
        if self.action == "flip":
            out["bit"] = self.bit
        if self.action in ("replay", "reorder"):
            out["source"] = self.source
        return out


class TamperInterceptor:
    def __init__(self, actions: tuple[Tamper, ...], recorded: list[WireFrame],
                 knowledge_keys: list[bytes] | None = None):
        self.actions = {a.index: a for a in actions}
        self.recorded = recorded
        self.knowledge_keys = knowledge_keys or []
        self.count = 0
        self.fired: list[Tamper] = []
        self._last_device_frame: Frame | None = None

    def __call__(self, direction: str, frame: Frame) -> Frame:
        idx = self.count
        self.count += 1
        if direction == "to_peer":
            self._last_device_frame = frame
        act = self.actions.get(idx)
        if act is None:
            return frame
        self.fired.append(act)
        if act.action == "drop":
            raise LinkTimeout(f"frame {idx} dropped")
        if act.action == "flip":
            raw = bytearray(frame.encode())
            bit = act.bit % (len(raw) * 8)  # combos may shift frame sizes
            raw[bit // 8] ^= 1 << (bit % 8)
            return self._decode(bytes(raw), idx)
        if act.action in ("replay", "reorder"):
            return self._decode(self.recorded[act.source % len(self.recorded)].data, idx)
        if act.action == "inject":
            return self._forge(idx)
        raise ValueError(f"unknown tamper action {act.action}")

    def _forge(self, idx: int) -> Frame:
        """Craft a key-issue response under a known key, echoing the nonce
        read out of the live request.  Needs a compromised key; with an
        honest knowledge set this degrades to a dropped frame."""
        req = self._last_device_frame
        for key in self.knowledge_keys:
            if req is None:
                break
            try:
                plain = envelope.decrypt_noverify(key, SealedMessage.from_bytes(req.body))
                _, nonce1 = messages.parse_ak_request(plain)
            except (OtaProvError, ValueError):
                continue
            rng = Rng(0xF0F0 + idx)
            evil = rng.key()
            body = envelope.seal(key, messages.encode_ak_response(evil, nonce1, rng.nonce()),
                                 rng, mac_key=evil)
            return Frame(MsgType.AK_RESPONSE, b"", body.to_bytes())
        raise LinkTimeout(f"no forgeable material at frame {idx}")

    @staticmethod
    def _decode(raw: bytes, idx: int) -> Frame:
        try:
            return Frame.decode(raw)
        except OtaProvError:
            # unparseable on the wire: the receiver never sees a frame
            raise LinkTimeout(f"frame {idx} garbled beyond framing") from None


@dataclass
class Outcome:
    actions: tuple[Tamper, ...]
    completed: bool
    error: str | None
    violation: str | None

    def to_json(self) -> dict:
        return {"actions": [a.describe() for a in self.actions],
                "completed": self.completed, "error": self.error,
                "violation": self.violation}


def _consistency_violation(world: World, flow: str, pre_keys: set[bytes]) -> str | None:
    device = world.device
    device_id = world.identity.device_id
    entry = world.agent.registry.get(device_id)
    issued = set(pre_keys)
    if entry is not None:
        issued.update(k for k in (entry.ak, *entry.pending_aks) if k is not None)

    ak = device.agent_key
    current = ak if ak is not None else device.product_key
    accepts = world.agent.accept_keys(device_id, world.po)
    if current is None or current not in accepts:
        return "device key outside the agent accept set"
    if ak is not None and ak != world.pk and ak not in issued:
        return "device holds a key the live agent never issued"
    ck = device.cloud_key
    if ck is not None and ck not in world.cloud.enabled_keys(device_id):
        return "device cloud key outside the cloud accept set"
    return None


def run_tampered(flow: str, actions: tuple[Tamper, ...], recorded: list[WireFrame],
                 setup_seed: int, flow_seed: int,
                 knowledge_keys: list[bytes] | None = None) -> Outcome:
    world = build_world(flow, setup_seed)
    entry = world.agent.registry.get(world.identity.device_id)
    pre_keys = {k for k in ((entry.ak, *entry.pending_aks) if entry else ())
                if k is not None}
    pre_keys.add(world.pk)
    world.reseed(flow_seed)
    interceptor = TamperInterceptor(actions, recorded, knowledge_keys)
    completed, error = True, None
    try:
        world.run_flow(flow, interceptor=interceptor)
    except OtaProvError as exc:
        completed, error = False, type(exc).__name__
    violation = _consistency_violation(world, flow, pre_keys)
    return Outcome(actions=actions, completed=completed, error=error, violation=violation)


def enumerate_single_actions(recorded: list[WireFrame], flip_bit_stride: int,
                             knowledge_keys: list[bytes] | None = None) -> list[Tamper]:
    acts: list[Tamper] = []
    n = len(recorded)
    for i in range(n):
        acts.append(Tamper("drop", i))
        acts.append(Tamper("replay", i, source=i))
        for j in range(n):
            if j != i:
                acts.append(Tamper("reorder", i, source=j))
        for bit in range(0, len(recorded[i].data) * 8, flip_bit_stride):
            acts.append(Tamper("flip", i, bit=bit))
    if knowledge_keys:
        # forging needs a key in the closure; in honest runs there is none
        for i in range(n):
            acts.append(Tamper("inject", i))
    return acts


@dataclass
class SweepReport:
    flow: str
    budget: int
    total_runs: int
    accepting_violations: int
    outcomes: list[Outcome] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"flow": self.flow, "budget": self.budget, "total_runs": self.total_runs,
                "accepting_violations": self.accepting_violations,
                "outcomes": [o.to_json() for o in self.outcomes]}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)


def tamper_sweep(flow: str, budget: int = 2, seed: int = 0,
                 single_flip_stride: int = 1, pair_flip_stride: int = 32,
                 initial_knowledge: set[bytes] | None = None,
                 keep_outcomes: bool = True) -> SweepReport:
    """Exhaust all tamper sequences up to ``budget`` actions.

    Bit flips are exhaustive at budget 1 and walk a coarser lattice in
    combination, keeping the enumeration under a million runs.
    """
    if not 1 <= budget <= 3:
        raise ValueError("budget must be between 1 and 3")
    recorded, _, _ = record_honest_run(flow, setup_seed=seed, flow_seed=seed + 1)

    knowledge_keys = None
    if initial_knowledge:
        knowledge = AttackerKnowledge(initial_knowledge)
        knowledge.observe(recorded)
        knowledge.close()
        knowledge_keys = knowledge.candidate_keys()

    report = SweepReport(flow=flow, budget=budget, total_runs=0, accepting_violations=0)
    flow_seed = seed + 1000

    def execute(actions: tuple[Tamper, ...]):
        nonlocal flow_seed
        flow_seed += 1
        outcome = run_tampered(flow, actions, recorded, seed, flow_seed, knowledge_keys)
        report.total_runs += 1
        if outcome.violation is not None:
            report.accepting_violations += 1
        if keep_outcomes or outcome.violation is not None:
            report.outcomes.append(outcome)

    for act in enumerate_single_actions(recorded, single_flip_stride, knowledge_keys):
        execute((act,))
    if budget >= 2:
        coarse = enumerate_single_actions(recorded, pair_flip_stride, knowledge_keys)
        for a in coarse:
            for b in coarse:
                execute((a, b))
    if budget >= 3:
        sparse = enumerate_single_actions(recorded, pair_flip_stride * 8, knowledge_keys)
        for a in sparse:
            for b in sparse:
                for c in sparse:
                    execute((a, b, c))
    return report
