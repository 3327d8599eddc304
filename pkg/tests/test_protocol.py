"""Protocol flows: the requesting algorithm's validation order, replay
and tamper aborts, rotation, session bookkeeping, cloud-key update."""

import pytest

from otaprov import envelope, flash, messages
from otaprov.adversary import build_world
from otaprov.agent import AgentCore
from otaprov.cloud import CloudStub
from otaprov.device import Device, DeviceIdentity
from otaprov.envelope import Rng, SealedMessage
from otaprov.errors import (
    AgentRejected,
    LinkTimeout,
    Nonce1Mismatch,
    OrderingViolation,
    ReplayedNonce2,
    TagMismatch,
)
from otaprov.flash import FlashImage, KeyKind
from otaprov.messages import ErrorCode, Frame, MsgType
from otaprov.registry import EntryStatus, ProductOrderRecord, Registry
from otaprov.transport import LocalLink


def make_world(seed=0, flow="ak-init"):
    return build_world(flow, seed)


# message grammar

def test_payload_codecs_round_trip():
    rng = Rng(1)
    did, po = rng.bytes(12), rng.bytes(8)
    n1, n2, n3, key = rng.nonce(), rng.nonce(), rng.nonce(), rng.key()
    assert messages.parse_ak_request(messages.encode_ak_request(did, n1)) == (did, n1)
    assert messages.parse_ak_response(messages.encode_ak_response(key, n1, n2)) == (key, n1, n2)
    assert messages.parse_ak_confirm(messages.encode_ak_confirm(n2, n3)) == (n2, n3)
    assert messages.parse_ck_request(messages.encode_ck_request(n1)) == n1
    ck = messages.encode_ck_response(key, b"conn-info", n1, n2)
    assert messages.parse_ck_response(ck) == (key, b"conn-info", n1, n2)
    assert messages.parse_ck_confirm(messages.encode_ck_confirm(n2, n3)) == (n2, n3)
    frame = Frame(MsgType.AK_REQUEST, po, b"body")
    assert Frame.decode(frame.encode()) == frame


def test_payload_type_binding():
    rng = Rng(2)
    buf = messages.encode_ak_response(rng.key(), rng.nonce(), rng.nonce())
    with pytest.raises(Exception):
        messages.parse_ak_request(buf)  # envelope bound to another intent


# agent key initialization

def test_honest_init_leaves_unique_key_and_no_product_key():
    world = make_world()
    ak = world.device.request_ak(LocalLink(world.agent))
    assert world.device.agent_key == ak and ak != world.pk
    assert flash.boot_scan(world.device.image).active(KeyKind.PRODUCT) is None
    entry = world.agent.registry.get(world.identity.device_id)
    assert entry.status == EntryStatus.ACTIVE and entry.ak == ak


def test_validation_order_matches_requesting_algorithm():
    world = make_world()
    world.device.request_ak(LocalLink(world.agent))
    order = [name for name, _ok in world.device.check_log]
    assert order == ["nonce1", "nonce2", "mac"]


def test_response_under_wrong_product_key_aborts_and_keeps_pk():
    world = make_world()
    wrong = Rng(99).key()

    def swap_key(direction, frame):
        if frame.msg_type != MsgType.AK_RESPONSE:
            return frame
        ak, n1, n2 = Rng(77).key(), Rng(78).nonce(), Rng(79).nonce()
        # agent speaking the wrong product key: device must reject it
        body = envelope.seal(wrong, messages.encode_ak_response(ak, n1, n2),
                             Rng(80), mac_key=ak)
        return Frame(MsgType.AK_RESPONSE, b"", body.to_bytes())

    with pytest.raises((Nonce1Mismatch, TagMismatch)):
        world.device.request_ak(LocalLink(world.agent, interceptor=swap_key))
    assert world.device.product_key == world.pk
    assert world.device.agent_key is None


def test_replayed_response_rejected_by_nonce_echo():
    world = make_world()
    captured = []

    def tap(direction, frame):
        if frame.msg_type == MsgType.AK_RESPONSE:
            captured.append(frame)
        return frame

    world.device.request_ak(LocalLink(world.agent, interceptor=tap))

    world2 = make_world(seed=0)  # identical factory state, fresh session
    world2.reseed(555)

    def replay(direction, frame):
        return captured[0] if frame.msg_type == MsgType.AK_RESPONSE else frame

    with pytest.raises(Nonce1Mismatch):
        world2.device.request_ak(LocalLink(world2.agent, interceptor=replay))
    assert world2.device.product_key == world2.pk


def test_reused_server_nonce_rejected():
    """A response reusing an already-seen nonce2 dies on the freshness
    check even when the nonce1 echo is correct."""
    world = make_world()
    pk = world.pk
    stale_nonce2 = Rng(300).nonce()

    class ScriptedConn:
        def __init__(self):
            self.calls = 0

        def roundtrip(self, frame):
            plain = envelope.decrypt_noverify(pk, SealedMessage.from_bytes(frame.body))
            _, nonce1 = messages.parse_ak_request(plain)
            ak = Rng(301 + self.calls).key()
            self.calls += 1
            body = envelope.seal(pk, messages.encode_ak_response(ak, nonce1, stale_nonce2),
                                 Rng(400 + self.calls), mac_key=ak)
            return Frame(MsgType.AK_RESPONSE, b"", body.to_bytes())

        def close(self):
            pass

        def __enter__(self):
            return self

        def __exit__(self, *exc):
            pass

    class ScriptedLink:
        conn = ScriptedConn()

        def connect(self):
            return self.conn

    world.device.seen_nonce2.add(stale_nonce2)
    with pytest.raises(ReplayedNonce2):
        world.device.request_ak(ScriptedLink())
    order = [name for name, _ok in world.device.check_log]
    assert order == ["nonce1", "nonce2"]  # never reached the MAC check


def test_second_provisioning_request_refused():
    world = make_world()
    link = LocalLink(world.agent)
    world.device.request_ak(link)
    # same id arrives again holding the shared product key
    clone_image = FlashImage()
    flash.first_stage_burn(clone_image, world.pk, b"fw")
    clone = Device(world.identity, clone_image, Rng(5), sleep=lambda _s: None)
    with pytest.raises(AgentRejected) as err:
        clone.request_ak(link)
    assert err.value.code == ErrorCode.ALREADY_PROVISIONED


def test_unknown_product_order():
    world = make_world()
    foreign = DeviceIdentity(world.identity.device_id, b"\xEE" * 8)
    image = FlashImage()
    flash.first_stage_burn(image, world.pk, b"fw")
    dev = Device(foreign, image, Rng(6), sleep=lambda _s: None)
    with pytest.raises(AgentRejected) as err:
        dev.request_ak(LocalLink(world.agent))
    assert err.value.code == ErrorCode.UNKNOWN_PO


def test_duplicate_request_gets_identical_response():
    world = make_world()
    seen = {}

    def duplicate(direction, frame):
        if frame.msg_type == MsgType.AK_REQUEST:
            conn = world.agent.open_conn()
            first = world.agent.handle_frame(conn, frame)
            second = world.agent.handle_frame(conn, frame)
            seen["same"] = first == second
        return frame

    world.device.request_ak(LocalLink(world.agent, interceptor=duplicate))
    assert seen["same"] is True


def test_timeout_retries_with_fresh_nonce_then_succeeds():
    world = make_world()
    dropped = []

    def drop_first(direction, frame):
        if frame.msg_type == MsgType.AK_REQUEST and not dropped:
            dropped.append(frame)
            raise LinkTimeout("first request lost")
        return frame

    naps = []
    world.device._sleep = naps.append
    ak = world.device.request_ak(LocalLink(world.agent, interceptor=drop_first))
    assert ak is not None and naps == [1.0]


# rotation

def test_two_rotations_increase_sequence_and_supersede():
    world = make_world()
    link = LocalLink(world.agent)
    ak0 = world.device.request_ak(link)
    seq0 = flash.boot_scan(world.device.image).active(KeyKind.AGENT).seq
    ak1 = world.device.rotate_ak(link)
    ak2 = world.device.rotate_ak(link)
    seq2 = flash.boot_scan(world.device.image).active(KeyKind.AGENT).seq
    assert len({ak0, ak1, ak2}) == 3
    assert seq2 == seq0 + 2
    accepts = world.agent.accept_keys(world.identity.device_id)
    assert accepts == [ak2]  # only the freshest key remains accepted


def test_rotation_with_tampered_tag_keeps_old_key():
    world = make_world(flow="ak-rotate")
    old = world.device.agent_key

    def corrupt(direction, frame):
        if frame.msg_type != MsgType.AK_RESPONSE:
            return frame
        raw = bytearray(frame.body)
        raw[20] ^= 0x01  # inside the tag
        return Frame(frame.msg_type, frame.header, bytes(raw))

    with pytest.raises((TagMismatch, Nonce1Mismatch)):
        world.device.rotate_ak(LocalLink(world.agent, interceptor=corrupt))
    assert world.device.agent_key == old
    assert old in world.agent.accept_keys(world.identity.device_id)


def test_rotation_interrupted_before_commit_keeps_old_key_accepted():
    from otaprov.errors import PowerLost
    from otaprov.flash import FaultPlan

    world = make_world(flow="ak-rotate")
    old = world.device.agent_key
    # events: request out (0), response in (1), record write (2)
    plan = FaultPlan(cut_event=2, cut_byte=11)
    world.device.image.fault_plan = plan
    with pytest.raises(PowerLost):
        world.device.rotate_ak(LocalLink(world.agent, plan=plan))
    world.device.image.clear_power_cut()
    rebooted = Device(world.identity, world.device.image, Rng(8), sleep=lambda _s: None)
    assert rebooted.agent_key == old
    assert old in world.agent.accept_keys(world.identity.device_id)
    # and the interrupted rotation can be repeated to completion
    fresh = rebooted.rotate_ak(LocalLink(world.agent))
    assert fresh in world.agent.accept_keys(world.identity.device_id)


def test_rotate_requires_an_agent_key():
    world = make_world()
    with pytest.raises(OrderingViolation):
        world.device.rotate_ak(LocalLink(world.agent))


# cloud key flow

def test_cloud_key_update_end_to_end():
    world = make_world(flow="ak-rotate")  # provisions the agent key only
    link = LocalLink(world.agent)
    ck = world.device.update_cloud_key(link)
    assert world.device.cloud_key == ck
    info = world.device.cloud_connection_info
    assert info and len(info) <= 512
    assert world.device.authenticate_to_cloud(world.cloud)
    # second update replaces the key and the old one stops working
    ck2 = world.device.update_cloud_key(link)
    assert ck2 != ck
    assert world.device.authenticate_to_cloud(world.cloud)
    assert world.cloud.enabled_keys(world.identity.device_id) == [ck2]


def test_cloud_update_tamper_keeps_old_key():
    world = make_world(flow="ck-update")
    old = world.device.cloud_key

    def corrupt(direction, frame):
        if frame.msg_type != MsgType.CK_RESPONSE:
            return frame
        raw = bytearray(frame.body)
        raw[-1] ^= 0x80
        return Frame(frame.msg_type, frame.header, bytes(raw))

    with pytest.raises(TagMismatch):
        world.device.update_cloud_key(LocalLink(world.agent, interceptor=corrupt))
    assert world.device.cloud_key == old
    assert world.device.authenticate_to_cloud(world.cloud)


def test_lost_confirmation_still_converges_on_new_key():
    """The agent never hears the confirmation, yet the device moved on;
    the first login under the new key retires the old one."""
    world = make_world(flow="ck-update")
    old = world.device.cloud_key

    def drop_confirm(direction, frame):
        if frame.msg_type == MsgType.CK_CONFIRM:
            raise LinkTimeout("confirmation lost")
        return frame

    new = world.device.update_cloud_key(LocalLink(world.agent, interceptor=drop_confirm))
    assert world.device.cloud_key == new != old
    # window still open: both generations are enabled
    assert set(world.cloud.enabled_keys(world.identity.device_id)) == {old, new}
    assert world.device.authenticate_to_cloud(world.cloud)
    # scenario settled: the used key is now the sole credential
    assert world.cloud.enabled_keys(world.identity.device_id) == [new]


def test_revoked_device_is_refused_every_flow():
    world = make_world(flow="ck-update")
    assert world.agent.revoke(device_id=world.identity.device_id) == 1
    link = LocalLink(world.agent)
    with pytest.raises(AgentRejected) as err:
        world.device.rotate_ak(link)
    assert err.value.code == ErrorCode.REVOKED
    with pytest.raises(AgentRejected):
        world.device.update_cloud_key(link)
    assert not world.device.authenticate_to_cloud(world.cloud)


def test_uniqueness_across_a_small_fleet():
    rng = Rng(42)
    pk = rng.key()
    po = rng.bytes(8)
    cloud = CloudStub(rng=rng.spawn())
    agent = AgentCore(Registry("<memory>"),
                      {po: ProductOrderRecord(po, pk, 64, 0.0, 2**33)},
                      cloud, rng.spawn())
    link = LocalLink(agent)
    keys = set()
    for i in range(40):
        image = FlashImage()
        flash.first_stage_burn(image, pk, b"fw")
        dev = Device(DeviceIdentity(i.to_bytes(12, "big"), po), image,
                     rng.spawn(), sleep=lambda _s: None)
        keys.add(dev.request_ak(link))
    assert len(keys) == 40 and pk not in keys
