from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from nicpool.app_model import (Action, FiveTuple, FlowRecord, Packet, SocketTable, StageKind, StageSpec,
                               accel_inverse, accel_reference, api_gateway_message, app_registry, build_app,
                               default_registry, execute_stage)
from nicpool.errors import (AbstractionMismatch, DuplicateRegistration, EmptyPipeline, UnknownAccelerator,
                            UnknownSocket, UnknownUcf)

FLOW = FiveTuple(0x0A000001, 0x0A000002, 1234, 80)


def pkt(payload=b"hello", seq=0):
    return Packet(FLOW, len(payload), payload, seq)


def isg_stages():
    return [
        StageSpec("ddos", StageKind.PKT_FLT, "ddos_check"),
        StageSpec("url", StageKind.PKT_FLT, "url_check"),
        StageSpec("ipsec", StageKind.PKT_TRANS, "ipsec"),
        StageSpec("aes", StageKind.ACCEL_FN, accel="AES"),
    ]


def test_ipsec_gateway_builds_four_stages():
    app = build_app(isg_stages(), app_id="isg")
    assert app.n_stages == 4
    assert [s.kind for s in app.stages] == [StageKind.PKT_FLT, StageKind.PKT_FLT, StageKind.PKT_TRANS,
                                            StageKind.ACCEL_FN]


def test_empty_chain_rejected():
    with pytest.raises(EmptyPipeline):
        build_app([])


def test_socket_stage_in_packet_app_rejected():
    with pytest.raises(AbstractionMismatch):
        build_app([StageSpec("s", StageKind.SOCKET_EPOLL, "l7_lb")], abstraction="PacketLevel")


def test_unknown_ucf_and_accelerator():
    with pytest.raises(UnknownUcf):
        build_app([StageSpec("s", StageKind.PKT_TRANS, "no_such_fn")])
    with pytest.raises(UnknownAccelerator):
        StageSpec("s", StageKind.ACCEL_FN, accel="Quantum")
    with pytest.raises(UnknownAccelerator):
        build_app([StageSpec("s", StageKind.ACCEL_FN, accel="AES")], vocabulary=["Regex"])


def test_app_spec_is_immutable():
    app = build_app(isg_stages())
    with pytest.raises(Exception):
        app.stages = ()
    with pytest.raises(TypeError):
        app.stages[0].params["x"] = 1


def test_registry_append_only():
    reg = app_registry()
    reg.register("mine", lambda p, c: True)
    with pytest.raises(DuplicateRegistration):
        reg.register("mine", lambda p, c: True)
    with pytest.raises(DuplicateRegistration):
        reg.register("identity", lambda p, c: True)
    reg.freeze()
    with pytest.raises(RuntimeError):
        reg.register("late", lambda p, c: True)
    assert "identity" in reg and "mine" in reg


def test_zero_byte_filter_drops():
    stage = StageSpec("f", StageKind.PKT_FLT, "no_zero_byte")
    assert execute_stage(stage, pkt(b"\x00" * 8)).action == Action.DROP
    assert execute_stage(stage, pkt(b"abc")).action == Action.PASS


def test_identity_passes_unchanged():
    p = pkt(b"payload")
    before = p.fields()
    res = execute_stage(StageSpec("t", StageKind.PKT_TRANS, "identity"), p)
    assert res.action == Action.PASS and res.output is p and p.fields() == before


def test_flow_ext_windows():
    stage = StageSpec("w", StageKind.FLOW_EXT, "five_tuple_window", window_size=4, slide_interval=4)
    pkts = [pkt(b"x", i) for i in range(8)]
    res = execute_stage(stage, pkts)
    assert res.action == Action.EMIT
    assert len(res.emitted) == 2
    assert all(isinstance(r, FlowRecord) for r in res.emitted)
    assert res.output == pkts


def test_ucf_panic_drops_and_reports():
    reg = app_registry()

    def boom(p, c):
        raise RuntimeError("bad")

    reg.register("boom", boom)
    res = execute_stage(StageSpec("b", StageKind.PKT_TRANS, "boom"), pkt(), registry=reg)
    assert res.action == Action.DROP and res.error is not None


def test_regex_counts_literal_match():
    _, info = accel_reference("Regex", {"rules": ["abc"]}, b"xxabcxx")
    assert info["count"] == 1


def test_aes_is_deterministic_and_invertible():
    a, _ = accel_reference("AES", {}, b"same input" * 5)
    b, _ = accel_reference("AES", {}, b"same input" * 5)
    assert a == b and a != b"same input" * 5
    assert accel_inverse("AES", {}, a) == b"same input" * 5


@given(st.binary(max_size=2048), st.integers(0, 9))
def test_compression_round_trip(data, level):
    out, info = accel_reference("Compression", {"level": level}, data)
    assert accel_inverse("Compression", {}, out) == data
    assert info["in_len"] == len(data)


@given(st.binary(max_size=512))
def test_pkt_flt_never_mutates_what_it_passes(data):
    stage = StageSpec("ddos", StageKind.PKT_FLT, "ddos_check")
    p = Packet(FLOW, len(data), data)
    payload = p.payload
    res = execute_stage(stage, p)
    if res.action == Action.PASS:
        assert res.output.payload == payload and res.output.payload_len == len(data)


@given(st.lists(st.binary(min_size=1, max_size=64), min_size=1, max_size=20))
def test_stage_execution_is_deterministic(payloads):
    stage = StageSpec("url", StageKind.PKT_FLT, "url_check", params={"rules": ["ab+c"]})
    first = [execute_stage(stage, Packet(FLOW, len(d), d)).action for d in payloads]
    second = [execute_stage(stage, Packet(FLOW, len(d), d)).action for d in payloads]
    assert first == second


def test_socket_register_and_deliver():
    table = SocketTable()
    sid = table.register_socket(FLOW)
    stage = StageSpec("gw", StageKind.SOCKET_EPOLL, "api_gateway_epoll_in", params={"backends": ["b0", "b1"]})
    res = table.deliver_epoll(sid, "EPOLL_IN", api_gateway_message(b"GET /v1"), [stage])
    assert res.action == Action.PASS
    assert res.output.meta["backend"] in ("b0", "b1")
    forged = api_gateway_message(b"GET /v1", key="other")
    assert table.deliver_epoll(sid, "EPOLL_IN", forged, [stage]).action == Action.DROP


def test_socket_errors():
    table = SocketTable()
    with pytest.raises(UnknownSocket):
        table.deliver_epoll(99, "EPOLL_IN", b"", [])
    table.register_socket(FLOW)
    with pytest.raises(DuplicateRegistration):
        table.register_socket(FLOW)


def test_default_registry_has_reducers():
    reg = default_registry()
    for name in ("SUM", "COUNT", "MIN", "MAX", "TOP-N"):
        assert reg.kind_of(name) == "reducer"
