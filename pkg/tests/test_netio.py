import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groupsecagg.keyplan import KeyPlan, Regime, SystemParams, build_key_plan
from groupsecagg.netio import (
    AggregationServer,
    FrameError,
    MsgType,
    decode_frame,
    decode_key_view,
    decode_survivors,
    encode_frame,
    encode_key_view,
    encode_survivors,
    key_sharing_cost,
    loopback_session,
    read_key_file,
    recv_frame,
    run_user,
    send_frame,
    write_key_files,
)
from groupsecagg.protocol import generate_keys, oracle_sum, random_inputs
from groupsecagg.simharness import DropoutSchedule, run_once

L = 1000


@pytest.fixture(scope="module")
def plan533():
    return build_key_plan(SystemParams(5, 3, 3), seed=0)


# ---------------------------------------------------------------- framing


@settings(max_examples=60)
@given(st.sampled_from(list(MsgType)), st.binary(max_size=512))
def test_frame_round_trip(kind, payload):
    assert decode_frame(encode_frame(kind, payload)) == (kind, payload)


def test_frame_layout_is_bit_exact():
    frame = encode_frame(MsgType.ROUND2, b"\x01" * 8)
    assert frame[:4] == b"GSA1"
    assert frame[4] == 1 and frame[5] == 5
    assert struct.unpack("<Q", frame[6:14]) == (8,)
    assert len(frame) == 14 + 8


def test_wrong_magic_rejected():
    frame = bytearray(encode_frame(MsgType.HELLO, b"\0" * 8))
    frame[:4] = b"XXXX"
    with pytest.raises(FrameError, match="magic"):
        decode_frame(bytes(frame))


def test_bad_version_type_and_length_rejected():
    good = encode_frame(MsgType.HELLO, b"\0" * 8)
    with pytest.raises(FrameError, match="version"):
        decode_frame(good[:4] + b"\x02" + good[5:])
    with pytest.raises(FrameError, match="type"):
        decode_frame(good[:5] + b"\x09" + good[6:])
    with pytest.raises(FrameError, match="length"):
        decode_frame(good + b"\0")
    with pytest.raises(FrameError):
        decode_frame(good[:10])


@given(st.lists(st.integers(1, 50), unique=True, max_size=20))
def test_survivor_list_round_trip(users):
    assert decode_survivors(encode_survivors(users)) == sorted(users)


def test_key_view_round_trip_and_scope(plan533, tmp_path):
    mat = generate_keys(plan533, 4, L)
    view = decode_key_view(encode_key_view(mat, 2), plan533, 2)
    for gi in plan533.groups_of(2):
        for m in plan533.groups[gi]:
            assert np.array_equal(view.subkeys[gi][m], mat.subkeys[gi][m])
    assert all(not view.subkeys[gi] for gi in range(len(plan533.groups)) if gi not in plan533.groups_of(2))
    write_key_files(mat, tmp_path)
    assert read_key_file(tmp_path / "user3.keys", plan533, 3).symbol_count() == \
        sum(len(plan533.groups[gi]) for gi in plan533.groups_of(3)) * mat.block_length
    with pytest.raises(FrameError):
        read_key_file(tmp_path / "user3.keys", plan533, 4)


# ---------------------------------------------------------------- sessions


def test_loopback_matches_oracle_and_simulator(plan533):
    res, users = loopback_session(plan533, L, seed=11, timeout=10)
    assert res.aborted is None and res.U1 == res.U2 == [1, 2, 3, 4, 5]
    expect = oracle_sum(plan533, random_inputs(plan533, 11, L), res.U1)
    assert np.array_equal(res.decoded, expect)
    sim = run_once(SystemParams(5, 3, 3, L=L), DropoutSchedule.explicit(), seed=11, plan=plan533)
    assert np.array_equal(sim.decoded, res.decoded)
    assert all(u.status == "ok" and np.array_equal(u.decoded, expect) for u in users.values())
    padded = 3 * -(-L // 3)
    for k in range(1, 6):
        assert res.ledger.octets[k]["round1"] == 8 * padded
        assert res.ledger.octets[k]["round2"] == 8 * padded // 3
        assert res.ledger.octets[k]["keys"] > 0


def test_injected_round1_drop(plan533):
    res, users = loopback_session(plan533, L, seed=3, drop_round1=[4], timeout=10)
    assert res.U1 == [1, 2, 3, 5]
    assert np.array_equal(res.decoded, oracle_sum(plan533, random_inputs(plan533, 3, L), res.U1))
    assert users[4].status == "dropped"
    assert res.ledger.octets[4]["round2"] == 0
    assert all(users[k].status == "ok" for k in (1, 2, 3, 5))


def test_injected_round2_drop_and_abort(plan533):
    res, _ = loopback_session(plan533, L, seed=5, drop_round2=[1, 2], timeout=10)
    assert res.U2 == [3, 4, 5]
    assert np.array_equal(res.decoded, oracle_sum(plan533, random_inputs(plan533, 5, L), res.U1))
    res, users = loopback_session(plan533, L, seed=5, drop_round2=[1, 2, 3], timeout=10)
    assert res.aborted and res.decoded is None
    assert all(u.status == "aborted" for u in users.values())


def test_key_file_mode(plan533, tmp_path):
    res, users = loopback_session(plan533, L, seed=8, key_dir=tmp_path, timeout=10)
    assert all(v["keys"] == 0 for v in res.ledger.octets.values())
    assert np.array_equal(res.decoded, oracle_sum(plan533, random_inputs(plan533, 8, L), res.U1))


def test_duplicate_id_rejected():
    plan = build_key_plan(SystemParams(3, 2, 2), seed=0)
    server = AggregationServer(plan, 10, timeout=10)
    out = {}
    t = threading.Thread(target=lambda: out.setdefault("res", server.serve()))
    t.start()
    first = socket.create_connection(server.address)
    send_frame(first, MsgType.HELLO, struct.pack("<Q", 2))
    second = socket.create_connection(server.address)
    send_frame(second, MsgType.HELLO, struct.pack("<Q", 2))
    kind, payload = recv_frame(second)
    assert kind is MsgType.ABORT and b"already connected" in payload
    second.close()
    users = {}
    ths = [threading.Thread(target=lambda k=k: users.setdefault(k, run_user(k, plan, 10, *server.address)))
           for k in (1, 3)]
    for th in ths:
        th.start()
    # the accepted id-2 client hangs up after its keys, so it drops out of round 1
    kind, _ = recv_frame(first)
    assert kind is MsgType.KEYS
    first.close()
    t.join(15)
    for th in ths:
        th.join(15)
    assert server.rejected and "already connected" in server.rejected[0]
    assert out["res"].U1 == [1, 3]
    assert users[1].status == "ok"


def test_user_rejects_garbage_from_server(plan533):
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]

    def evil():
        conn, _ = srv.accept()
        recv_frame(conn)
        conn.sendall(b"NOPE" + b"\0" * 10)
        conn.close()

    th = threading.Thread(target=evil)
    th.start()
    res = run_user(1, plan533, L, "127.0.0.1", port, timeout=5)
    th.join()
    srv.close()
    assert res.status == "error" and "magic" in res.reason


# ---------------------------------------------------------------- key-sharing cost


def test_generator_cost_cyclic_9_5():
    plan = build_key_plan(SystemParams(9, 5, 5), seed=0)
    assert plan.regime is Regime.CYCLIC
    Lp = 5 * -(-1000 // 5)
    cost = key_sharing_cost(plan, 1000, "generator")
    # each user generates its one cyclic key (5 sub-keys of L'/5) and sends it to 4 peers
    assert cost == {k: 4 * 5 * (Lp // 5) * 8 for k in range(1, 10)}


def test_balanced_cost_pairwise():
    plan = build_key_plan(SystemParams(4, 3, 2), seed=0)
    assert plan.regime is Regime.PAIRWISE
    cost = key_sharing_cost(plan, 999, "balanced")
    block = 999 // 3
    # every user is in K-1 = 3 pairs and sends one block per pair
    assert cost == {k: 3 * block * 8 for k in range(1, 5)}
    gen = key_sharing_cost(plan, 999, "generator")
    assert sum(gen.values()) == sum(cost.values())
    assert gen[1] == 3 * 2 * block * 8 and gen[4] == 0


def test_cost_empty_plan_and_bad_strategy(plan533):
    empty = KeyPlan(2, 1, 2, 7, Regime.CYCLIC, (), (), ((1,), (1,)), 0)
    assert key_sharing_cost(empty, 100, "generator") == {1: 0, 2: 0}
    assert key_sharing_cost(empty, 100, "balanced") == {1: 0, 2: 0}
    with pytest.raises(ValueError):
        key_sharing_cost(plan533, 100, "mesh")
