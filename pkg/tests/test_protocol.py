from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groupsecagg.keyplan import SystemParams, build_key_plan
from groupsecagg.planio import load_plan
from groupsecagg.protocol import (
    InputVector,
    InsufficientSurvivors,
    KeyAccessViolation,
    ProtocolError,
    ProtocolOrderError,
    dump_transcript,
    generate_keys,
    load_transcript,
    mask_aggregate,
    oracle_sum,
    random_inputs,
    round1_encode,
    round2_encode,
    run_protocol,
    server_decode,
    zero_keys,
)

FIX = Path(__file__).parent / "fixtures"
EX1 = load_plan(FIX / "example1_k3u2.gsa")
EX2 = load_plan(FIX / "example2_k4u3.gsa")
EX3 = load_plan(FIX / "example3_k6u4.gsa")


def as_ints(a):
    return [int(x) for x in np.ravel(a)]


def test_generate_keys_counts():
    plan = build_key_plan(SystemParams(10, 5, 6))
    keys = generate_keys(plan, seed=1, L=100)
    assert sum(len(g) for g in keys.subkeys.values()) == 60
    assert all(len(z) == 20 for g in keys.subkeys.values() for z in g.values())


def test_different_seeds_differ():
    a = generate_keys(EX1, 1, 16)
    b = generate_keys(EX1, 2, 16)
    assert any(not np.array_equal(a.subkeys[g][m], b.subkeys[g][m]) for g in a.subkeys for m in a.subkeys[g])
    c = generate_keys(EX1, 1, 16)
    assert all(np.array_equal(a.subkeys[g][m], c.subkeys[g][m]) for g in a.subkeys for m in a.subkeys[g])


def test_binary_keys_look_uniform():
    plan = build_key_plan(SystemParams(3, 2, 2, q=2), seed=0, max_attempts=64)
    keys = generate_keys(plan, 5, 2 * 1700)
    flat = np.concatenate([z for g in keys.subkeys.values() for z in g.values()])
    assert flat.size >= 10_000
    assert 0.45 <= flat.mean() <= 0.55


def test_zero_keys_round1_is_input():
    w = random_inputs(EX1, 3, 10)
    keys = zero_keys(EX1, 10)
    msg = round1_encode(1, w[1], keys.view(1), EX1)
    assert np.array_equal(msg.blocks, w[1].blocks(2))


def test_zero_input_round1_is_mask():
    f = EX1.field
    keys = generate_keys(EX1, 3, 4)
    w = InputVector.from_values(1, [0] * 4, 2, f)
    msg = round1_encode(1, w, keys.view(1), EX1)
    z12, z13 = keys.subkeys[0][1], keys.subkeys[1][1]
    # a_{12} = [1,1], a_{13} = [1,2]
    assert as_ints(msg.blocks[0]) == as_ints(f.vadd(z12, z13))
    assert as_ints(msg.blocks[1]) == as_ints(f.vadd(z12, f.vscale(2, z13)))


def test_first_example_second_block_of_user_one():
    f = EX1.field
    keys = generate_keys(EX1, 8, 6)
    w = random_inputs(EX1, 8, 6)[1]
    msg = round1_encode(1, w, keys.view(1), EX1)
    expect = f.vadd(f.vadd(w.blocks(2)[1], keys.subkeys[0][1]), f.vscale(2, keys.subkeys[1][1]))
    assert as_ints(msg.blocks[1]) == as_ints(expect)


def test_round2_example_two_user_two_sends_first_mask_block():
    keys = generate_keys(EX2, 4, 9)
    U1 = [1, 2, 3, 4]
    y = round2_encode(2, keys.view(2), EX2, U1)
    assert as_ints(y.block) == as_ints(mask_aggregate(EX2, keys, U1)[0])


def test_round2_example_one_user_three():
    f = EX1.field
    keys = generate_keys(EX1, 4, 8)
    F = mask_aggregate(EX1, keys, [1, 2, 3])
    y = round2_encode(3, keys.view(3), EX1, [1, 2, 3])
    assert as_ints(y.block) == as_ints(f.vsub(F[0], F[1]))


def test_round2_zero_keys():
    y = round2_encode(2, zero_keys(EX3, 8).view(2), EX3, range(1, 7))
    assert not y.block.any()


def test_round2_refuses_dropped_user():
    keys = generate_keys(EX1, 0, 4)
    with pytest.raises(ProtocolOrderError):
        round2_encode(3, keys.view(3), EX1, [1, 2])


def test_decode_no_dropouts():
    inputs = random_inputs(EX1, 10, 7)
    keys = generate_keys(EX1, 10, 7)
    out, _, _ = run_protocol(EX1, inputs, keys, [1, 2, 3], [1, 2, 3])
    assert as_ints(out) == as_ints(oracle_sum(EX1, inputs, [1, 2, 3]))


def test_decode_sums_round_one_survivors_not_round_two():
    f = EX1.field
    inputs = random_inputs(EX1, 11, 7)
    keys = generate_keys(EX1, 11, 7)
    out, _, _ = run_protocol(EX1, inputs, keys, [1, 2, 3], [1, 2])
    direct = f.vadd(f.vadd(inputs[1].symbols, inputs[2].symbols), inputs[3].symbols)[:7]
    assert as_ints(out) == as_ints(direct)


def test_decode_zero_inputs():
    f = EX3.field
    inputs = {k: InputVector.from_values(k, [0] * 10, 4, f) for k in range(1, 7)}
    out, _, _ = run_protocol(EX3, inputs, generate_keys(EX3, 1, 10), [1, 2, 4, 5, 6], [2, 4, 5, 6])
    assert not out.any() and len(out) == 10


def test_insufficient_survivors():
    inputs = random_inputs(EX3, 1, 8)
    with pytest.raises(InsufficientSurvivors):
        run_protocol(EX3, inputs, generate_keys(EX3, 1, 8), [1, 2, 3, 4, 5], [1, 2, 3])


def test_round2_set_must_be_within_round1():
    inputs = random_inputs(EX1, 1, 4)
    keys = generate_keys(EX1, 1, 4)
    _, m1, m2 = run_protocol(EX1, inputs, keys, [1, 2, 3], [1, 2, 3])
    with pytest.raises(ProtocolError):
        server_decode(EX1, [1, 2], {k: m1[k] for k in (1, 2)}, [1, 2, 3], m2, 4)


def test_foreign_key_access_is_rejected():
    keys = generate_keys(EX1, 0, 4)
    view = keys.view(1)
    g23 = EX1.groups.index((2, 3))
    with pytest.raises(KeyAccessViolation):
        view.subkey(g23, 2)


@pytest.mark.parametrize("plan", [EX1, EX2, EX3], ids=["ex1", "ex2", "ex3"])
def test_views_only_touch_own_groups(plan):
    inputs = random_inputs(plan, 2, 9)
    keys = generate_keys(plan, 2, 9)
    U1 = list(range(1, plan.K + 1))
    for k in U1:
        view = keys.view(k)
        round1_encode(k, inputs[k], view, plan)
        round2_encode(k, view, plan, U1)
        assert view.accessed <= set(plan.groups_of(k))
        assert view.accessed


def test_message_sizes():
    plan = build_key_plan(SystemParams(7, 3, 5))
    inputs = random_inputs(plan, 0, 100)
    _, m1, m2 = run_protocol(plan, inputs, generate_keys(plan, 0, 100), range(1, 8), range(1, 8))
    assert all(m.symbol_count == 102 for m in m1.values())
    assert all(m.symbol_count == 34 for m in m2.values())


def test_transcript_round_trip():
    inputs = random_inputs(EX3, 5, 9)
    keys = generate_keys(EX3, 5, 9)
    U1, U2 = [1, 2, 3, 5, 6], [2, 3, 5, 6]
    _, m1, m2 = run_protocol(EX3, inputs, keys, U1, U2)
    blob = dump_transcript(EX3, 9, U1, m1, U2, m2)
    assert len(blob) == 48 + 1 + 5 * 12 * 8 + 1 + 4 * 3 * 8
    t = load_transcript(blob)
    assert (t.K, t.U, t.length, t.padded) == (6, 4, 9, 12)
    assert t.U1 == U1 and t.U2 == U2
    assert all(np.array_equal(t.round1[k].blocks, m1[k].blocks) for k in U1)
    redecoded = server_decode(EX3, t.U1, t.round1, t.U2, t.round2, t.length)
    assert as_ints(redecoded) == as_ints(oracle_sum(EX3, inputs, U1))


PLANS = {
    (K, U): build_key_plan(SystemParams(K, U, K - U + 1), seed=K * 31 + U)
    for K in range(2, 9) for U in range(1, K)
}


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(sorted(PLANS)), st.integers(0, 2**31), st.data())
def test_end_to_end_any_dropout(KU, seed, data):
    plan = PLANS[KU]
    K, U = KU
    users = list(range(1, K + 1))
    U1 = sorted(data.draw(st.sets(st.sampled_from(users), min_size=U)))
    U2 = sorted(data.draw(st.sets(st.sampled_from(U1), min_size=U)))
    L = data.draw(st.integers(1, 13))
    inputs = random_inputs(plan, seed, L)
    keys = generate_keys(plan, seed, L)
    rows = data.draw(st.sampled_from(["lowest", "random"]))
    out, m1, m2 = run_protocol(plan, inputs, keys, U1, U2, rows=rows, rng=np.random.default_rng(seed))
    assert as_ints(out) == as_ints(oracle_sum(plan, inputs, U1))
    F = mask_aggregate(plan, keys, U1)
    f = plan.field
    for k in U2:
        expect = np.zeros_like(F[0])
        for j, c in enumerate(plan.s(k)):
            expect = f.vadd(expect, f.vscale(c, F[j]))
        assert as_ints(m2[k].block) == as_ints(expect)


@pytest.mark.parametrize("q", [7, 2**31 - 1, 2**40 + 15])
def test_end_to_end_other_moduli(q):
    plan = build_key_plan(SystemParams(6, 4, 3, q=q), seed=2)
    inputs = random_inputs(plan, 1, 11)
    out, _, _ = run_protocol(plan, inputs, generate_keys(plan, 1, 11), [1, 3, 4, 5, 6], [1, 4, 5, 6])
    assert as_ints(out) == as_ints(oracle_sum(plan, inputs, [1, 3, 4, 5, 6]))
