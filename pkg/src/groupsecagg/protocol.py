"""The two-round masking protocol.

Round 1: user k sends X_k = W_k + sum over its groups V of a_V (x) Z_{V,k},
block by block.  Round 2: after the server announces the round-1 survivors
U1, user k sends one block Y_k = s_k . F, where F is the aggregate mask the
server must strip.  Y_k is computed only from keys k holds, using
s_k . a_V = 0 for every group k is not in.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .field import PrimeField, from_le_bytes, to_le_bytes
from .keyplan import KeyPlan
from .linalg import FMatrix, SingularMatrixError, inverse


class ProtocolError(RuntimeError):
    pass


class KeyAccessViolation(ProtocolError):
    """A user touched a key of a group it does not belong to."""


class ProtocolOrderError(ProtocolError):
    pass


class InsufficientSurvivors(ProtocolError):
    pass


class PlanIntegrityError(ProtocolError):
    pass


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent stream for (seed, tags); used for keys, inputs and schedules."""
    return np.random.default_rng([seed, *tags])


_KEY_STREAM = 0x4B
_INPUT_STREAM = 0x57


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class InputVector:
    owner: int
    symbols: np.ndarray  # zero-padded to a multiple of U
    length: int

    @classmethod
    def from_values(cls, owner: int, values, U: int, field: PrimeField) -> "InputVector":
        arr = field.asarray(values)
        L = len(arr)
        padded = U * -(-L // U)
        out = field.zeros(padded)
        out[:L] = arr
        return cls(owner, out, L)

    def blocks(self, U: int) -> np.ndarray:
        return self.symbols.reshape(U, -1)


@dataclass
class KeyMaterial:
    """Sub-keys Z_{V,m}: ``subkeys[group_index][member]`` is a block of symbols."""

    plan: KeyPlan
    block_length: int
    subkeys: dict[int, dict[int, np.ndarray]]

    def view(self, k: int) -> "KeyView":
        return KeyView(k, self)

    def symbol_count(self) -> int:
        return sum(len(z) for g in self.subkeys.values() for z in g.values())


@dataclass
class KeyView:
    """User k's window onto the key material; every read is checked and logged."""

    user: int
    material: KeyMaterial
    accessed: set[int] = dc_field(default_factory=set)

    def subkey(self, group: int, member: int) -> np.ndarray:
        members = self.material.plan.groups[group]
        if self.user not in members:
            raise KeyAccessViolation(f"user {self.user} read key of group {members}")
        self.accessed.add(group)
        return self.material.subkeys[group][member]

    def own_groups(self) -> list[int]:
        return self.material.plan.groups_of(self.user)


@dataclass(frozen=True)
class Round1Msg:
    sender: int
    blocks: np.ndarray  # shape (U, L'/U)

    @property
    def symbol_count(self) -> int:
        return int(self.blocks.size)


@dataclass(frozen=True)
class Round2Msg:
    sender: int
    block: np.ndarray  # shape (L'/U,)

    @property
    def symbol_count(self) -> int:
        return int(self.block.size)


# ---------------------------------------------------------------- keys and inputs


def generate_keys(plan: KeyPlan, seed: int, L: int) -> KeyMaterial:
    """Uniform sub-keys for every (group, member); deterministic in ``seed``."""
    field = plan.field
    block = -(-L // plan.U)
    rng = derive_rng(seed, _KEY_STREAM)
    pairs = [(gi, m) for gi, g in enumerate(plan.groups) for m in g]
    flat = field.random_vector(rng, len(pairs) * block).reshape(len(pairs), block) if pairs else None
    subkeys: dict[int, dict[int, np.ndarray]] = {gi: {} for gi in range(len(plan.groups))}
    for row, (gi, m) in enumerate(pairs):
        subkeys[gi][m] = flat[row]
    return KeyMaterial(plan, block, subkeys)


def zero_keys(plan: KeyPlan, L: int) -> KeyMaterial:
    block = -(-L // plan.U)
    field = plan.field
    return KeyMaterial(plan, block, {gi: {m: field.zeros(block) for m in g} for gi, g in enumerate(plan.groups)})


def user_input(plan: KeyPlan, seed: int, k: int, L: int) -> InputVector:
    """User k's uniform input; each user draws from its own stream."""
    field = plan.field
    return InputVector.from_values(k, field.random_vector(derive_rng(seed, _INPUT_STREAM, k), L), plan.U, field)


def random_inputs(plan: KeyPlan, seed: int, L: int) -> dict[int, InputVector]:
    return {k: user_input(plan, seed, k, L) for k in range(1, plan.K + 1)}


# ---------------------------------------------------------------- encoders


def round1_encode(k: int, w: InputVector, keys: KeyView, plan: KeyPlan) -> Round1Msg:
    if w.owner != k or keys.user != k:
        raise ProtocolError(f"user {k} handed input of {w.owner} / keys of {keys.user}")
    field = plan.field
    x = w.blocks(plan.U).copy()
    for gi in keys.own_groups():
        a = field.asarray(plan.a_vectors[gi])
        if not any(plan.a_vectors[gi]):
            continue
        z = keys.subkey(gi, k)
        x = field.vadd(x, field.vmul(a[:, None], z[None, :]))
    return Round1Msg(k, x)


def coded_key(keys: KeyView, group: int, survivors: Iterable[int]) -> np.ndarray:
    """Z^{U1}_V: sum of the surviving members' sub-keys of one group."""
    plan = keys.material.plan
    field = plan.field
    members = [m for m in plan.groups[group] if m in set(survivors)]
    if not members:
        raise ProtocolError(f"group {plan.groups[group]} has no survivor")
    return field.vsum(keys.subkey(group, m) for m in members)


def round2_encode(k: int, keys: KeyView, plan: KeyPlan, U1: Iterable[int]) -> Round2Msg:
    U1 = set(U1)
    if k not in U1:
        raise ProtocolOrderError(f"user {k} dropped after round 1 and may not answer round 2")
    if len(U1) < plan.U:
        raise InsufficientSurvivors(f"|U1|={len(U1)} < U={plan.U}")
    field = plan.field
    s = plan.s(k)
    y = field.zeros(keys.material.block_length)
    for gi in keys.own_groups():
        c = field.dot(s, plan.a_vectors[gi])
        if c:
            y = field.vadd(y, field.vscale(c, coded_key(keys, gi, U1)))
    return Round2Msg(k, y)


def mask_aggregate(plan: KeyPlan, keys: KeyMaterial, U1: Iterable[int]) -> np.ndarray:
    """F_j = sum_V a_{V,j} Z^{U1}_V, computed with knowledge of every key (test oracle)."""
    field = plan.field
    U1 = set(U1)
    f = field.zeros((plan.U, keys.block_length))
    for gi, g in enumerate(plan.groups):
        live = [m for m in g if m in U1]
        if not live:
            continue
        z = field.vsum(keys.subkeys[gi][m] for m in live)
        f = field.vadd(f, field.vmul(field.asarray(plan.a_vectors[gi])[:, None], z[None, :]))
    return f


# ---------------------------------------------------------------- server


def _by_sender(msgs) -> dict:
    if isinstance(msgs, Mapping):
        return dict(msgs)
    return {m.sender: m for m in msgs}


def server_decode(plan: KeyPlan, U1: Iterable[int], msgs1, U2: Iterable[int], msgs2, length: int,
                  rows: str = "lowest", rng: np.random.Generator | None = None) -> np.ndarray:
    """Recover sum_{k in U1} W_k (first ``length`` symbols).

    ``rows`` picks which U round-2 answers to solve with: the U lowest
    indices of U2, or a random U-subset (needs ``rng``).
    """
    field = plan.field
    U1, U2 = sorted(set(U1)), sorted(set(U2))
    if not set(U2) <= set(U1):
        raise ProtocolError("round-2 survivors must be a subset of round-1 survivors")
    if len(U2) < plan.U:
        raise InsufficientSurvivors(f"only {len(U2)} round-2 answers, need {plan.U}")
    m1, m2 = _by_sender(msgs1), _by_sender(msgs2)
    missing = [k for k in U1 if k not in m1] + [k for k in U2 if k not in m2]
    if missing:
        raise ProtocolError(f"missing messages from users {missing}")

    total = field.vsum(m1[k].blocks for k in U1)
    if rows == "lowest":
        chosen = U2[: plan.U]
    elif rows == "random":
        rng = rng or np.random.default_rng()
        chosen = sorted(int(c) for c in rng.choice(U2, size=plan.U, replace=False))
    else:
        raise ValueError(f"unknown row selection {rows!r}")
    s_stack = FMatrix.from_rows(field, [plan.s(k) for k in chosen])
    try:
        inv = inverse(s_stack)
    except SingularMatrixError as exc:
        raise PlanIntegrityError(f"decoding rows of users {chosen} are dependent") from exc
    y = np.stack([m2[k].block for k in chosen])
    mask = field.zeros(total.shape)
    for j in range(plan.U):
        for i in range(plan.U):
            c = inv[j, i]
            if c:
                mask[j] = field.vadd(mask[j], field.vscale(c, y[i]))
    flat = field.vsub(total, mask).reshape(-1)
    if any(int(v) for v in flat[length:]):
        raise PlanIntegrityError("padding symbols did not decode to zero")
    return flat[:length]


def oracle_sum(plan: KeyPlan, inputs: Mapping[int, InputVector], U1: Iterable[int]) -> np.ndarray:
    """Plain symbolwise sum of the survivors' raw inputs."""
    field = plan.field
    U1 = sorted(set(U1))
    length = inputs[U1[0]].length
    return field.vsum(inputs[k].symbols[:length] for k in U1)


# ---------------------------------------------------------------- transcript dump


def _bitmap(K: int, members: Iterable[int]) -> bytes:
    bits = bytearray((K + 7) // 8)
    for k in members:
        bits[(k - 1) // 8] |= 1 << ((k - 1) % 8)
    return bytes(bits)


def _unbitmap(K: int, data: bytes) -> list[int]:
    return [k for k in range(1, K + 1) if data[(k - 1) // 8] >> ((k - 1) % 8) & 1]


def dump_transcript(plan: KeyPlan, length: int, U1, msgs1, U2, msgs2) -> bytes:
    """Binary transcript: header, U1 bitmap, X blocks, U2 bitmap, Y blocks (little-endian)."""
    U1, U2 = sorted(set(U1)), sorted(set(U2))
    m1, m2 = _by_sender(msgs1), _by_sender(msgs2)
    padded = plan.U * -(-length // plan.U)
    out = [struct.pack("<6Q", plan.K, plan.U, plan.S, plan.q, length, padded), _bitmap(plan.K, U1)]
    out += [to_le_bytes(m1[k].blocks) for k in U1]
    out.append(_bitmap(plan.K, U2))
    out += [to_le_bytes(m2[k].block) for k in U2]
    return b"".join(out)


@dataclass
class Transcript:
    K: int
    U: int
    S: int
    q: int
    length: int
    padded: int
    U1: list[int]
    round1: dict[int, Round1Msg]
    U2: list[int]
    round2: dict[int, Round2Msg]


def load_transcript(data: bytes) -> Transcript:
    K, U, S, q, length, padded = struct.unpack_from("<6Q", data, 0)
    field = PrimeField(q)
    pos = 48
    nb = (K + 7) // 8
    U1 = _unbitmap(K, data[pos:pos + nb])
    pos += nb
    round1 = {}
    for k in U1:
        n = padded * 8
        round1[k] = Round1Msg(k, from_le_bytes(data[pos:pos + n], field).reshape(U, -1))
        pos += n
    U2 = _unbitmap(K, data[pos:pos + nb])
    pos += nb
    round2 = {}
    for k in U2:
        n = padded // U * 8
        round2[k] = Round2Msg(k, from_le_bytes(data[pos:pos + n], field))
        pos += n
    if pos != len(data):
        raise ValueError(f"transcript has {len(data) - pos} trailing octets")
    return Transcript(K, U, S, q, length, padded, U1, round1, U2, round2)


def run_protocol(plan: KeyPlan, inputs: Mapping[int, InputVector], keys: KeyMaterial,
                 U1: Sequence[int], U2: Sequence[int], rows: str = "lowest", rng=None):
    """Both rounds plus decoding in one call; returns (decoded, round1 msgs, round2 msgs)."""
    views = {k: keys.view(k) for k in range(1, plan.K + 1)}
    msgs1 = {k: round1_encode(k, inputs[k], views[k], plan) for k in U1}
    msgs2 = {k: round2_encode(k, views[k], plan, U1) for k in U2}
    length = inputs[next(iter(U1))].length
    return server_decode(plan, U1, msgs1, U2, msgs2, length, rows=rows, rng=rng), msgs1, msgs2
