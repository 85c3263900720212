"""Exact security audits at toy scale, plus the converse rate bounds.

The audits enumerate every realization of the key material.  Rather than
looping, each realization occupies its own stretch of the block axis: a
sub-key of block length B becomes a vector of length B * (#realizations),
and the ordinary protocol encoders then produce every transcript in one
call.  Verdicts come from integer counts only.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from math import comb
from typing import Iterable

import numpy as np

from .keyplan import ConstructionFailed, KeyPlan, SystemParams, build_key_plan
from .protocol import InputVector, KeyMaterial, derive_rng, mask_aggregate, round1_encode, round2_encode

log = logging.getLogger(__name__)

DEFAULT_CEILING = 10**8
MAX_AUDIT_Q = 5
PAIRS_PER_SUM = 200


class AuditRefused(RuntimeError):
    """The requested enumeration exceeds the configured ceiling or limits."""


@dataclass
class AuditConfig:
    plan: KeyPlan
    L: int
    U1: tuple[int, ...] | None = None
    ceiling: int = DEFAULT_CEILING
    seed: int = 0
    chunk: int = 1 << 20

    def __post_init__(self) -> None:
        if self.plan.q > MAX_AUDIT_Q:
            raise AuditRefused(f"audits need q <= {MAX_AUDIT_Q}, plan uses q={self.plan.q}")
        if not 1 <= self.L <= 2 * self.plan.U:
            raise AuditRefused(f"audits need 1 <= L <= 2U = {2 * self.plan.U}, got L={self.L}")
        U1 = tuple(sorted(self.U1)) if self.U1 is not None else tuple(range(1, self.plan.K + 1))
        if len(U1) < self.plan.U or not set(U1) <= set(range(1, self.plan.K + 1)):
            raise ValueError(f"U1={U1} must hold at least U={self.plan.U} valid users")
        self.U1 = U1

    @property
    def block(self) -> int:
        return -(-self.L // self.plan.U)

    @property
    def padded(self) -> int:
        return self.block * self.plan.U


@dataclass
class Verdict:
    check: str
    passed: bool
    mode: str
    counts: dict = dc_field(default_factory=dict)
    witness: object = None
    notes: list[str] = dc_field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 2

    def report(self) -> str:
        lines = [f"{self.check}: {'PASS' if self.passed else 'FAIL'} ({self.mode})"]
        lines += [f"  {k}: {v}" for k, v in self.counts.items()]
        if self.witness is not None:
            lines.append(f"  witness: {self.witness}")
        lines += [f"  note: {n}" for n in self.notes]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"check": self.check, "passed": self.passed, "mode": self.mode, "counts": self.counts,
                "witness": None if self.witness is None else str(self.witness), "notes": self.notes}


# ---------------------------------------------------------------- enumeration helpers


def _digits(count: int, q: int, n: int) -> np.ndarray:
    """Rows of n base-q digits for 0 .. count-1, least significant first."""
    r = np.arange(count, dtype=np.int64)
    out = np.empty((len(r), n), dtype=np.uint64)
    for i in range(n):
        out[:, i] = r % q
        r //= q
    return out


def _key_slots(plan: KeyPlan, block: int, users: Iterable[int] | None = None):
    """(group, member) pairs whose sub-keys are enumerated, with their symbol offsets."""
    keep = None if users is None else set(users)
    slots = []
    for gi, g in enumerate(plan.groups):
        for m in g:
            if keep is None or m in keep:
                slots.append((gi, m))
    return slots, len(slots) * block


def _material(plan: KeyPlan, slots, block: int, key_digits: np.ndarray, tiles: int) -> KeyMaterial:
    """Key material whose block axis runs over (tile, realization, symbol)."""
    field = plan.field
    R = key_digits.shape[0]
    n = tiles * R * block
    subkeys = {gi: {m: field.zeros(n) for m in g} for gi, g in enumerate(plan.groups)}
    for s, (gi, m) in enumerate(slots):
        vals = key_digits[:, s * block:(s + 1) * block]  # (R, block)
        subkeys[gi][m] = np.tile(vals.reshape(-1), tiles).astype(field.dtype)
    return KeyMaterial(plan, n, subkeys)


def _inputs(plan: KeyPlan, w_rows: np.ndarray, R: int, block: int, L: int) -> dict[int, InputVector]:
    """w_rows has shape (n_w, K, L'); each input is repeated across the R key realizations."""
    U = plan.U
    out = {}
    for k in range(1, plan.K + 1):
        w = w_rows[:, k - 1, :].reshape(-1, U, block)  # (n_w, U, block)
        big = np.repeat(w[:, None, :, :], R, axis=1)  # (n_w, R, U, block)
        blocks = big.transpose(2, 0, 1, 3).reshape(U, -1)
        out[k] = InputVector(k, blocks.reshape(-1).astype(plan.field.dtype), L)
    return out


def _transcripts(cfg: AuditConfig, w_rows: np.ndarray, key_digits: np.ndarray, slots) -> np.ndarray:
    """Transcripts for every (input, key realization): shape (n_w, R, symbols)."""
    plan, block = cfg.plan, cfg.block
    n_w, R = len(w_rows), key_digits.shape[0]
    keys = _material(plan, slots, block, key_digits, n_w)
    inputs = _inputs(plan, w_rows, R, block, cfg.L)
    parts = []
    for k in range(1, plan.K + 1):
        x = round1_encode(k, inputs[k], keys.view(k), plan).blocks  # (U, n_w*R*block)
        parts.append(x.reshape(plan.U, n_w, R, block).transpose(1, 2, 0, 3).reshape(n_w, R, -1))
    for k in cfg.U1:
        y = round2_encode(k, keys.view(k), plan, cfg.U1).block
        parts.append(y.reshape(n_w, R, block))
    return np.concatenate(parts, axis=2)


def _signature(rows: np.ndarray) -> bytes:
    """Canonical encoding of the multiset of rows (a distribution as exact counts)."""
    uniq, counts = np.unique(rows, axis=0, return_counts=True)
    return uniq.astype("<u8").tobytes() + b"|" + counts.astype("<u8").tobytes()


def _signatures(tr: np.ndarray, q: int) -> list[bytes]:
    """One distribution signature per input; tr has shape (n_w, R, symbols).

    When a whole transcript fits in 63 bits it is packed into one integer
    and the sorted packed values serve as the signature.
    """
    bits = max((q - 1).bit_length(), 1)
    if tr.shape[2] * bits > 63:
        return [_signature(t) for t in tr]
    packed = np.zeros(tr.shape[:2], dtype=np.uint64)
    for c in range(tr.shape[2]):
        packed = (packed << np.uint64(bits)) | tr[:, :, c]
    packed.sort(axis=1)
    return [row.tobytes() for row in packed]


# ---------------------------------------------------------------- security


def security_audit_exhaustive(cfg: AuditConfig) -> Verdict:
    """Equal-sum inputs must induce identical transcript distributions.

    The transcript is every round-1 message (dropped users included) plus
    the round-2 messages of U1.  All inputs are compared when the space is
    within the ceiling; otherwise random equal-sum groups are drawn.
    """
    plan, q = cfg.plan, cfg.plan.q
    slots, n_key = _key_slots(plan, cfg.block)
    R = q**n_key
    n_inputs = q ** (plan.K * cfg.L)
    K, Lp = plan.K, cfg.padded
    if R > cfg.ceiling:
        raise AuditRefused(f"{R} key realizations exceed the ceiling {cfg.ceiling}")
    key_digits = _digits(R, q, n_key)
    sums_count = q**cfg.L
    if n_inputs * R <= cfg.ceiling:
        mode = "exhaustive"
        all_w = _input_space(q, K, Lp, cfg.L)
    else:
        need = sums_count * (PAIRS_PER_SUM + 1) * R
        if need > cfg.ceiling:
            raise AuditRefused(f"sampled audit needs {need} steps, above the ceiling {cfg.ceiling}")
        mode = f"sampled ({PAIRS_PER_SUM} pairs per sum value)"
        all_w = _equal_sum_samples(cfg, q, K, Lp)
    per_chunk = max(1, cfg.chunk // (R * cfg.block))
    first_by_sum: dict[bytes, tuple[bytes, np.ndarray]] = {}
    groups = defaultdict(int)
    for start in range(0, len(all_w), per_chunk):
        chunk = all_w[start:start + per_chunk]
        tr = _transcripts(cfg, chunk, key_digits, slots)
        for w, sig in zip(chunk, _signatures(tr, q)):
            total = (w[[k - 1 for k in cfg.U1]].astype(np.int64).sum(axis=0) % q).astype("<u8").tobytes()
            groups[total] += 1
            if total not in first_by_sum:
                first_by_sum[total] = (sig, w)
            elif first_by_sum[total][0] != sig:
                witness = (first_by_sum[total][1][:, :cfg.L].tolist(), w[:, :cfg.L].tolist())
                return Verdict("security", False, mode,
                               {"inputs_compared": start + len(chunk), "key_realizations": R}, witness)
    return Verdict("security", True, mode, {
        "inputs_compared": len(all_w), "sum_classes": len(groups),
        "key_realizations": R, "transcripts": len(all_w) * R, "U1": list(cfg.U1),
    })


def _input_space(q: int, K: int, Lp: int, L: int) -> np.ndarray:
    """All input tuples with zero padding, shape (q^(K*L), K, L')."""
    d = _digits(q ** (K * L), q, K * L).reshape(-1, K, L)
    out = np.zeros((len(d), K, Lp), dtype=np.uint64)
    out[:, :, :L] = d
    return out


def _equal_sum_samples(cfg: AuditConfig, q: int, K: int, Lp: int) -> np.ndarray:
    rng = derive_rng(cfg.seed, 0xA0)
    L = cfg.L
    rows = []
    last = cfg.U1[-1] - 1
    for target in _digits(q**L, q, L):
        for _ in range(PAIRS_PER_SUM + 1):
            w = np.zeros((K, Lp), dtype=np.uint64)
            w[:, :L] = rng.integers(0, q, size=(K, L), dtype=np.uint64)
            others = [k - 1 for k in cfg.U1 if k - 1 != last]
            partial = w[others, :L].astype(np.int64).sum(axis=0)
            w[last, :L] = ((target.astype(np.int64) - partial) % q).astype(np.uint64)
            rows.append(w)
    return np.stack(rows)


def first_round_leakage_check(cfg: AuditConfig) -> Verdict:
    """For each user and each fixed input, X_k is uniform over that user's own sub-keys."""
    plan, q = cfg.plan, cfg.plan.q
    Lp, L = cfg.padded, cfg.L
    counts = {}
    for k in range(1, plan.K + 1):
        slots, n_key = _key_slots(plan, cfg.block, users=[k])
        R = q**n_key
        n_w = q**L
        if R * n_w > cfg.ceiling:
            raise AuditRefused(f"user {k}: {R * n_w} steps exceed the ceiling {cfg.ceiling}")
        key_digits = _digits(R, q, n_key)
        w_rows = np.zeros((n_w, plan.K, Lp), dtype=np.uint64)
        w_rows[:, k - 1, :L] = _digits(n_w, q, L)
        keys = _material(plan, slots, cfg.block, key_digits, n_w)
        inputs = _inputs(plan, w_rows, R, cfg.block, L)
        x = round1_encode(k, inputs[k], keys.view(k), plan).blocks
        x = x.reshape(plan.U, n_w, R, cfg.block).transpose(1, 2, 0, 3).reshape(n_w, R, -1)
        for wi in range(n_w):
            _, c = np.unique(x[wi], axis=0, return_counts=True)
            if len(c) != q**Lp or c.min() != c.max():
                witness = {"user": k, "input": w_rows[wi, k - 1, :L].tolist(), "distinct_values": len(c),
                           "min_count": int(c.min()), "max_count": int(c.max())}
                return Verdict("first-round leakage", False, "exhaustive", {"key_realizations": R}, witness)
        counts[f"user {k}"] = f"{q**Lp} values x {R // q**Lp} each, for all {n_w} inputs"
    return Verdict("first-round leakage", True, "exhaustive", counts)


def transcript_entropy_check(cfg: AuditConfig, fixed_keys: str | None = None) -> Verdict:
    """Support of (Y_k : k in U1) over key randomness, and its dependence on F only.

    With ``fixed_keys="zero"`` the keys are not random and the support collapses.
    """
    plan, q = cfg.plan, cfg.plan.q
    slots, n_key = _key_slots(plan, cfg.block)
    if fixed_keys == "zero":
        key_digits = np.zeros((1, n_key), dtype=np.uint64)
    elif fixed_keys is None:
        if q**n_key > cfg.ceiling:
            raise AuditRefused(f"{q**n_key} key realizations exceed the ceiling {cfg.ceiling}")
        key_digits = _digits(q**n_key, q, n_key)
    else:
        raise ValueError(f"unknown fixed_keys mode {fixed_keys!r}")
    R = key_digits.shape[0]
    keys = _material(plan, slots, cfg.block, key_digits, 1)
    ys = [round2_encode(k, keys.view(k), plan, cfg.U1).block.reshape(R, cfg.block) for k in cfg.U1]
    y = np.concatenate(ys, axis=1)
    f = mask_aggregate(plan, keys, cfg.U1).reshape(plan.U, R, cfg.block).transpose(1, 0, 2).reshape(R, -1)
    support = len(np.unique(y, axis=0))
    f_support = len(np.unique(f, axis=0))
    joint = len(np.unique(np.concatenate([f, y], axis=1), axis=0))
    functional = joint == f_support
    expected = q**cfg.padded
    passed = functional and support == expected
    return Verdict("round-2 support", passed, "fixed keys" if fixed_keys else "exhaustive", {
        "support": support, "expected": expected, "mask_support": f_support,
        "determined_by_mask": functional, "key_realizations": R,
    })


# ---------------------------------------------------------------- plans for audits


def audit_plan(K: int, U: int, S: int, q: int, seed: int = 0, max_attempts: int = 256) -> tuple[KeyPlan, list[str]]:
    """Build a small-field plan; over F_2 a failed build escalates to F_3."""
    notes = []
    try:
        return build_key_plan(SystemParams(K, U, S, q), seed=seed, max_attempts=max_attempts), notes
    except ConstructionFailed:
        if q != 2:
            raise
        notes.append(f"no valid plan over F_2 in {max_attempts} attempts; escalated to q=3")
        return build_key_plan(SystemParams(K, U, S, 3), seed=seed, max_attempts=max_attempts), notes


def corrupt_plan(plan: KeyPlan, seed: int) -> tuple[KeyPlan, str]:
    """Break one user's mask rank by making all its group vectors parallel."""
    rng = derive_rng(seed, 0xC0)
    users = [k for k in range(1, plan.K + 1) if len(plan.groups_of(k)) >= 2]
    if not users:
        raise ValueError("no user holds two groups; nothing to corrupt")
    k = int(rng.choice(users))
    mine = plan.groups_of(k)
    base = int(rng.choice(mine))
    vecs = [list(a) for a in plan.a_vectors]
    for g in mine:
        if g != base:
            c = int(rng.integers(1, plan.q))
            vecs[g] = [c * x % plan.q for x in plan.a_vectors[base]]
    return plan.with_vectors(vecs), f"user {k}: every group vector made parallel to that of {plan.groups[base]}"


# ---------------------------------------------------------------- converse bounds


@dataclass(frozen=True)
class RateBound:
    r1: Fraction | None
    r2: Fraction | None
    feasible: bool
    status: str

    def text(self) -> str:
        if not self.feasible:
            return "infeasible: secure aggregation is impossible for these parameters"
        return f"R1 >= {self.r1}, R2 >= {self.r2} ({self.status})"


def rate_lower_bounds(K: int, U: int, S: int) -> RateBound:
    if K < 2 or not 1 <= U <= K - 1:
        raise ValueError(f"need 1 <= U <= K-1, got K={K}, U={U}")
    if not 1 <= S <= K:
        raise ValueError(f"need 1 <= S <= K, got S={S}")
    if S > K - U:
        return RateBound(Fraction(1), Fraction(1, U), True, "optimal rates achievable")
    if S == 1:
        return RateBound(None, None, False, "infeasible")
    return RateBound(1 + Fraction(1, comb(K - 1, S - 1) - 1), Fraction(1, U), True,
                     "feasible only at a higher first-round rate")


def run_audit_suite(plan: KeyPlan, L: int, U1_sets: Iterable[Iterable[int]] | None = None,
                    ceiling: int = DEFAULT_CEILING) -> list[Verdict]:
    """Security for every listed U1 (default: all with |U1| >= U), then leakage and support."""
    if U1_sets is None:
        from itertools import combinations
        users = range(1, plan.K + 1)
        U1_sets = [c for n in range(plan.U, plan.K + 1) for c in combinations(users, n)]
    out = []
    for U1 in U1_sets:
        v = security_audit_exhaustive(AuditConfig(plan, L, tuple(U1), ceiling))
        v.check = f"security U1={list(U1)}"
        out.append(v)
    out.append(first_round_leakage_check(AuditConfig(plan, L, None, ceiling)))
    out.append(transcript_entropy_check(AuditConfig(plan, L, None, ceiling)))
    return out
