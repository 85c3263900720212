"""Key-group designs: which groups share keys, their coefficient vectors,
and the per-user decoding rows.

A plan is valid when, for every user k,

* the coefficient vectors of the groups containing k span F_q^U (mask rank),
* the vectors of groups not containing k span exactly a hyperplane, whose
  left null vector is k's decoding row s_k (complement rank), and
* every U of the decoding rows are linearly independent (decodability).

Three constructions cover every supported (K, U): cyclic groups with random
coefficients when U <= K-U+1, all pairs with unit-vector differences when
U = K-1, and a three-family zero-forcing design in between.
"""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field as dc_field, replace
from math import comb
from typing import Sequence

import numpy as np

from .field import MERSENNE61, PrimeField
from .linalg import FMatrix, batch_full_rank, left_null_space, rank, vec_dot

log = logging.getLogger(__name__)

DEFAULT_MAX_ATTEMPTS = 32
DEFAULT_SUBSET_BUDGET = 10**5

Group = tuple[int, ...]


class UnsupportedRegime(ValueError):
    """No secure construction exists or is provided for these parameters."""


class ConstructionFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class SystemParams:
    K: int
    U: int
    S: int
    q: int = MERSENNE61
    L: int = 100_000

    def __post_init__(self) -> None:
        if self.K < 2:
            raise ValueError(f"need at least 2 users, got K={self.K}")
        if not 1 <= self.U <= self.K - 1:
            raise ValueError(f"survival threshold must satisfy 1 <= U <= K-1, got U={self.U}, K={self.K}")
        if not 1 <= self.S <= self.K:
            raise ValueError(f"group size must satisfy 1 <= S <= K, got S={self.S}")
        if self.L < 1:
            raise ValueError(f"input length must be positive, got L={self.L}")
        PrimeField(self.q)

    @property
    def padded_length(self) -> int:
        return self.U * -(-self.L // self.U)

    @property
    def block_length(self) -> int:
        return self.padded_length // self.U

    @property
    def field(self) -> PrimeField:
        return PrimeField(self.q)


class Regime(str, enum.Enum):
    CYCLIC = "CyclicRandom"
    PAIRWISE = "PairwiseUnit"
    THREE_STEP = "ThreeStep"


def regime_for(K: int, U: int) -> Regime:
    if U <= K - U + 1:
        return Regime.CYCLIC
    if U == K - 1:
        return Regime.PAIRWISE
    return Regime.THREE_STEP


def effective_params(p: SystemParams) -> SystemParams:
    """Clamp S to K-U+1; refuse S <= K-U, where no secure plan is provided."""
    s_eff = p.K - p.U + 1
    if p.S <= p.K - p.U:
        if p.S == 1:
            reason = "secure aggregation is impossible with individual keys (S=1 <= K-U)"
        else:
            reason = "the optimal rates are unattainable for 2 <= S <= K-U and no construction is provided"
        raise UnsupportedRegime(f"(K,U,S)=({p.K},{p.U},{p.S}): {reason}; need S >= {s_eff}")
    if p.S > s_eff:
        return replace(p, S=s_eff)
    return p


# ---------------------------------------------------------------- set families


def cyclic_sets(K: int, U: int) -> list[Group]:
    """C(i) = {i, i+1, ..., i+K-U} with indices wrapping inside [1, K].

    When U = 1 every set is all of [K]; the K copies are kept so that each
    user still generates one group key.
    """
    if U > K - U + 1:
        raise ValueError("cyclic sets need U <= K-U+1")
    return [tuple(sorted((i - 1 + t) % K + 1 for t in range(K - U + 1))) for i in range(1, K + 1)]


def g_families(K: int, U: int) -> tuple[list[Group], list[Group], list[Group]]:
    """The three group families of the zero-forcing design, each in canonical order."""
    if not (U > K - U + 1 and U < K - 1):
        raise ValueError(f"three-family design needs K-U+1 < U < K-1, got K={K}, U={U}")
    d = K - U
    head = list(range(1, d + 1))
    middle = list(range(d + 1, 2 * d + 1))
    tail = list(range(2 * d + 1, K + 1))
    g1 = [tuple(head + [j]) for j in range(d + 1, K + 1)]
    g2 = [tuple(sorted(middle + [j])) for j in head + tail]
    core = middle[:-1]
    g3 = [
        tuple(sorted(core + [i, j]))
        for i, j in itertools.combinations(head + tail, 2)
        if j > 2 * d
    ]
    return g1, g2, g3


def all_pairs(K: int) -> list[Group]:
    return list(itertools.combinations(range(1, K + 1), 2))


# ---------------------------------------------------------------- plan


@dataclass(frozen=True)
class KeyPlan:
    K: int
    U: int
    S: int
    q: int
    regime: Regime
    groups: tuple[Group, ...]
    a_vectors: tuple[tuple[int, ...], ...]
    s_rows: tuple[tuple[int, ...], ...]
    seed: int = 0
    attempt: int = dc_field(default=0, compare=False)

    def __post_init__(self) -> None:
        if len(self.groups) != len(self.a_vectors):
            raise ValueError("one coefficient vector per group required")
        if len(self.s_rows) != self.K:
            raise ValueError("one decoding row per user required")
        if any(len(a) != self.U for a in self.a_vectors) or any(len(s) != self.U for s in self.s_rows):
            raise ValueError(f"coefficient vectors must have length U={self.U}")
        for g in self.groups:
            if list(g) != sorted(set(g)) or not all(1 <= m <= self.K for m in g):
                raise ValueError(f"malformed group {g}")

    @property
    def field(self) -> PrimeField:
        return PrimeField(self.q)

    @property
    def S_eff(self) -> int:
        return self.K - self.U + 1

    def params(self, L: int) -> SystemParams:
        return SystemParams(self.K, self.U, self.S, self.q, L)

    def groups_of(self, k: int) -> list[int]:
        return [i for i, g in enumerate(self.groups) if k in g]

    def mask_matrix(self, k: int) -> FMatrix:
        return FMatrix.from_columns(self.field, [self.a_vectors[i] for i in self.groups_of(k)], self.U)

    def complement_matrix(self, k: int) -> FMatrix:
        cols = [a for g, a in zip(self.groups, self.a_vectors) if k not in g]
        return FMatrix.from_columns(self.field, cols, self.U)

    def s(self, k: int) -> tuple[int, ...]:
        return self.s_rows[k - 1]

    def realized_b(self) -> dict[Group, tuple[int, ...]]:
        """Random coefficients of the second family, read back from its vectors.

        Only meaningful for the three-family design; empty otherwise.
        """
        if self.regime is not Regime.THREE_STEP:
            return {}
        d = self.K - self.U
        _, g2, _ = g_families(self.K, self.U)
        out = {}
        lookup = dict(zip(self.groups, self.a_vectors))
        for g in g2:
            a = lookup[g]
            j = next(m for m in g if m <= d or m > 2 * d)
            out[g] = tuple(a[:d]) + ((a[j - d - 1],) if j > 2 * d else ())
        return out

    def with_vectors(self, a_vectors: Sequence[Sequence[int]]) -> "KeyPlan":
        """Same groups, new coefficients, decoding rows recomputed canonically."""
        a = tuple(tuple(int(x) % self.q for x in v) for v in a_vectors)
        s = canonical_s_rows(self.field, self.K, self.U, self.groups, a)
        return replace(self, a_vectors=a, s_rows=s)


def canonical_s_rows(field: PrimeField, K: int, U: int, groups, a_vectors) -> tuple[tuple[int, ...], ...]:
    """First canonical left-null vector of each user's complement matrix (zero if none)."""
    rows = []
    for k in range(1, K + 1):
        cols = [a for g, a in zip(groups, a_vectors) if k not in g]
        basis = left_null_space(FMatrix.from_columns(field, cols, U))
        rows.append(tuple(basis[0]) if basis else (0,) * U)
    return tuple(rows)


def _unit(U: int, i: int) -> list[int]:
    v = [0] * U
    v[i - 1] = 1
    return v


def _cyclic_vectors(field: PrimeField, K: int, U: int, rng) -> tuple[list[Group], list[list[int]]]:
    groups = cyclic_sets(K, U)
    return groups, [[int(x) for x in field.random_vector(rng, U)] for _ in groups]


def _pairwise_vectors(field: PrimeField, K: int, U: int) -> tuple[list[Group], list[list[int]]]:
    q = field.modulus
    groups = all_pairs(K)
    first = {j: _unit(U, j - 1) for j in range(2, K + 1)}
    vecs = []
    for i, j in groups:
        if i == 1:
            vecs.append(first[j])
        else:
            vecs.append([(x - y) % q for x, y in zip(first[i], first[j])])
    return groups, vecs


def _three_step_vectors(field: PrimeField, K: int, U: int, rng) -> tuple[list[Group], list[list[int]]]:
    d = K - U
    _, g2, _ = g_families(K, U)
    b_of = {}
    for g in g2:
        j = next(m for m in g if m <= d or m > 2 * d)
        b_of[g] = [int(x) for x in field.random_vector(rng, d if j <= d else d + 1)]
    return three_step_from_b(field, K, U, b_of)


def three_step_from_b(field: PrimeField, K: int, U: int,
                      b_of: dict[Group, Sequence[int]]) -> tuple[list[Group], list[list[int]]]:
    """Three-family vectors for given second-family coefficients.

    ``b_of`` maps each second-family group to K-U coefficients (new member
    in the head) or K-U+1 (new member in the tail, last entry multiplies
    that member's own unit vector).
    """
    q = field.modulus
    d = K - U
    g1, g2, g3 = g_families(K, U)
    vecs: dict[Group, list[int]] = {}
    for j, g in zip(range(d + 1, K + 1), g1):
        vecs[g] = _unit(U, j - d)
    lead: dict[int, int] = {}
    for g in g2:
        j = next(m for m in g if m <= d or m > 2 * d)
        b = [int(x) % q for x in b_of[g]]
        if len(b) != (d if j <= d else d + 1):
            raise ValueError(f"wrong coefficient count for group {g}")
        a = b[:d] + [0] * (U - d)
        if j > 2 * d:
            a[j - d - 1] = b[d]
        lead[j] = b[d - 1]
        vecs[g] = a
    middle = set(range(d + 1, 2 * d + 1))
    for g in g3:
        i, j = sorted(set(g) - middle)
        ai = vecs[tuple(sorted(middle | {i}))]
        aj = vecs[tuple(sorted(middle | {j}))]
        # cancel the last head coordinate, which neither new member may carry
        ci, cj = lead[j], lead[i]
        vecs[g] = [(ci * x - cj * y) % q for x, y in zip(ai, aj)]
    groups = g1 + g2 + g3
    return groups, [vecs[g] for g in groups]


def build_key_plan(p: SystemParams, seed: int = 0, max_attempts: int = DEFAULT_MAX_ATTEMPTS,
                   subset_budget: int = DEFAULT_SUBSET_BUDGET) -> KeyPlan:
    """Construct and verify a plan; random choices are redrawn on failure.

    Attempt ``t`` draws from a generator seeded with ``(seed, t)``, so a plan
    is reproducible from its seed alone.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    original_s = p.S
    p = effective_params(p)
    field = p.field
    regime = regime_for(p.K, p.U)
    last = None
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        if regime is Regime.CYCLIC:
            groups, vecs = _cyclic_vectors(field, p.K, p.U, rng)
        elif regime is Regime.PAIRWISE:
            groups, vecs = _pairwise_vectors(field, p.K, p.U)
        else:
            groups, vecs = _three_step_vectors(field, p.K, p.U, rng)
        a = tuple(tuple(v) for v in vecs)
        s = canonical_s_rows(field, p.K, p.U, groups, a)
        plan = KeyPlan(p.K, p.U, original_s, p.q, regime, tuple(groups), a, s, seed, attempt)
        last = verify_constraints(plan, subset_budget)
        if last.passed:
            if attempt:
                log.info("plan (K=%d,U=%d,q=%d) needed %d retries", p.K, p.U, p.q, attempt)
            return plan
        if regime is Regime.PAIRWISE:
            break
    raise ConstructionFailed(
        f"no valid plan for (K,U,S,q)=({p.K},{p.U},{p.S},{p.q}) after {max_attempts} attempts; last: {last.summary()}"
    )


# ---------------------------------------------------------------- verification


@dataclass
class ConstraintReport:
    mask_rank_failures: list[int]
    complement_failures: list[int]
    decodability_witness: tuple[int, ...] | None
    mode: str
    subsets_checked: int

    @property
    def mask_rank_ok(self) -> bool:
        return not self.mask_rank_failures

    @property
    def complement_ok(self) -> bool:
        return not self.complement_failures

    @property
    def decodability_ok(self) -> bool:
        return self.decodability_witness is None

    @property
    def passed(self) -> bool:
        return self.mask_rank_ok and self.complement_ok and self.decodability_ok

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "mask_rank": {"ok": self.mask_rank_ok, "failing_users": self.mask_rank_failures},
            "complement_rank": {"ok": self.complement_ok, "failing_users": self.complement_failures},
            "decodability": {
                "ok": self.decodability_ok,
                "witness": list(self.decodability_witness) if self.decodability_witness else None,
                "mode": self.mode,
                "subsets_checked": self.subsets_checked,
            },
        }

    def summary(self) -> str:
        def fam(ok, detail):
            return "pass" if ok else f"FAIL {detail}"

        lines = [
            f"mask rank:        {fam(self.mask_rank_ok, f'users {self.mask_rank_failures}')}",
            f"complement rank:  {fam(self.complement_ok, f'users {self.complement_failures}')}",
            f"decodability:     {fam(self.decodability_ok, f'subset {self.decodability_witness}')}"
            f" ({self.mode}, {self.subsets_checked} subsets)",
            f"overall:          {'PASS' if self.passed else 'FAIL'}",
        ]
        return "\n".join(lines)


def _windows(K: int, U: int) -> list[tuple[int, ...]]:
    return [tuple(sorted((i + t) % K for t in range(U))) for i in range(K)]


def verify_constraints(plan: KeyPlan, subset_budget: int = DEFAULT_SUBSET_BUDGET) -> ConstraintReport:
    """Check the three constraint families against the plan's stored rows."""
    field, K, U = plan.field, plan.K, plan.U
    mask_fail, comp_fail = [], []
    for k in range(1, K + 1):
        if rank(plan.mask_matrix(k)) != U:
            mask_fail.append(k)
        comp = plan.complement_matrix(k)
        s = plan.s(k)
        annihilates = all(vec_dot(field, s, comp.column(j)) == 0 for j in range(comp.cols))
        if rank(comp) != U - 1 or not any(s) or not annihilates:
            comp_fail.append(k)

    total = comb(K, U)
    if total <= subset_budget:
        mode = "exhaustive"
        subsets = np.array(list(itertools.combinations(range(K), U)), dtype=np.int64).reshape(-1, U)
    else:
        mode = "sampled"
        rng = np.random.default_rng([plan.seed, 0x5B5E7])
        sampled = np.sort(rng.random((subset_budget, K)).argsort(axis=1)[:, :U], axis=1)
        subsets = np.concatenate([sampled, np.array(_windows(K, U), dtype=np.int64)])
    s_arr = field.asarray([list(r) for r in plan.s_rows])
    witness = None
    chunk = 20_000
    for start in range(0, len(subsets), chunk):
        part = subsets[start:start + chunk]
        ok = batch_full_rank(field, s_arr[part])
        if not ok.all():
            witness = tuple(int(i) + 1 for i in part[int(np.argmin(ok))])
            break
    return ConstraintReport(mask_fail, comp_fail, witness, mode, len(subsets))


def key_census(plan: KeyPlan, L: int) -> tuple[int, int, int]:
    """(number of keys, symbols per key, total key symbols) for inputs of length L."""
    padded = plan.U * -(-L // plan.U)
    per_key = (plan.K - plan.U + 1) * padded // plan.U
    return len(plan.groups), per_key, len(plan.groups) * per_key


def expected_key_count(K: int, U: int) -> int:
    r = regime_for(K, U)
    if r is Regime.CYCLIC:
        return K
    if r is Regime.PAIRWISE:
        return K * (K - 1) // 2
    return U + K * (2 * U - K + 1) // 2


# ---------------------------------------------------------------- decodability witness


def _canonical_position(K: int, U: int, A: Sequence[int]) -> tuple[int, int]:
    d = K - U
    if not (U > d + 1 and U < K - 1):
        raise UnsupportedRegime(f"witness only exists for the three-family design, got K={K}, U={U}")
    A = sorted(set(A))
    if len(A) != U:
        raise ValueError(f"subset must have {U} users")
    x = sum(1 for a in A if d < a <= 2 * d)
    y = sum(1 for a in A if a > 2 * d)
    expect = list(range(1, U - x - y + 1)) + list(range(d + 1, d + x + 1)) + list(range(2 * d + 1, 2 * d + y + 1))
    if A != expect or U - x - y > d:
        raise UnsupportedRegime(f"subset {A} is not in canonical position (expected {expect})")
    return x, y


def _blocks(rows: list[list[list[int]]], widths: list[int], heights: list[int], q: int) -> list[list[int]]:
    out = []
    for block_row, h in zip(rows, heights):
        for r in range(h):
            line = []
            for blk, w in zip(block_row, widths):
                line.extend(blk[r] if blk else [0] * w)
            out.append([v % q for v in line])
    return out


def build_decodability_witness(K: int, U: int, A: Sequence[int], q: int = MERSENNE61) -> FMatrix:
    """A fixed U x U realization of the second-family coefficient matrix.

    Columns are the vectors of the second-family groups in canonical order.
    With this realization the decoding rows of the users in A are linearly
    independent, which certifies that the random design is decodable for A
    with high probability.  Only subsets in canonical position are handled.
    """
    x, y = _canonical_position(K, U, A)
    field = PrimeField(q)
    d = K - U
    g1, g2, t = d - x, x + y - 2 * U + K, 2 * U - K - y

    def eye(n):
        return [_unit(n, i + 1) for i in range(n)]

    def const(h, w, v):
        return [[v] * w for _ in range(h)]

    neg_eye = [[-e for e in r] for r in eye(t)]
    widths = [g1, t, g2, y, t]
    heights = [t, g2, g1, y, t]
    block_rows = [
        [None, eye(t), None, None, neg_eye],
        [None, None, eye(g2), None, None],
        [eye(g1), const(g1, t, -1), const(g1, g2, -1), const(g1, y, 1), const(g1, t, 1)],
        [None, None, None, eye(y), None],
        [None, None, None, None, eye(t)],
    ]
    return FMatrix.from_rows(field, _blocks(block_rows, widths, heights, q), cols=U)


def witness_s_rows(K: int, U: int, A: Sequence[int], q: int = MERSENNE61) -> list[list[int]]:
    """Decoding rows of the users in A under :func:`build_decodability_witness`, in user order."""
    x, y = _canonical_position(K, U, A)
    d = K - U
    g1, g2, t = d - x, x + y - 2 * U + K, 2 * U - K - y
    rows = []
    for k in range(1, g1 + 1):
        rows.append([1] * t + [1] * g2 + _unit(g1, k) + [-1] * y + [0] * t)
    for k in range(g1 + 1, U - x - y + 1):
        e = _unit(t, k - g1)
        rows.append(e + [0] * g2 + [0] * g1 + [0] * y + e)
    for i in list(range(1, x + 1)) + list(range(d + 1, d + y + 1)):
        rows.append(_unit(U, i))
    return [[v % q for v in r] for r in rows]
