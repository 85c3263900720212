"""Simulated protocol runs: dropout schedules, rate measurement, sweeps."""

from __future__ import annotations

import csv
import hashlib
import itertools
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .keyplan import KeyPlan, SystemParams, build_key_plan, key_census
from .protocol import (
    InsufficientSurvivors,
    derive_rng,
    generate_keys,
    oracle_sum,
    random_inputs,
    round1_encode,
    round2_encode,
    server_decode,
)
from .field import to_le_bytes

_SCHEDULE_STREAM = 0x44
MAX_EXHAUSTIVE_K = 8

CSV_HEADER = ["K", "U", "S", "q", "L", "regime", "key_symbols_total", "r1_symbols", "r2_symbols",
              "plan_build_ms", "run_ms", "success_rate"]


@dataclass(frozen=True)
class DropoutSchedule:
    """Either explicit survivor sets or independent per-user drop probabilities."""

    mode: str = "explicit"
    U1: tuple[int, ...] | None = None
    U2: tuple[int, ...] | None = None
    p1: float = 0.0
    p2: float = 0.0
    seed: int = 0
    max_retries: int = 1000

    @classmethod
    def explicit(cls, U1: Iterable[int] | None = None, U2: Iterable[int] | None = None) -> "DropoutSchedule":
        return cls("explicit", tuple(sorted(U1)) if U1 is not None else None,
                   tuple(sorted(U2)) if U2 is not None else None)

    @classmethod
    def random(cls, p1: float, p2: float, seed: int = 0, max_retries: int = 1000) -> "DropoutSchedule":
        if not (0 <= p1 <= 1 and 0 <= p2 <= 1):
            raise ValueError("drop probabilities must lie in [0, 1]")
        return cls("random", p1=p1, p2=p2, seed=seed, max_retries=max_retries)

    def resolve(self, K: int, U: int) -> tuple[list[int], list[int]]:
        everyone = list(range(1, K + 1))
        if self.mode == "explicit":
            U1 = list(self.U1) if self.U1 is not None else everyone
            U2 = list(self.U2) if self.U2 is not None else U1
            if not set(U1) <= set(everyone) or not set(U2) <= set(U1):
                raise ValueError(f"need U2 within U1 within [1,{K}], got U1={U1}, U2={U2}")
            if len(U2) < U:
                raise InsufficientSurvivors(f"schedule leaves {len(U2)} round-2 users, need {U}")
            return sorted(U1), sorted(U2)
        if self.mode != "random":
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        rng = derive_rng(self.seed, _SCHEDULE_STREAM)
        for _ in range(self.max_retries):
            U1 = [k for k in everyone if rng.random() >= self.p1]
            U2 = [k for k in U1 if rng.random() >= self.p2]
            if len(U2) >= U:
                return U1, U2
        raise InsufficientSurvivors(f"no valid schedule in {self.max_retries} draws (p1={self.p1}, p2={self.p2})")


@dataclass
class SimOutcome:
    params: SystemParams
    regime: str
    U1: list[int]
    U2: list[int]
    success: bool
    checksum: str
    r1: Fraction
    r2: Fraction
    symbols: dict[str, int]
    times_ms: dict[str, float] = dc_field(default_factory=dict)
    decoded: np.ndarray | None = dc_field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "K": self.params.K, "U": self.params.U, "S": self.params.S, "q": self.params.q, "L": self.params.L,
            "regime": self.regime, "U1": self.U1, "U2": self.U2, "success": self.success,
            "checksum": self.checksum, "R1": str(self.r1), "R2": str(self.r2),
            "symbols": self.symbols, "times_ms": self.times_ms,
        }


@lru_cache(maxsize=64)
def cached_plan(K: int, U: int, S: int, q: int, seed: int) -> KeyPlan:
    return build_key_plan(SystemParams(K, U, S, q, 1), seed=seed)


def checksum(values) -> str:
    return hashlib.sha256(to_le_bytes(values)).hexdigest()[:16]


@contextmanager
def _timer(store: dict, name: str):
    t = time.perf_counter()
    yield
    store[name] = (time.perf_counter() - t) * 1000


def run_once(p: SystemParams, sched: DropoutSchedule | None = None, seed: int = 0,
             plan: KeyPlan | None = None, rows: str = "lowest") -> SimOutcome:
    """One full run with fresh keys and inputs drawn from ``seed``.

    Without ``plan`` a plan is built (and cached) from the same seed.
    """
    sched = sched or DropoutSchedule.explicit()
    times: dict[str, float] = {}
    with _timer(times, "plan"):
        plan = plan or cached_plan(p.K, p.U, p.S, p.q, seed)
    U1, U2 = sched.resolve(p.K, p.U)
    with _timer(times, "keys"):
        keys = generate_keys(plan, seed, p.L)
        inputs = random_inputs(plan, seed, p.L)
        views = {k: keys.view(k) for k in range(1, p.K + 1)}
    with _timer(times, "round1"):
        msgs1 = {k: round1_encode(k, inputs[k], views[k], plan) for k in U1}
    with _timer(times, "round2"):
        msgs2 = {k: round2_encode(k, views[k], plan, U1) for k in U2}
    with _timer(times, "decode"):
        decoded = server_decode(plan, U1, msgs1, U2, msgs2, p.L, rows=rows, rng=derive_rng(seed, 0x52))
    expect = oracle_sum(plan, inputs, U1)
    success = bool(np.array_equal(decoded, expect))
    padded = p.padded_length
    r1_max = max(m.symbol_count for m in msgs1.values())
    r2_max = max(m.symbol_count for m in msgs2.values())
    return SimOutcome(
        params=p, regime=plan.regime.value, U1=U1, U2=U2, success=success, checksum=checksum(decoded),
        r1=Fraction(r1_max, padded), r2=Fraction(r2_max, padded),
        symbols={"round1_per_user": r1_max, "round2_per_user": r2_max,
                 "round1_total": sum(m.symbol_count for m in msgs1.values()),
                 "round2_total": sum(m.symbol_count for m in msgs2.values()),
                 "keys_total": keys.symbol_count()},
        times_ms=times, decoded=decoded,
    )


@dataclass
class DropoutReport:
    params: SystemParams
    cases: int
    passed: bool
    first_failure: tuple[list[int], list[int]] | None = None

    def summary(self) -> str:
        p = self.params
        head = f"(K,U,S)=({p.K},{p.U},{p.S}) L={p.L}: {self.cases} survivor patterns"
        if self.passed:
            return head + ", all decoded correctly"
        return head + f", FAILED at U1={self.first_failure[0]} U2={self.first_failure[1]}"


def valid_dropout_pairs(K: int, U: int):
    users = range(1, K + 1)
    for n1 in range(U, K + 1):
        for U1 in itertools.combinations(users, n1):
            for n2 in range(U, n1 + 1):
                for U2 in itertools.combinations(U1, n2):
                    yield list(U1), list(U2)


def exhaustive_dropout_check(p: SystemParams, seed: int = 0, plan: KeyPlan | None = None) -> DropoutReport:
    """Run every (U1, U2) with U2 within U1 and |U2| >= U, fresh randomness per case."""
    if p.K > MAX_EXHAUSTIVE_K:
        raise ValueError(f"exhaustive dropout enumeration is limited to K <= {MAX_EXHAUSTIVE_K}; sample instead")
    plan = plan or cached_plan(p.K, p.U, p.S, p.q, seed)
    cases = 0
    for U1, U2 in valid_dropout_pairs(p.K, p.U):
        out = run_once(p, DropoutSchedule.explicit(U1, U2), seed=seed * 1_000_003 + cases, plan=plan)
        cases += 1
        if not out.success:
            return DropoutReport(p, cases, False, (U1, U2))
    return DropoutReport(p, cases, True)


def benchmark_grid(q: int | None = None) -> list[SystemParams]:
    """K in {5,10,15,20}, U in {floor((K+1)/2), K-1}, L in {1e5, 2e5, 3e5}."""
    grid = []
    for K in (5, 10, 15, 20):
        for U in sorted({(K + 1) // 2, K - 1}):
            for L in (100_000, 200_000, 300_000):
                kw = {"q": q} if q else {}
                grid.append(SystemParams(K, U, K - U + 1, L=L, **kw))
    return grid


def bench_sweep(grid: Sequence[SystemParams], trials: int = 1, out: str | Path = "-", seed: int = 0,
                timing: bool = True) -> list[dict]:
    """Run each grid cell ``trials`` times and write one CSV row per cell.

    Timing columns are informational only; with ``timing=False`` they are 0
    so that output is reproducible byte for byte.
    """
    rows = []
    for p in grid:
        t0 = time.perf_counter()
        plan = cached_plan(p.K, p.U, p.S, p.q, seed)
        build_ms = (time.perf_counter() - t0) * 1000
        wins, run_ms = 0, 0.0
        for t in range(trials):
            t1 = time.perf_counter()
            res = run_once(p, DropoutSchedule.explicit(), seed=seed, plan=plan) if t == 0 else \
                run_once(p, DropoutSchedule.random(0.1, 0.1, seed=seed + t), seed=seed + t, plan=plan)
            run_ms += (time.perf_counter() - t1) * 1000
            wins += res.success
        _, _, key_total = key_census(plan, p.L)
        rows.append({
            "K": p.K, "U": p.U, "S": p.S, "q": p.q, "L": p.L, "regime": plan.regime.value,
            "key_symbols_total": key_total, "r1_symbols": p.padded_length, "r2_symbols": p.block_length,
            "plan_build_ms": f"{build_ms:.1f}" if timing else "0",
            "run_ms": f"{run_ms / max(trials, 1):.1f}" if timing else "0",
            "success_rate": f"{wins / max(trials, 1):.3f}",
        })
    if out is not None:
        if str(out) == "-":
            _write_csv(sys.stdout, rows)
        else:
            with open(out, "w", newline="") as fh:
                _write_csv(fh, rows)
    return rows


def _write_csv(fh, rows):
    w = csv.DictWriter(fh, fieldnames=CSV_HEADER, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
