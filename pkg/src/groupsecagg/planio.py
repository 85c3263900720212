"""Text serialization of key plans.

Format (UTF-8, one record per line, user indices 1-based, coefficients as
decimal canonical residues)::

    GSA-PLAN v1 K=6 U=4 S=3 q=2305843009213693951 seed=0
    G {1,2,3} a=[1,0,0,0]
    ...
    S 1=[...]
    ...

Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import re
from pathlib import Path

from .keyplan import ConstraintReport, KeyPlan, regime_for, verify_constraints, DEFAULT_SUBSET_BUDGET

_HEADER = re.compile(r"^GSA-PLAN v1 K=(\d+) U=(\d+) S=(\d+) q=(\d+) seed=(?:0x)?([0-9a-fA-F]+)$")
_GROUP = re.compile(r"^G \{([0-9,]*)\} a=\[([0-9,]*)\]$")
_ROW = re.compile(r"^S (\d+)=\[([0-9,]*)\]$")


class PlanParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConstraintViolation(ValueError):
    def __init__(self, report: ConstraintReport):
        super().__init__("plan fails its constraints:\n" + report.summary())
        self.report = report


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",")] if text else []


def dumps_plan(plan: KeyPlan) -> str:
    lines = [f"GSA-PLAN v1 K={plan.K} U={plan.U} S={plan.S} q={plan.q} seed={plan.seed:x}"]
    for g, a in zip(plan.groups, plan.a_vectors):
        lines.append(f"G {{{','.join(map(str, g))}}} a=[{','.join(map(str, a))}]")
    for k, s in enumerate(plan.s_rows, start=1):
        lines.append(f"S {k}=[{','.join(map(str, s))}]")
    return "\n".join(lines) + "\n"


def loads_plan(text: str) -> KeyPlan:
    """Parse a plan without checking its constraints."""
    header = None
    groups, vecs, rows = [], [], {}
    last_line = 0
    for n, raw in enumerate(text.splitlines(), start=1):
        last_line = n
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if header is None:
            m = _HEADER.match(line)
            if not m:
                raise PlanParseError(n, "expected 'GSA-PLAN v1 K=.. U=.. S=.. q=.. seed=..' header")
            header = [int(m.group(i)) for i in range(1, 5)] + [int(m.group(5), 16)]
            K, U, S, q, seed = header
            continue
        if m := _GROUP.match(line):
            g, a = _ints(m.group(1)), _ints(m.group(2))
            if len(a) != U:
                raise PlanParseError(n, f"coefficient vector has {len(a)} entries, expected {U}")
            if not g or g != sorted(set(g)) or g[0] < 1 or g[-1] > K:
                raise PlanParseError(n, f"group members must be increasing indices in [1,{K}]")
            if any(c >= q for c in a):
                raise PlanParseError(n, f"coefficient not a canonical residue mod {q}")
            groups.append(tuple(g))
            vecs.append(tuple(a))
        elif m := _ROW.match(line):
            k, s = int(m.group(1)), _ints(m.group(2))
            if not 1 <= k <= K or k in rows:
                raise PlanParseError(n, f"bad or repeated user index {k}")
            if len(s) != U or any(c >= q for c in s):
                raise PlanParseError(n, f"decoding row must hold {U} canonical residues")
            rows[k] = tuple(s)
        else:
            raise PlanParseError(n, f"unrecognized line {line[:40]!r}")
    if header is None:
        raise PlanParseError(last_line + 1, "missing header")
    if len(rows) != K:
        raise PlanParseError(last_line + 1, f"expected {K} decoding rows, found {len(rows)} (truncated file?)")
    try:
        return KeyPlan(K, U, S, q, regime_for(K, U), tuple(groups), tuple(vecs),
                       tuple(rows[k] for k in range(1, K + 1)), seed)
    except ValueError as exc:
        raise PlanParseError(last_line, str(exc)) from exc


def save_plan(plan: KeyPlan, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps_plan(plan), encoding="utf-8")
    return path


def load_plan(path: str | Path, check: bool = True, subset_budget: int = DEFAULT_SUBSET_BUDGET) -> KeyPlan:
    """Read a plan; with ``check`` a constraint failure raises :class:`ConstraintViolation`."""
    plan = loads_plan(Path(path).read_text(encoding="utf-8"))
    if check:
        report = verify_constraints(plan, subset_budget)
        if not report.passed:
            raise ConstraintViolation(report)
    return plan
