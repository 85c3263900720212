"""Command-line entry point: ``groupsecagg <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 a check failed, 3 refused or
unsupported parameters.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import audit as audit_mod
from .field import MERSENNE61
from .keyplan import (
    DEFAULT_MAX_ATTEMPTS,
    DEFAULT_SUBSET_BUDGET,
    ConstructionFailed,
    KeyPlan,
    SystemParams,
    UnsupportedRegime,
    build_key_plan,
    key_census,
    verify_constraints,
)
from .planio import ConstraintViolation, PlanParseError, dumps_plan, load_plan, loads_plan
from .protocol import InsufficientSurvivors, generate_keys
from .simharness import (
    DropoutSchedule,
    benchmark_grid,
    bench_sweep,
    exhaustive_dropout_check,
    run_once,
)

EXIT_OK, EXIT_USAGE, EXIT_FAIL, EXIT_REFUSED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _params_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, help="number of users K")
    p.add_argument("--u", type=int, help="minimum number of survivors U")
    p.add_argument("--s", type=int, help="group size bound S (default K-U+1)")
    p.add_argument("--q", type=int, default=MERSENNE61, help="field prime (default 2^61-1)")
    p.add_argument("--l", "--L", dest="l", type=int, default=100_000, help="input length L (default 1e5)")
    p.add_argument("--seed", type=int, default=0)


def _budget_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--subset-budget", type=int, default=DEFAULT_SUBSET_BUDGET,
                   help="decodability subsets checked before sampling (default 1e5)")
    p.add_argument("--max-attempts", type=int, default=DEFAULT_MAX_ATTEMPTS,
                   help="construction redraws before giving up (default 32)")


def _params(a, L: int | None = None) -> SystemParams:
    if a.k is None or a.u is None:
        raise UsageError("--k and --u are required")
    S = a.s if a.s is not None else a.k - a.u + 1
    try:
        return SystemParams(a.k, a.u, S, a.q, L if L is not None else getattr(a, "l", 1))
    except UnsupportedRegime:
        raise
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _plan(a) -> KeyPlan:
    """Load ``--plan`` if given, otherwise build from the parameters and seed."""
    if getattr(a, "plan", None):
        plan = load_plan(a.plan, subset_budget=getattr(a, "subset_budget", DEFAULT_SUBSET_BUDGET))
        if a.k is not None and (a.k, a.u) != (plan.K, plan.U):
            raise UsageError(f"--k/--u disagree with plan file ({plan.K},{plan.U})")
        return plan
    return build_key_plan(_params(a), seed=a.seed,
                          max_attempts=getattr(a, "max_attempts", DEFAULT_MAX_ATTEMPTS),
                          subset_budget=getattr(a, "subset_budget", DEFAULT_SUBSET_BUDGET))


def _emit(text: str, out: str | None) -> None:
    if out and out != "-":
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- subcommands


def cmd_plan(a) -> int:
    plan = _plan(a)
    _emit(dumps_plan(plan), a.out)
    if a.out and a.out != "-":
        n, per_key, _ = key_census(plan, a.l)
        print(f"wrote {a.out}: regime {plan.regime.value}, {n} keys of {per_key} symbols, "
              f"attempt {plan.attempt}")
    if a.keys_dir:
        from .netio import write_key_files
        paths = write_key_files(generate_keys(plan, a.seed, a.l), a.keys_dir)
        print(f"wrote {len(paths)} key files to {a.keys_dir} (L={a.l}, seed={a.seed})")
    return EXIT_OK


def cmd_verify(a) -> int:
    try:
        plan = loads_plan(Path(a.path).read_text(encoding="utf-8"))
    except PlanParseError as exc:
        print(f"{a.path}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    report = verify_constraints(plan, a.subset_budget)
    if a.json:
        print(json.dumps({"path": a.path, "K": plan.K, "U": plan.U, "S": plan.S, "q": plan.q,
                          "regime": plan.regime.value, **report.to_dict()}, sort_keys=True))
    else:
        print(f"{a.path}: (K,U,S)=({plan.K},{plan.U},{plan.S}) q={plan.q} regime {plan.regime.value}")
        print(report.summary())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_simulate(a) -> int:
    p = _params(a)
    plan = _plan(a)
    if a.exhaustive:
        rep = exhaustive_dropout_check(p, seed=a.seed, plan=plan)
        if a.json:
            print(json.dumps({"cases": rep.cases, "passed": rep.passed, "first_failure": rep.first_failure}))
        else:
            print(rep.summary())
        return EXIT_OK if rep.passed else EXIT_FAIL
    if a.p1 or a.p2:
        sched = DropoutSchedule.random(a.p1, a.p2, seed=a.seed)
    else:
        sched = DropoutSchedule.explicit(a.u1, a.u2)
    out = run_once(p, sched, seed=a.seed, plan=plan, rows=a.rows)
    d = out.to_dict()
    if a.no_time:
        d.pop("times_ms")
    if a.json:
        print(json.dumps(d, sort_keys=True))
    else:
        print(f"(K,U,S)=({p.K},{p.U},{p.S}) q={p.q} L={p.L} regime {out.regime}")
        print(f"U1={out.U1} U2={out.U2}")
        print(f"decoded {'OK' if out.success else 'MISMATCH'} checksum {out.checksum}")
        print(f"R1 = {out.r1}  R2 = {out.r2}  (symbols per user over L'={p.padded_length})")
        if not a.no_time:
            print("times ms: " + " ".join(f"{k}={v:.1f}" for k, v in out.times_ms.items()))
    return EXIT_OK if out.success else EXIT_FAIL


def cmd_sweep(a) -> int:
    if a.grid == "bench":
        grid = benchmark_grid(a.q if a.q != MERSENNE61 else None)
    else:
        grid = [SystemParams(K, U, K - U + 1, a.q, a.l) for K in range(2, a.max_k + 1) for U in range(1, K)]
    if a.l_override:
        grid = [SystemParams(p.K, p.U, p.S, p.q, a.l_override) for p in grid]
    rows = bench_sweep(grid, trials=a.trials, out=a.out, seed=a.seed, timing=not a.no_time)
    return EXIT_OK if all(float(r["success_rate"]) == 1.0 for r in rows) else EXIT_FAIL


def cmd_audit(a) -> int:
    if a.plan:
        plan, notes = load_plan(a.plan, check=False), []
    else:
        p = _params(a, L=1)
        plan, notes = audit_mod.audit_plan(p.K, p.U, p.S, p.q, seed=a.seed)
    if a.corrupt is not None:
        plan, what = audit_mod.corrupt_plan(plan, a.corrupt)
        notes.append(f"corrupted: {what}")
    U1_sets = [a.u1] if a.u1 else None
    verdicts = audit_mod.run_audit_suite(plan, a.l, U1_sets, ceiling=a.ceiling)
    ok = all(v.passed for v in verdicts)
    if a.json:
        print(json.dumps({"q": plan.q, "L": a.l, "notes": notes, "passed": ok,
                          "verdicts": [v.to_dict() for v in verdicts]}, sort_keys=True))
    else:
        for n in notes:
            print(f"note: {n}")
        for v in verdicts:
            print(v.report())
        print(f"overall: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bound(a) -> int:
    if a.k is None or a.u is None or a.s is None:
        raise UsageError("--k, --u and --s are required")
    try:
        b = audit_mod.rate_lower_bounds(a.k, a.u, a.s)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if a.json:
        print(json.dumps({"K": a.k, "U": a.u, "S": a.s, "feasible": b.feasible, "status": b.status,
                          "R1": None if b.r1 is None else str(b.r1),
                          "R2": None if b.r2 is None else str(b.r2)}, sort_keys=True))
    elif b.feasible:
        print(f"R1 >= {b.r1}")
        print(f"R2 >= {b.r2}")
        print(f"({b.status})")
    else:
        print(b.text())
    return EXIT_OK


def cmd_serve(a) -> int:
    from .netio import run_server

    plan = _plan(a)
    res = run_server(plan, a.l, a.host, a.port, dealer=not a.key_files, key_seed=a.seed,
                     drop_round1=a.drop1 or (), drop_round2=a.drop2 or (), timeout=a.timeout)
    if a.ledger:
        res.ledger.to_csv(a.ledger, with_times=not a.no_time)
    if res.aborted:
        print(f"session aborted: {res.aborted}")
        return EXIT_FAIL
    from .simharness import checksum
    print(f"U1={res.U1} U2={res.U2}")
    print(f"decoded sum checksum {checksum(res.decoded)}")
    for row in res.ledger.rows():
        print(f"user {row['user']}: keys={row['keys']} round1={row['round1']} round2={row['round2']} octets")
    return EXIT_OK


def cmd_join(a) -> int:
    from .netio import run_user

    plan = _plan(a)
    r = run_user(a.user, plan, a.l, a.host, a.port, input_seed=a.seed, key_file=a.keys, timeout=a.timeout)
    if r.status == "ok":
        from .simharness import checksum
        print(f"user {a.user}: ok, U1={r.U1}, decoded sum checksum {checksum(r.decoded)}")
    elif r.status == "dropped":
        print(f"user {a.user}: not a round-1 survivor (U1={r.U1}); exiting")
    else:
        print(f"user {a.user}: {r.status}: {r.reason}")
    return EXIT_OK if r.success else EXIT_FAIL


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="groupsecagg", description="Secure aggregation with uncoded groupwise keys.")
    root.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="build a key plan and save it")
    _params_args(p)
    _budget_args(p)
    p.add_argument("--out", help="plan file to write (default stdout)")
    p.add_argument("--keys-dir", help="also write per-user key files for inputs of length --l")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("verify", help="check a plan file against its constraints")
    p.add_argument("path")
    p.add_argument("--subset-budget", type=int, default=DEFAULT_SUBSET_BUDGET)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="run the protocol in process")
    _params_args(p)
    _budget_args(p)
    p.add_argument("--plan", help="plan file (default: build from parameters and --seed)")
    p.add_argument("--u1", type=_ints, help="round-1 survivors, e.g. 1,2,4")
    p.add_argument("--u2", type=_ints, help="round-2 survivors (subset of --u1)")
    p.add_argument("--p1", type=float, default=0.0, help="round-1 drop probability")
    p.add_argument("--p2", type=float, default=0.0, help="round-2 drop probability")
    p.add_argument("--rows", choices=["lowest", "random"], default="lowest")
    p.add_argument("--exhaustive", action="store_true", help="every valid survivor pattern (K <= 8)")
    p.add_argument("--json", action="store_true")
    p.add_argument("--no-time", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="benchmark grid to CSV")
    p.add_argument("--grid", choices=["bench", "small"], default="bench")
    p.add_argument("--max-k", type=int, default=6, help="largest K for --grid small")
    p.add_argument("--q", type=int, default=MERSENNE61)
    p.add_argument("--l", "--L", dest="l", type=int, default=1000, help="L for --grid small")
    p.add_argument("--l-override", type=int, help="replace every cell's L")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.add_argument("--no-time", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("audit", help="exhaustive security audit at tiny scale")
    _params_args(p)
    p.set_defaults(l=2)
    p.add_argument("--plan", help="audit this plan file instead of building one")
    p.add_argument("--u1", type=_ints, help="audit only this U1")
    p.add_argument("--corrupt", type=int, metavar="SEED", help="audit a deliberately broken variant")
    p.add_argument("--ceiling", type=int, default=audit_mod.DEFAULT_CEILING)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("bound", help="converse lower bounds on the rates")
    p.add_argument("--k", type=int)
    p.add_argument("--u", type=int)
    p.add_argument("--s", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bound)

    for name, helptext in (("serve", "run the aggregation server"), ("join", "run one user")):
        p = sub.add_parser(name, help=helptext)
        _params_args(p)
        _budget_args(p)
        p.add_argument("--plan", help="plan file (default: build from parameters and --seed)")
        p.add_argument("--host", default="127.0.0.1")
        p.add_argument("--port", type=int, default=7461)
        p.add_argument("--timeout", type=float, default=30.0, help="seconds per phase")
        if name == "serve":
            p.add_argument("--drop1", type=_ints, help="ignore these users' round-1 messages")
            p.add_argument("--drop2", type=_ints, help="ignore these users' round-2 messages")
            p.add_argument("--key-files", action="store_true",
                           help="users bring pre-distributed key files; the server deals nothing")
            p.add_argument("--ledger", help="write per-user octet counts as CSV")
            p.add_argument("--no-time", action="store_true")
            p.set_defaults(func=cmd_serve)
        else:
            p.add_argument("--user", type=int, required=True)
            p.add_argument("--keys", help="this user's key file (default: receive keys from the server)")
            p.set_defaults(func=cmd_join)
    return root


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except UsageError as exc:
        print(f"groupsecagg {a.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnsupportedRegime as exc:
        print(f"unsupported parameters: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except audit_mod.AuditRefused as exc:
        print(f"audit refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except (ConstructionFailed, ConstraintViolation, PlanParseError, InsufficientSurvivors) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"groupsecagg {a.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(dispatch())
