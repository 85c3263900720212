"""Socket demo of the server/users topology with real framing and byte accounting.

Wire frame: ``b"GSA1"``, version (u8), type (u8), payload length (u64 LE), payload.
Field symbols travel as u64 little-endian words.  A connection's user id is
fixed by its HELLO, so ROUND1/ROUND2 payloads are nothing but symbols and
their octet counts are exactly 8*L' and 8*L'/U.

Payloads:
  HELLO      u64 user id
  KEYS       u64 block length, u64 entry count, then per entry
             u64 group index, u64 member, block of symbols
  ROUND1     L' symbols
  SURVIVORS  u64 count, then that many u64 user ids
  ROUND2     L'/U symbols
  RESULT     L symbols (the decoded sum)
  ABORT      UTF-8 reason
"""

from __future__ import annotations

import csv
import enum
import logging
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Iterable

import numpy as np

from .field import from_le_bytes, to_le_bytes
from .keyplan import KeyPlan, Regime
from .protocol import (
    KeyMaterial,
    ProtocolError,
    Round1Msg,
    Round2Msg,
    generate_keys,
    round1_encode,
    round2_encode,
    server_decode,
    user_input,
)

log = logging.getLogger(__name__)

MAGIC = b"GSA1"
VERSION = 1
DEFAULT_TIMEOUT = 30.0
_HEAD = struct.Struct("<4sBBQ")
MAX_PAYLOAD = 1 << 32
DEALER_WARNING = ("dealer mode: the server generates and distributes all keys, so it could unmask "
                  "individual inputs; use key files for runs that respect the trust model")


class MsgType(enum.IntEnum):
    HELLO = 1
    KEYS = 2
    ROUND1 = 3
    SURVIVORS = 4
    ROUND2 = 5
    RESULT = 6
    ABORT = 7


class FrameError(ProtocolError):
    """Malformed frame or unexpected message on the wire."""


class SessionAborted(ProtocolError):
    pass


# ---------------------------------------------------------------- framing


def encode_frame(kind: int, payload: bytes = b"") -> bytes:
    return _HEAD.pack(MAGIC, VERSION, int(kind), len(payload)) + payload


def decode_frame(data: bytes) -> tuple[MsgType, bytes]:
    """Parse exactly one frame from ``data``."""
    kind, length = _parse_head(data[:_HEAD.size])
    payload = data[_HEAD.size:]
    if len(payload) != length:
        raise FrameError(f"payload length field says {length}, frame carries {len(payload)}")
    return kind, payload


def _parse_head(head: bytes) -> tuple[MsgType, int]:
    if len(head) != _HEAD.size:
        raise FrameError("truncated frame header")
    magic, version, kind, length = _HEAD.unpack(head)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    try:
        kind = MsgType(kind)
    except ValueError:
        raise FrameError(f"unknown message type {kind}") from None
    if length > MAX_PAYLOAD:
        raise FrameError(f"payload of {length} octets exceeds limit")
    return kind, length


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def send_frame(sock: socket.socket, kind: int, payload: bytes = b"") -> int:
    sock.sendall(encode_frame(kind, payload))
    return len(payload)


def recv_frame(sock: socket.socket) -> tuple[MsgType, bytes]:
    kind, length = _parse_head(_recv_exact(sock, _HEAD.size))
    return kind, _recv_exact(sock, length)


def _u64s(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}Q", *values)


def _read_u64s(payload: bytes, n: int, offset: int = 0) -> tuple[int, ...]:
    if len(payload) < offset + 8 * n:
        raise FrameError("payload too short")
    return struct.unpack_from(f"<{n}Q", payload, offset)


def _symbols(payload: bytes, count: int, plan: KeyPlan) -> np.ndarray:
    if len(payload) != 8 * count:
        raise FrameError(f"expected {count} symbols, got {len(payload)} octets")
    try:
        return plan.field.asarray(from_le_bytes(payload, plan.field))
    except ValueError as exc:
        raise FrameError(str(exc)) from None


def encode_survivors(users: Iterable[int]) -> bytes:
    users = sorted(users)
    return _u64s(len(users), *users)


def decode_survivors(payload: bytes) -> list[int]:
    (n,) = _read_u64s(payload, 1)
    if len(payload) != 8 * (n + 1):
        raise FrameError("survivor list length mismatch")
    return list(_read_u64s(payload, n, 8))


# ---------------------------------------------------------------- key views


def encode_key_view(material: KeyMaterial, k: int) -> bytes:
    """All sub-keys of every group containing user k."""
    plan = material.plan
    entries = [(gi, m) for gi in plan.groups_of(k) for m in plan.groups[gi]]
    parts = [_u64s(material.block_length, len(entries))]
    for gi, m in entries:
        parts.append(_u64s(gi, m))
        parts.append(to_le_bytes(material.subkeys[gi][m]))
    return b"".join(parts)


def decode_key_view(payload: bytes, plan: KeyPlan, k: int) -> KeyMaterial:
    """Rebuild the part of the key material that user k holds."""
    block, n = _read_u64s(payload, 2)
    subkeys: dict[int, dict[int, np.ndarray]] = {gi: {} for gi in range(len(plan.groups))}
    off = 16
    step = 16 + 8 * block
    if len(payload) != off + n * step:
        raise FrameError("key view length mismatch")
    for _ in range(n):
        gi, m = _read_u64s(payload, 2, off)
        if gi >= len(plan.groups) or m not in plan.groups[gi] or k not in plan.groups[gi]:
            raise FrameError(f"key entry ({gi},{m}) is not one user {k} may hold")
        subkeys[gi][m] = _symbols(payload[off + 16:off + step], block, plan)
        off += step
    for gi in plan.groups_of(k):
        if set(subkeys[gi]) != set(plan.groups[gi]):
            raise FrameError(f"key view misses sub-keys of group {plan.groups[gi]}")
    return KeyMaterial(plan, block, subkeys)


_KEYFILE_MAGIC = b"GSAK"


def write_key_files(material: KeyMaterial, directory: str | Path) -> list[Path]:
    """One file per user with just that user's key view (pre-distributed keys)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for k in range(1, material.plan.K + 1):
        path = directory / f"user{k}.keys"
        path.write_bytes(_KEYFILE_MAGIC + _u64s(k) + encode_key_view(material, k))
        out.append(path)
    return out


def read_key_file(path: str | Path, plan: KeyPlan, k: int) -> KeyMaterial:
    data = Path(path).read_bytes()
    if data[:4] != _KEYFILE_MAGIC:
        raise FrameError(f"{path} is not a key file")
    (owner,) = _read_u64s(data, 1, 4)
    if owner != k:
        raise FrameError(f"{path} holds keys of user {owner}, not {k}")
    return decode_key_view(data[12:], plan, k)


# ---------------------------------------------------------------- accounting


PHASES = ("keys", "round1", "round2")


@dataclass
class SessionLedger:
    """Payload octets per user and phase, plus phase completion times."""

    K: int
    octets: dict[int, dict[str, int]] = dc_field(default_factory=dict)
    timestamps: dict[str, float] = dc_field(default_factory=dict)

    def __post_init__(self):
        for k in range(1, self.K + 1):
            self.octets.setdefault(k, {ph: 0 for ph in PHASES})

    def add(self, k: int, phase: str, n: int) -> None:
        self.octets[k][phase] += n

    def mark(self, phase: str) -> None:
        self.timestamps[phase] = time.time()

    def rows(self) -> list[dict]:
        return [{"user": k, **self.octets[k]} for k in sorted(self.octets)]

    def to_csv(self, path: str | Path, with_times: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["user", *PHASES], lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows())
            if with_times:
                for ph, t in sorted(self.timestamps.items(), key=lambda kv: kv[1]):
                    fh.write(f"# {ph} done at {t:.6f}\n")


def key_sharing_cost(plan: KeyPlan, L: int, strategy: str = "generator") -> dict[int, int]:
    """Octets each user transmits to share group keys among members.

    ``generator``: one member per group draws the whole key (|V| sub-keys)
    and sends it to the other members.  Cyclic groups are generated by the
    user they start at, every other group by its lowest member.
    ``balanced``: every member draws its own sub-key and sends it to the
    other members of the group.
    """
    block = -(-L // plan.U)
    sent = {k: 0 for k in range(1, plan.K + 1)}
    for gi, g in enumerate(plan.groups):
        peers = len(g) - 1
        if strategy == "generator":
            gen = gi + 1 if plan.regime is Regime.CYCLIC else min(g)
            sent[gen] += peers * len(g) * block * 8
        elif strategy == "balanced":
            for m in g:
                sent[m] += peers * block * 8
        else:
            raise ValueError(f"unknown key-sharing strategy {strategy!r}")
    return sent


# ---------------------------------------------------------------- server


@dataclass
class ServerResult:
    ledger: SessionLedger
    decoded: np.ndarray | None
    U1: list[int]
    U2: list[int]
    aborted: str | None = None


class AggregationServer:
    """One session: accept K users, run both rounds, decode, reply.

    ``drop_round1``/``drop_round2`` name users whose messages are read and
    discarded, which emulates a drop deterministically.  A user whose
    message does not arrive within ``timeout`` counts as dropped.
    """

    def __init__(self, plan: KeyPlan, L: int, host: str = "127.0.0.1", port: int = 0, *,
                 dealer: bool = True, key_seed: int = 0, drop_round1: Iterable[int] = (),
                 drop_round2: Iterable[int] = (), timeout: float = DEFAULT_TIMEOUT):
        self.plan, self.L = plan, L
        self.dealer, self.key_seed = dealer, key_seed
        self.drop1, self.drop2 = set(drop_round1), set(drop_round2)
        self.timeout = timeout
        self.padded = plan.U * -(-L // plan.U)
        self.block = self.padded // plan.U
        self.ledger = SessionLedger(plan.K)
        self.rejected: list[str] = []
        self._sock = socket.create_server((host, port))
        self._sock.settimeout(timeout)
        self.address = self._sock.getsockname()[:2]
        self.conns: dict[int, socket.socket] = {}

    @property
    def port(self) -> int:
        return self.address[1]

    def close(self) -> None:
        for c in self.conns.values():
            try:
                c.close()
            except OSError:
                pass
        self._sock.close()

    def _accept_all(self) -> None:
        deadline = time.monotonic() + self.timeout
        while len(self.conns) < self.plan.K:
            self._sock.settimeout(max(deadline - time.monotonic(), 0.001))
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                raise SessionAborted(f"only {len(self.conns)} of {self.plan.K} users connected") from None
            conn.settimeout(self.timeout)
            try:
                kind, payload = recv_frame(conn)
                if kind is not MsgType.HELLO or len(payload) != 8:
                    raise FrameError(f"expected HELLO, got {kind.name}")
                (k,) = _read_u64s(payload, 1)
            except (FrameError, OSError) as exc:
                log.warning("dropping connection before HELLO: %s", exc)
                self.rejected.append(str(exc))
                conn.close()
                continue
            if not 1 <= k <= self.plan.K or k in self.conns:
                reason = f"user id {k} is out of range or already connected"
                log.warning("rejecting connection: %s", reason)
                self.rejected.append(reason)
                _try_send(conn, MsgType.ABORT, reason.encode())
                conn.close()
                continue
            self.conns[k] = conn

    def _gather(self, users: Iterable[int], expect: MsgType, count: int) -> dict[int, np.ndarray]:
        """Phase barrier: read one message from each user in parallel."""
        users = sorted(users)

        def read(k):
            try:
                kind, payload = recv_frame(self.conns[k])
                if kind is not expect:
                    raise FrameError(f"expected {expect.name}, got {kind.name}")
                return k, len(payload), _symbols(payload, count, self.plan)
            except (FrameError, OSError, ConnectionError) as exc:
                log.warning("user %d treated as dropped in %s: %s", k, expect.name, exc)
                return k, 0, None

        with ThreadPoolExecutor(max_workers=max(len(users), 1)) as pool:
            results = list(pool.map(read, users))
        return {k: (n, v) for k, n, v in results if v is not None}

    def _broadcast(self, kind: MsgType, payload: bytes) -> None:
        for k, conn in self.conns.items():
            _try_send(conn, kind, payload)

    def _abort(self, reason: str, U1=(), U2=()) -> ServerResult:
        log.error("session aborted: %s", reason)
        self._broadcast(MsgType.ABORT, reason.encode())
        return ServerResult(self.ledger, None, list(U1), list(U2), aborted=reason)

    def serve(self) -> ServerResult:
        plan = self.plan
        try:
            try:
                self._accept_all()
            except SessionAborted as exc:
                return self._abort(str(exc))
            self.ledger.mark("connect")
            if self.dealer:
                log.warning(DEALER_WARNING)
                material = generate_keys(plan, self.key_seed, self.L)
                for k, conn in self.conns.items():
                    n = _try_send(conn, MsgType.KEYS, encode_key_view(material, k))
                    self.ledger.add(k, "keys", n)
            self.ledger.mark("keys")

            got1 = self._gather(self.conns, MsgType.ROUND1, self.padded)
            for k, (n, _) in got1.items():
                self.ledger.add(k, "round1", n)
            U1 = sorted(k for k in got1 if k not in self.drop1)
            self.ledger.mark("round1")
            if len(U1) < plan.U:
                return self._abort(f"{len(U1)} users survived round 1, need {plan.U}", U1)
            self._broadcast(MsgType.SURVIVORS, encode_survivors(U1))

            got2 = self._gather(U1, MsgType.ROUND2, self.block)
            for k, (n, _) in got2.items():
                self.ledger.add(k, "round2", n)
            U2 = sorted(k for k in got2 if k not in self.drop2)
            self.ledger.mark("round2")
            if len(U2) < plan.U:
                return self._abort(f"{len(U2)} users survived round 2, need {plan.U}", U1, U2)

            msgs1 = {k: Round1Msg(k, got1[k][1].reshape(plan.U, -1)) for k in U1}
            msgs2 = {k: Round2Msg(k, got2[k][1]) for k in U2}
            decoded = server_decode(plan, U1, msgs1, U2, msgs2, self.L)
            self.ledger.mark("decode")
            self._broadcast(MsgType.RESULT, to_le_bytes(decoded))
            return ServerResult(self.ledger, decoded, U1, U2)
        finally:
            self.close()


def _try_send(conn: socket.socket, kind: MsgType, payload: bytes) -> int:
    try:
        return send_frame(conn, kind, payload)
    except OSError as exc:
        log.info("could not send %s: %s", kind.name, exc)
        return 0


def run_server(plan: KeyPlan, L: int, host: str = "127.0.0.1", port: int = 0, **kw) -> ServerResult:
    return AggregationServer(plan, L, host, port, **kw).serve()


# ---------------------------------------------------------------- user


@dataclass
class UserResult:
    user: int
    status: str  # "ok", "dropped", "aborted", "error"
    decoded: np.ndarray | None = None
    U1: list[int] | None = None
    reason: str = ""

    @property
    def success(self) -> bool:
        return self.status in ("ok", "dropped")


def run_user(k: int, plan: KeyPlan, L: int, host: str, port: int, *, input_seed: int = 0,
             key_file: str | Path | None = None, timeout: float = DEFAULT_TIMEOUT,
             connect_retries: int = 50) -> UserResult:
    """Single-threaded user state machine.

    HELLO, then (dealer mode) KEYS, ROUND1, wait SURVIVORS, ROUND2 iff k is
    a survivor, wait RESULT.  Keys come from ``key_file`` when given.
    """
    w = user_input(plan, input_seed, k, L)
    material = read_key_file(key_file, plan, k) if key_file is not None else None
    sock = None
    for attempt in range(connect_retries):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            break
        except OSError:
            time.sleep(0.05 * (attempt + 1))
    if sock is None:
        return UserResult(k, "error", reason=f"could not connect to {host}:{port}")
    sock.settimeout(timeout)
    state = "hello"
    try:
        with sock:
            send_frame(sock, MsgType.HELLO, _u64s(k))
            state = "keys"
            if material is None:
                material = decode_key_view(_expect(sock, MsgType.KEYS), plan, k)
            view = material.view(k)
            state = "round1"
            send_frame(sock, MsgType.ROUND1, to_le_bytes(round1_encode(k, w, view, plan).blocks.reshape(-1)))
            state = "survivors"
            U1 = decode_survivors(_expect(sock, MsgType.SURVIVORS))
            if k not in U1:
                return UserResult(k, "dropped", U1=U1)
            state = "round2"
            send_frame(sock, MsgType.ROUND2, to_le_bytes(round2_encode(k, view, plan, U1).block))
            state = "result"
            decoded = _symbols(_expect(sock, MsgType.RESULT), L, plan)
            return UserResult(k, "ok", decoded, U1)
    except SessionAborted as exc:
        return UserResult(k, "aborted", reason=str(exc))
    except (FrameError, OSError, ConnectionError, ProtocolError) as exc:
        log.warning("user %d disconnecting in state %s: %s", k, state, exc)
        return UserResult(k, "error", reason=f"{state}: {exc}")


def _expect(sock: socket.socket, kind: MsgType) -> bytes:
    got, payload = recv_frame(sock)
    if got is MsgType.ABORT:
        raise SessionAborted(payload.decode("utf-8", "replace"))
    if got is not kind:
        raise FrameError(f"expected {kind.name}, got {got.name}")
    return payload


def loopback_session(plan: KeyPlan, L: int, seed: int = 0, *, drop_round1: Iterable[int] = (),
                     drop_round2: Iterable[int] = (), key_dir: str | Path | None = None,
                     timeout: float = DEFAULT_TIMEOUT) -> tuple[ServerResult, dict[int, UserResult]]:
    """Server plus K user threads on 127.0.0.1; keys and inputs drawn from ``seed``.

    With ``key_dir`` the keys are pre-distributed as files instead of dealt.
    """
    if key_dir is not None:
        write_key_files(generate_keys(plan, seed, L), key_dir)
    server = AggregationServer(plan, L, dealer=key_dir is None, key_seed=seed, drop_round1=drop_round1,
                               drop_round2=drop_round2, timeout=timeout)
    users: dict[int, UserResult] = {}

    def user(k):
        kf = Path(key_dir) / f"user{k}.keys" if key_dir is not None else None
        users[k] = run_user(k, plan, L, *server.address, input_seed=seed, key_file=kf, timeout=timeout)

    threads = [threading.Thread(target=user, args=(k,), daemon=True) for k in range(1, plan.K + 1)]
    for t in threads:
        t.start()
    result = server.serve()
    for t in threads:
        t.join(timeout)
    return result, users
