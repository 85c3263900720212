"""Dense exact linear algebra over a prime field.

Matrices here are small (at most U rows by a few hundred columns), so
entries are Python ints held in an immutable row-major tuple.  The one
hot path, checking many U x U submatrices for invertibility, has a
vectorized batch routine (:func:`batch_full_rank`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .field import PrimeField


class SingularMatrixError(ArithmeticError):
    pass


@dataclass(frozen=True)
class FMatrix:
    rows: int
    cols: int
    entries: tuple[int, ...]
    field: PrimeField

    def __post_init__(self) -> None:
        if len(self.entries) != self.rows * self.cols:
            raise ValueError(f"{self.rows}x{self.cols} matrix needs {self.rows * self.cols} entries, got {len(self.entries)}")
        q = self.field.modulus
        if any(not 0 <= e < q for e in self.entries):
            object.__setattr__(self, "entries", tuple(int(e) % q for e in self.entries))

    @classmethod
    def from_rows(cls, field: PrimeField, rows: Sequence[Sequence[int]], cols: int | None = None) -> "FMatrix":
        rows = [list(r) for r in rows]
        c = len(rows[0]) if rows else (cols or 0)
        if any(len(r) != c for r in rows):
            raise ValueError("ragged rows")
        return cls(len(rows), c, tuple(int(e) % field.modulus for r in rows for e in r), field)

    @classmethod
    def from_columns(cls, field: PrimeField, columns: Sequence[Sequence[int]], rows: int) -> "FMatrix":
        """Stack column vectors side by side; ``rows`` fixes the shape when there are none."""
        columns = [list(c) for c in columns]
        if any(len(c) != rows for c in columns):
            raise ValueError("column length mismatch")
        return cls.from_rows(field, [[c[i] for c in columns] for i in range(rows)], cols=len(columns))

    @classmethod
    def zeros(cls, field: PrimeField, rows: int, cols: int) -> "FMatrix":
        return cls(rows, cols, (0,) * (rows * cols), field)

    @classmethod
    def identity(cls, field: PrimeField, n: int) -> "FMatrix":
        return cls(n, n, tuple(int(i == j) for i in range(n) for j in range(n)), field)

    def row(self, i: int) -> list[int]:
        return list(self.entries[i * self.cols:(i + 1) * self.cols])

    def column(self, j: int) -> list[int]:
        return [self.entries[i * self.cols + j] for i in range(self.rows)]

    def to_rows(self) -> list[list[int]]:
        return [self.row(i) for i in range(self.rows)]

    def __getitem__(self, ij: tuple[int, int]) -> int:
        i, j = ij
        return self.entries[i * self.cols + j]


def transpose(m: FMatrix) -> FMatrix:
    return FMatrix.from_columns(m.field, m.to_rows(), m.cols) if m.rows else FMatrix.zeros(m.field, m.cols, 0)


def matmul(a: FMatrix, b: FMatrix) -> FMatrix:
    if a.field != b.field:
        raise ValueError("matrices over different fields")
    if a.cols != b.rows:
        raise ValueError(f"shape mismatch {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    q = a.field.modulus
    bcols = [b.column(j) for j in range(b.cols)]
    out = [sum(x * y for x, y in zip(a.row(i), col)) % q for i in range(a.rows) for col in bcols]
    return FMatrix(a.rows, b.cols, tuple(out), a.field)


def _rref_rows(rows: list[list[int]], q: int, ncols: int) -> tuple[list[list[int]], list[int]]:
    rows = [r[:] for r in rows]
    pivots: list[int] = []
    r = 0
    for c in range(ncols):
        if r == len(rows):
            break
        p = next((i for i in range(r, len(rows)) if rows[i][c]), None)
        if p is None:
            continue
        rows[r], rows[p] = rows[p], rows[r]
        inv = pow(rows[r][c], -1, q)
        rows[r] = [x * inv % q for x in rows[r]]
        for i in range(len(rows)):
            if i != r and rows[i][c]:
                f = rows[i][c]
                rows[i] = [(x - f * y) % q for x, y in zip(rows[i], rows[r])]
        pivots.append(c)
        r += 1
    return rows, pivots


def rref(m: FMatrix) -> tuple[FMatrix, list[int]]:
    """Reduced row echelon form (leading ones) and the pivot column indices."""
    rows, pivots = _rref_rows(m.to_rows(), m.field.modulus, m.cols)
    return FMatrix(m.rows, m.cols, tuple(x for r in rows for x in r), m.field), pivots


def rank(m: FMatrix) -> int:
    return len(rref(m)[1])


def left_null_space(m: FMatrix) -> list[list[int]]:
    """Basis of {v : v m = 0}, canonicalized.

    Solves m^T v = 0 by elimination; one basis vector per free variable, in
    ascending order, with that variable set to 1 and the others to 0.  Each
    vector is then scaled so its first nonzero entry is 1.
    """
    q = m.field.modulus
    n = m.rows
    mt_rows = [m.column(j) for j in range(m.cols)]
    red, pivots = _rref_rows(mt_rows, q, n)
    free = [c for c in range(n) if c not in pivots]
    basis = []
    for f in free:
        v = [0] * n
        v[f] = 1
        for r, pc in enumerate(pivots):
            v[pc] = -red[r][f] % q
        lead = next(x for x in v if x)
        inv = pow(lead, -1, q)
        basis.append([x * inv % q for x in v])
    return basis


def solve_square(a: FMatrix, b: FMatrix) -> FMatrix:
    """Return x with a @ x = b; raises :class:`SingularMatrixError` if a is singular."""
    if a.rows != a.cols:
        raise ValueError("coefficient matrix must be square")
    if b.rows != a.rows:
        raise ValueError("right-hand side row count mismatch")
    n, q = a.rows, a.field.modulus
    aug = [a.row(i) + b.row(i) for i in range(n)]
    red, pivots = _rref_rows(aug, q, n)
    if pivots != list(range(n)):
        raise SingularMatrixError(f"matrix has rank {len(pivots)} < {n}")
    return FMatrix.from_rows(a.field, [r[n:] for r in red], cols=b.cols)


def inverse(a: FMatrix) -> FMatrix:
    return solve_square(a, FMatrix.identity(a.field, a.rows))


def vec_dot(field: PrimeField, u: Iterable[int], v: Iterable[int]) -> int:
    return field.dot(list(u), list(v))


def is_scalar_multiple(field: PrimeField, u: Sequence[int], v: Sequence[int]) -> bool:
    """True when u = c v for some nonzero c (projective equality)."""
    q = field.modulus
    u = [x % q for x in u]
    v = [x % q for x in v]
    if len(u) != len(v) or not any(u) or not any(v):
        return False
    i = next(k for k, x in enumerate(v) if x)
    c = u[i] * pow(v[i], -1, q) % q
    return all(x == c * y % q for x, y in zip(u, v))


def batch_full_rank(field: PrimeField, mats: np.ndarray) -> np.ndarray:
    """Boolean mask of which n x n matrices in an (m, n, n) stack are invertible.

    Vectorized Gaussian elimination: every matrix picks its own first
    nonzero pivot per column; a column with no pivot marks it singular.
    """
    mats = np.array(mats, dtype=field.dtype, copy=True)
    m, n, n2 = mats.shape
    if n != n2:
        raise ValueError("expected square matrices")
    ok = np.ones(m, dtype=bool)
    idx = np.arange(m)
    for c in range(n):
        sub = mats[:, c:, c] != 0
        has = sub.any(axis=1)
        ok &= has
        p = c + np.argmax(sub, axis=1)
        # swap the pivot row into place
        prow = mats[idx, p].copy()
        mats[idx, p] = mats[idx, c]
        mats[idx, c] = prow
        inv = field.vinv(mats[:, c, c])
        mats[:, c] = field.vmul(mats[:, c], inv[:, None])
        for r in range(c + 1, n):
            f = mats[:, r, c]
            mats[:, r] = field.vsub(mats[:, r], field.vmul(mats[:, c], f[:, None]))
    return ok
