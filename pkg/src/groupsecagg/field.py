"""Prime-field arithmetic over F_q for q up to 2^61 - 1.

Scalars are plain Python ints (or :class:`FieldElement` wrappers when the
caller wants mixed-field checks).  Long vectors are numpy ``uint64`` arrays;
products are reduced without overflow: the Mersenne modulus 2^61 - 1 uses a
split 31/30-bit multiply, moduli below 2^32 multiply directly, and any other
prime falls back to ``object`` arrays of Python ints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MERSENNE61 = (1 << 61) - 1
DEFAULT_MODULUS = MERSENNE61

_MAX_MODULUS = 1 << 62
_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
_LOW31 = np.uint64((1 << 31) - 1)
_LOW30 = np.uint64((1 << 30) - 1)
_M61 = np.uint64(MERSENNE61)


class FieldMismatchError(ValueError):
    """Operands live in different fields."""


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, exact for n < 3.3e24."""
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def _mulmod_m61(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a, b < 2^61; every partial sum below stays under 2^64
    a0, a1 = a & _LOW31, a >> np.uint64(31)
    b0, b1 = b & _LOW31, b >> np.uint64(31)
    hi = a1 * b1
    mid = a1 * b0 + a0 * b1
    lo = a0 * b0
    total = (hi << np.uint64(1)) + (mid >> np.uint64(30)) + ((mid & _LOW30) << np.uint64(31)) + lo
    r = (total & _M61) + (total >> np.uint64(61))
    return np.where(r >= _M61, r - _M61, r)


@dataclass(frozen=True)
class PrimeField:
    """The field F_q.  Construction verifies that ``modulus`` is prime."""

    modulus: int = DEFAULT_MODULUS

    def __post_init__(self) -> None:
        q = self.modulus
        if not isinstance(q, int) or q < 2 or q >= _MAX_MODULUS:
            raise ValueError(f"modulus must be an integer in [2, 2^62), got {q!r}")
        if not is_prime(q):
            raise ValueError(f"modulus {q} is not prime")

    @property
    def q(self) -> int:
        return self.modulus

    def __repr__(self) -> str:
        return f"PrimeField({self.modulus})"

    # scalars ---------------------------------------------------------------

    def __call__(self, value: int) -> "FieldElement":
        return FieldElement(self, value % self.modulus)

    def reduce(self, value: int) -> int:
        return value % self.modulus

    def add(self, a: int, b: int) -> int:
        return (a + b) % self.modulus

    def sub(self, a: int, b: int) -> int:
        return (a - b) % self.modulus

    def neg(self, a: int) -> int:
        return -a % self.modulus

    def mul(self, a: int, b: int) -> int:
        return a * b % self.modulus

    def inv(self, a: int) -> int:
        a %= self.modulus
        if a == 0:
            raise ZeroDivisionError("zero has no inverse in a field")
        return pow(a, -1, self.modulus)

    def div(self, a: int, b: int) -> int:
        return self.mul(a, self.inv(b))

    def dot(self, u, v) -> int:
        return sum(x * y for x, y in zip(u, v)) % self.modulus

    def uniform(self, rng: np.random.Generator) -> "FieldElement":
        """One uniform element, drawn by rejection sampling."""
        return FieldElement(self, int(self.random_vector(rng, 1)[0]))

    # vectors ---------------------------------------------------------------

    @property
    def dtype(self):
        return np.uint64 if self._native else object

    @property
    def _native(self) -> bool:
        return self.modulus < (1 << 32) or self.modulus == MERSENNE61

    def asarray(self, values) -> np.ndarray:
        """Canonical residues of ``values`` as a vector in this field."""
        if self._native:
            arr = np.asarray(values)
            if arr.dtype == np.uint64:
                return arr % np.uint64(self.modulus)
            if arr.dtype.kind in "iu" and arr.size and arr.min() >= 0:
                return arr.astype(np.uint64) % np.uint64(self.modulus)
            return np.array([int(v) % self.modulus for v in np.ravel(arr)], dtype=np.uint64).reshape(arr.shape)
        arr = np.asarray(values, dtype=object)
        return np.vectorize(lambda v: int(v) % self.modulus, otypes=[object])(arr) if arr.size else arr

    def zeros(self, shape) -> np.ndarray:
        if self._native:
            return np.zeros(shape, dtype=np.uint64)
        arr = np.empty(shape, dtype=object)
        arr.fill(0)
        return arr

    def random_vector(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` i.i.d. uniform residues; rejection sampling, so no modulo bias."""
        q = self.modulus
        bits = max((q - 1).bit_length(), 1)
        mask = np.uint64((1 << bits) - 1)
        out = np.empty(0, dtype=np.uint64)
        while out.size < n:
            need = n - out.size
            raw = rng.bit_generator.random_raw(need + need // 8 + 8).astype(np.uint64) & mask
            out = np.concatenate([out, raw[raw < np.uint64(q)]])
        out = out[:n]
        return out if self._native else out.astype(object)

    def vadd(self, a, b) -> np.ndarray:
        if self._native:
            s = a + b
            return np.where(s >= np.uint64(self.modulus), s - np.uint64(self.modulus), s)
        return (a + b) % self.modulus

    def vsub(self, a, b) -> np.ndarray:
        if self._native:
            q = np.uint64(self.modulus)
            return np.where(a >= b, a - b, a + (q - b))
        return (a - b) % self.modulus

    def vneg(self, a) -> np.ndarray:
        return self.vsub(self.zeros(np.shape(a)), a)

    def vmul(self, a, b) -> np.ndarray:
        """Elementwise product; numpy broadcasting applies."""
        if self.modulus == MERSENNE61:
            a, b = np.broadcast_arrays(np.asarray(a, dtype=np.uint64), np.asarray(b, dtype=np.uint64))
            return _mulmod_m61(a, b)
        if self._native:
            return (np.asarray(a, dtype=np.uint64) * np.asarray(b, dtype=np.uint64)) % np.uint64(self.modulus)
        return (a * b) % self.modulus

    def vscale(self, c: int, v) -> np.ndarray:
        c %= self.modulus
        if self._native:
            return self.vmul(np.uint64(c), v)
        return (v * c) % self.modulus

    def vpow(self, a, e: int) -> np.ndarray:
        result = self.zeros(np.shape(a)) + (np.uint64(1) if self._native else 1)
        base = a
        while e:
            if e & 1:
                result = self.vmul(result, base)
            base = self.vmul(base, base)
            e >>= 1
        return result

    def vinv(self, a) -> np.ndarray:
        """Elementwise inverse by Fermat; zero maps to zero."""
        return self.vpow(a, self.modulus - 2)

    def vsum(self, arrays) -> np.ndarray:
        arrays = list(arrays)
        total = arrays[0]
        for arr in arrays[1:]:
            total = self.vadd(total, arr)
        return total


@dataclass(frozen=True)
class FieldElement:
    """An immutable residue in [0, q) tied to its field."""

    field: PrimeField
    residue: int

    def __post_init__(self) -> None:
        if not 0 <= self.residue < self.field.modulus:
            object.__setattr__(self, "residue", self.residue % self.field.modulus)

    def _other(self, other) -> int:
        if isinstance(other, FieldElement):
            if other.field != self.field:
                raise FieldMismatchError(f"cannot combine elements of {self.field} and {other.field}")
            return other.residue
        if isinstance(other, int):
            return other % self.field.modulus
        return NotImplemented

    def __add__(self, other):
        b = self._other(other)
        return NotImplemented if b is NotImplemented else FieldElement(self.field, self.field.add(self.residue, b))

    __radd__ = __add__

    def __sub__(self, other):
        b = self._other(other)
        return NotImplemented if b is NotImplemented else FieldElement(self.field, self.field.sub(self.residue, b))

    def __rsub__(self, other):
        b = self._other(other)
        return NotImplemented if b is NotImplemented else FieldElement(self.field, self.field.sub(b, self.residue))

    def __mul__(self, other):
        b = self._other(other)
        return NotImplemented if b is NotImplemented else FieldElement(self.field, self.field.mul(self.residue, b))

    __rmul__ = __mul__

    def __neg__(self):
        return FieldElement(self.field, self.field.neg(self.residue))

    def __truediv__(self, other):
        b = self._other(other)
        return NotImplemented if b is NotImplemented else FieldElement(self.field, self.field.div(self.residue, b))

    def inverse(self) -> "FieldElement":
        return FieldElement(self.field, self.field.inv(self.residue))

    def __int__(self) -> int:
        return self.residue

    def __repr__(self) -> str:
        return f"{self.residue} (mod {self.field.modulus})"


def fe_arith(a: FieldElement, b: FieldElement, op: str) -> FieldElement:
    """Apply ``op`` in {"add", "sub", "mul"} to two elements of one field."""
    if a.field != b.field:
        raise FieldMismatchError(f"cannot combine elements of {a.field} and {b.field}")
    ops = {"add": a.field.add, "sub": a.field.sub, "mul": a.field.mul}
    try:
        fn = ops[op]
    except KeyError:
        raise ValueError(f"unknown operation {op!r}") from None
    return FieldElement(a.field, fn(a.residue, b.residue))


def fe_inv(a: FieldElement) -> FieldElement:
    return a.inverse()


def fe_uniform(field: PrimeField, rng: np.random.Generator) -> FieldElement:
    return field.uniform(rng)


def to_le_bytes(values) -> bytes:
    """Serialize residues as 8-octet little-endian unsigned integers."""
    arr = np.asarray(values)
    if arr.dtype.kind in "ui":
        return np.ravel(arr).astype("<u8").tobytes()
    return np.asarray([int(v) for v in np.ravel(arr)], dtype="<u8").tobytes()


def from_le_bytes(data: bytes, field: PrimeField | None = None) -> np.ndarray:
    if len(data) % 8:
        raise ValueError(f"field payload length {len(data)} is not a multiple of 8")
    arr = np.frombuffer(data, dtype="<u8").astype(np.uint64)
    if field is not None:
        if arr.size and int(arr.max()) >= field.modulus:
            raise ValueError("residue out of range for field")
        if not field._native:
            arr = arr.astype(object)
    return arr
