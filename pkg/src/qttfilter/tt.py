"""Tensor-train (TT) and quantized tensor-train (QTT) arithmetic.

Tensors are stored as a chain of 3-index cores ``G_k`` of shape
``(r_{k-1}, n_k, r_k)`` with ``r_0 = r_d = 1``; an entry is the matrix
product ``G_1[:, i_1, :] @ ... @ G_d[:, i_d, :]``.  Operators use 4-index
cores ``(r_{k-1}, m_k, n_k, r_k)`` with paired row/column indices.

Dense layouts use C order throughout: the first mode varies slowest, so the
dense image of a Kronecker product ``A (x) B`` is ``np.kron(A, B)``.
Quantization splits every mode of size ``2**L`` into ``L`` binary modes,
most significant bit first, which is exactly ``reshape`` in C order.

All objects are immutable; every operation returns a new object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import MaterializationError, ShapeMismatchError

__all__ = [
    "RoundingPolicy",
    "TtTensor",
    "TtMatrix",
    "tt_from_full",
    "matrix_from_full",
    "tt_to_full",
    "tt_round",
    "tt_add",
    "tt_sub",
    "tt_scale",
    "tt_hadamard",
    "tt_matvec",
    "tt_matmul",
    "tt_kron",
    "tt_sum",
    "tt_dot",
    "tt_norm",
    "tt_ones",
    "tt_zeros",
    "tt_eye",
    "tt_diag",
    "quantize",
    "dequantize",
    "effective_rank",
    "dump",
    "DEFAULT_MAX_ENTRIES",
]

# Largest dense expansion tt_to_full will produce unless told otherwise.
DEFAULT_MAX_ENTRIES = 2**26

_ZERO_NORM = 1e-300


@dataclass(frozen=True)
class RoundingPolicy:
    """Relative Frobenius tolerance plus an optional hard rank cap."""

    epsilon: float = 1e-12
    max_rank: int | None = None

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon}")
        if self.max_rank is not None and self.max_rank < 1:
            raise ValueError(f"max_rank must be >= 1, got {self.max_rank}")

    def scaled(self, factor: float) -> "RoundingPolicy":
        return RoundingPolicy(self.epsilon * factor, self.max_rank)


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class _TtBase:
    __slots__ = ("_cores", "capped")

    _core_ndim = 3

    def __init__(self, cores: Sequence[np.ndarray], *, capped: bool = False):
        if len(cores) == 0:
            raise ValueError("a TT object needs at least one core")
        out = []
        for k, c in enumerate(cores):
            c = np.array(c, dtype=np.float64, copy=True)
            if c.ndim != self._core_ndim:
                raise ShapeMismatchError(
                    f"core {k} must have {self._core_ndim} indices, got shape {c.shape}")
            out.append(c)
        if out[0].shape[0] != 1 or out[-1].shape[-1] != 1:
            raise ShapeMismatchError("boundary ranks r_0 and r_d must be 1")
        for k in range(len(out) - 1):
            if out[k].shape[-1] != out[k + 1].shape[0]:
                raise ShapeMismatchError(
                    f"rank mismatch between cores {k} and {k + 1}: "
                    f"{out[k].shape[-1]} != {out[k + 1].shape[0]}")
        for c in out:
            if not np.all(np.isfinite(c)):
                raise ValueError("TT cores contain non-finite values")
            _freeze(c)
        self._cores = tuple(out)
        self.capped = bool(capped)

    @classmethod
    def _wrap(cls, cores, capped=False):
        obj = cls.__new__(cls)
        obj._cores = tuple(_freeze(np.ascontiguousarray(c, dtype=np.float64)) for c in cores)
        obj.capped = bool(capped)
        return obj

    @property
    def cores(self) -> tuple[np.ndarray, ...]:
        return self._cores

    @property
    def d(self) -> int:
        return len(self._cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[-1] for c in self._cores)

    @property
    def storage(self) -> int:
        return sum(c.size for c in self._cores)

    def _flat(self) -> list[np.ndarray]:
        return [c.reshape(c.shape[0], -1, c.shape[-1]) for c in self._cores]


class TtTensor(_TtBase):
    """A d-dimensional tensor in TT format."""

    __slots__ = ()
    _core_ndim = 3

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self._cores)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def element(self, index: Sequence[int]) -> float:
        if len(index) != self.d:
            raise IndexError(f"expected {self.d} indices, got {len(index)}")
        v = np.ones((1, 1))
        for c, i in zip(self._cores, index):
            v = v @ c[:, i, :]
        return float(v[0, 0])

    def full(self, max_entries: int = DEFAULT_MAX_ENTRIES) -> np.ndarray:
        return tt_to_full(self, max_entries)

    def norm(self) -> float:
        return tt_norm(self)

    def __add__(self, other):
        return tt_add(self, other)

    def __sub__(self, other):
        return tt_sub(self, other)

    def __mul__(self, c):
        if isinstance(c, TtTensor):
            return tt_hadamard(self, c)
        return tt_scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return tt_scale(self, -1.0)

    def __repr__(self):
        return f"TtTensor(shape={self.shape}, ranks={self.ranks})"


class TtMatrix(_TtBase):
    """A linear operator in TT-matrix format, cores ``(r, m_k, n_k, r')``."""

    __slots__ = ()
    _core_ndim = 4

    @property
    def row_shape(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self._cores)

    @property
    def col_shape(self) -> tuple[int, ...]:
        return tuple(c.shape[2] for c in self._cores)

    @property
    def shape(self) -> tuple[int, int]:
        return math.prod(self.row_shape), math.prod(self.col_shape)

    def element(self, row: Sequence[int], col: Sequence[int]) -> float:
        v = np.ones((1, 1))
        for c, i, j in zip(self._cores, row, col):
            v = v @ c[:, i, j, :]
        return float(v[0, 0])

    def full(self, max_entries: int = DEFAULT_MAX_ENTRIES) -> np.ndarray:
        return tt_to_full(self, max_entries)

    def norm(self) -> float:
        return tt_norm(self)

    def __add__(self, other):
        return tt_add(self, other)

    def __sub__(self, other):
        return tt_sub(self, other)

    def __mul__(self, c):
        return tt_scale(self, c)

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, TtMatrix):
            return tt_matmul(self, other)
        return tt_matvec(self, other)

    def __neg__(self):
        return tt_scale(self, -1.0)

    def __repr__(self):
        return f"TtMatrix(rows={self.row_shape}, cols={self.col_shape}, ranks={self.ranks})"


def _rebuild(like: _TtBase, flat_cores, capped=False):
    """Reshape flattened ``(r, n, r')`` cores back into the kind of ``like``."""
    if isinstance(like, TtMatrix):
        cores = [f.reshape(f.shape[0], m, n, f.shape[-1])
                 for f, m, n in zip(flat_cores, like.row_shape, like.col_shape)]
        return TtMatrix._wrap(cores, capped)
    return TtTensor._wrap(flat_cores, capped)


def _canonical_zero(like: _TtBase):
    if isinstance(like, TtMatrix):
        return tt_zeros(like.row_shape, like.col_shape)
    return tt_zeros(like.shape)


# ---------------------------------------------------------------- construction

def _truncation_rank(s: np.ndarray, delta: float, max_rank: int | None) -> tuple[int, bool]:
    """Smallest rank whose discarded singular mass is at most ``delta``."""
    scale = s[0] if s.size and s[0] > 0 else 1.0  # keeps s**2 finite for huge entries
    tail = np.sqrt(np.cumsum(((s / scale) ** 2)[::-1]))[::-1]  # tail[r] = ||s[r:]|| / scale
    ok = np.nonzero(tail <= delta / scale)[0]
    r = int(ok[0]) if ok.size else s.size
    r = max(1, r)
    if max_rank is not None and r > max_rank:
        return max_rank, True
    return r, False


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(n) for n in shape)
    if len(shape) < 1 or any(n < 1 for n in shape):
        raise ValueError(f"invalid mode sizes {shape}")
    if math.prod(shape) > np.iinfo(np.intp).max:
        raise ValueError("tensor size exceeds the platform index range")
    return shape


def _tt_svd(data: np.ndarray, shape, policy: RoundingPolicy):
    d = len(shape)
    nrm = float(np.linalg.norm(data))
    if nrm < _ZERO_NORM:
        return [np.zeros((1, n, 1)) for n in shape], False
    if d == 1:
        return [data.reshape(1, shape[0], 1).copy()], False
    delta = policy.epsilon * nrm / math.sqrt(d - 1)
    cores = []
    capped = False
    r_prev = 1
    rest = data.reshape(-1)
    for k in range(d - 1):
        mat = rest.reshape(r_prev * shape[k], -1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        r, hit = _truncation_rank(s, delta, policy.max_rank)
        capped |= hit
        cores.append(u[:, :r].reshape(r_prev, shape[k], r))
        rest = s[:r, None] * vt[:r]
        r_prev = r
    cores.append(rest.reshape(r_prev, shape[-1], 1))
    return cores, capped


def tt_from_full(data, shape=None, policy: RoundingPolicy | None = None) -> TtTensor:
    """Compress a dense array with TT-SVD.

    The global tolerance ``policy.epsilon`` is split evenly over the ``d - 1``
    unfoldings, so ``||A - B||_F <= epsilon * ||A||_F`` when no rank cap binds.
    """
    policy = policy or RoundingPolicy()
    data = np.asarray(data, dtype=np.float64)
    shape = _check_shape(data.shape if shape is None else shape)
    if data.size != math.prod(shape):
        raise ShapeMismatchError(f"array has {data.size} entries, shape {shape} needs {math.prod(shape)}")
    if not np.all(np.isfinite(data)):
        raise ValueError("input contains non-finite entries")
    cores, capped = _tt_svd(data, shape, policy)
    return TtTensor._wrap(cores, capped)


def matrix_from_full(data, row_shape, col_shape, policy: RoundingPolicy | None = None) -> TtMatrix:
    """Compress a dense ``(prod(row_shape), prod(col_shape))`` matrix into TT-matrix format."""
    policy = policy or RoundingPolicy()
    row_shape = _check_shape(row_shape)
    col_shape = _check_shape(col_shape)
    if len(row_shape) != len(col_shape):
        raise ShapeMismatchError("row and column shapes need the same number of modes")
    data = np.asarray(data, dtype=np.float64)
    if data.size != math.prod(row_shape) * math.prod(col_shape):
        raise ShapeMismatchError("matrix size does not match the given shapes")
    if not np.all(np.isfinite(data)):
        raise ValueError("input contains non-finite entries")
    d = len(row_shape)
    t = data.reshape(row_shape + col_shape)
    perm = [ax for k in range(d) for ax in (k, d + k)]
    t = t.transpose(perm)
    joint = tuple(m * n for m, n in zip(row_shape, col_shape))
    cores, capped = _tt_svd(np.ascontiguousarray(t), joint, policy)
    cores = [c.reshape(c.shape[0], m, n, c.shape[-1]) for c, m, n in zip(cores, row_shape, col_shape)]
    return TtMatrix._wrap(cores, capped)


def tt_to_full(t: TtTensor | TtMatrix, max_entries: int = DEFAULT_MAX_ENTRIES) -> np.ndarray:
    """Dense image: an ndarray of ``t.shape`` or a 2D matrix for operators."""
    if isinstance(t, TtMatrix):
        total = t.shape[0] * t.shape[1]
        if total > max_entries:
            raise MaterializationError(f"dense image would have {total} entries (limit {max_entries})")
        acc = np.ones((1, 1, 1))
        for c in t.cores:
            m0, n0, _ = acc.shape
            _, m, n, r = c.shape
            acc = np.tensordot(acc, c, axes=(2, 0))  # (m0, n0, m, n, r)
            acc = acc.transpose(0, 2, 1, 3, 4).reshape(m0 * m, n0 * n, r)
        return acc[:, :, 0]
    if t.size > max_entries:
        raise MaterializationError(f"dense image would have {t.size} entries (limit {max_entries})")
    acc = np.ones((1, 1))
    for c in t.cores:
        acc = (acc @ c.reshape(c.shape[0], -1)).reshape(-1, c.shape[-1])
    return acc.reshape(t.shape)


def tt_ones(shape) -> TtTensor:
    return TtTensor._wrap([np.ones((1, n, 1)) for n in _check_shape(shape)])


def tt_zeros(shape, col_shape=None):
    shape = _check_shape(shape)
    if col_shape is None:
        return TtTensor._wrap([np.zeros((1, n, 1)) for n in shape])
    col_shape = _check_shape(col_shape)
    return TtMatrix._wrap([np.zeros((1, m, n, 1)) for m, n in zip(shape, col_shape)])


def tt_eye(shape) -> TtMatrix:
    return TtMatrix._wrap([np.eye(n).reshape(1, n, n, 1) for n in _check_shape(shape)])


def tt_diag(t: TtTensor) -> TtMatrix:
    """Lift a tensor to the diagonal operator ``diag(vec(t))``; ranks are preserved."""
    cores = []
    for c in t.cores:
        r0, n, r1 = c.shape
        g = np.zeros((r0, n, n, r1))
        idx = np.arange(n)
        g[:, idx, idx, :] = c
        cores.append(g)
    return TtMatrix._wrap(cores, t.capped)


# -------------------------------------------------------------------- rounding

def _orthogonalize_right(flat):
    """Right-to-left QR sweep; cores 1..d-1 become right-orthonormal."""
    cores = list(flat)
    for k in range(len(cores) - 1, 0, -1):
        r0, n, r1 = cores[k].shape
        q, rr = np.linalg.qr(cores[k].reshape(r0, n * r1).T)
        cores[k] = q.T.reshape(q.shape[1], n, r1)
        cores[k - 1] = np.tensordot(cores[k - 1], rr.T, axes=(2, 0))
    return cores


def _round_flat(flat, policy: RoundingPolicy):
    d = len(flat)
    cores = _orthogonalize_right(flat)
    nrm = float(np.linalg.norm(cores[0]))
    if nrm < _ZERO_NORM:
        return None, False
    if d == 1:
        return cores, False
    delta = policy.epsilon * nrm / math.sqrt(d - 1)
    capped = False
    for k in range(d - 1):
        r0, n, r1 = cores[k].shape
        u, s, vt = np.linalg.svd(cores[k].reshape(r0 * n, r1), full_matrices=False)
        r, hit = _truncation_rank(s, delta, policy.max_rank)
        capped |= hit
        cores[k] = u[:, :r].reshape(r0, n, r)
        cores[k + 1] = np.tensordot(s[:r, None] * vt[:r], cores[k + 1], axes=(1, 0))
    return cores, capped


def tt_round(t, policy: RoundingPolicy | None = None):
    """TT-rounding: QR sweep right-to-left, truncated SVD sweep left-to-right.

    Guarantees ``||t - result||_F <= epsilon * ||t||_F`` unless ``max_rank``
    binds, in which case ``result.capped`` is set.
    """
    policy = policy or RoundingPolicy()
    cores, capped = _round_flat(t._flat(), policy)
    if cores is None:
        return _canonical_zero(t)
    return _rebuild(t, cores, capped or t.capped)


# ------------------------------------------------------------------ arithmetic

def _same_kind(a, b):
    if type(a) is not type(b):
        raise ShapeMismatchError(f"cannot combine {type(a).__name__} with {type(b).__name__}")
    if isinstance(a, TtMatrix):
        if a.row_shape != b.row_shape or a.col_shape != b.col_shape:
            raise ShapeMismatchError(f"operator shapes differ: {a} vs {b}")
    elif a.shape != b.shape:
        raise ShapeMismatchError(f"tensor shapes differ: {a.shape} vs {b.shape}")


def tt_add(a, b):
    """Exact sum; internal ranks become ``r_a + r_b``."""
    _same_kind(a, b)
    fa, fb = a._flat(), b._flat()
    d = len(fa)
    if d == 1:
        return _rebuild(a, [fa[0] + fb[0]], a.capped or b.capped)
    cores = []
    for k, (x, y) in enumerate(zip(fa, fb)):
        n = x.shape[1]
        if k == 0:
            cores.append(np.concatenate([x, y], axis=2))
        elif k == d - 1:
            cores.append(np.concatenate([x, y], axis=0))
        else:
            g = np.zeros((x.shape[0] + y.shape[0], n, x.shape[2] + y.shape[2]))
            g[:x.shape[0], :, :x.shape[2]] = x
            g[x.shape[0]:, :, x.shape[2]:] = y
            cores.append(g)
    return _rebuild(a, cores, a.capped or b.capped)


def tt_scale(t, c: float):
    c = float(c)
    if not math.isfinite(c):
        raise ValueError("scale factor must be finite")
    cores = list(t.cores)
    cores[0] = cores[0] * c
    return type(t)._wrap(cores, t.capped)


def tt_sub(a, b):
    return tt_add(a, tt_scale(b, -1.0))


def tt_hadamard(a: TtTensor, b: TtTensor, policy: RoundingPolicy | None = None) -> TtTensor:
    """Elementwise product; ranks multiply (then optionally rounded)."""
    _same_kind(a, b)
    fa, fb = a._flat(), b._flat()
    cores = []
    for x, y in zip(fa, fb):
        g = np.einsum("aib,cid->acibd", x, y)
        cores.append(g.reshape(x.shape[0] * y.shape[0], x.shape[1], x.shape[2] * y.shape[2]))
    out = _rebuild(a, cores, a.capped or b.capped)
    return tt_round(out, policy) if policy is not None else out


def tt_matvec(m: TtMatrix, v: TtTensor, policy: RoundingPolicy | None = None) -> TtTensor:
    """Operator applied to a tensor; ranks multiply before the optional rounding."""
    if not isinstance(m, TtMatrix) or not isinstance(v, TtTensor):
        raise ShapeMismatchError("tt_matvec expects (TtMatrix, TtTensor)")
    if m.col_shape != v.shape:
        raise ShapeMismatchError(f"operator columns {m.col_shape} do not match vector shape {v.shape}")
    cores = []
    for g, x in zip(m.cores, v.cores):
        w = np.einsum("aijb,cjd->acibd", g, x)
        cores.append(w.reshape(g.shape[0] * x.shape[0], g.shape[1], g.shape[3] * x.shape[2]))
    out = TtTensor._wrap(cores, m.capped or v.capped)
    return tt_round(out, policy) if policy is not None else out


def tt_matmul(a: TtMatrix, b: TtMatrix, policy: RoundingPolicy | None = None) -> TtMatrix:
    """Operator product ``a @ b``; ranks multiply before the optional rounding."""
    if not isinstance(a, TtMatrix) or not isinstance(b, TtMatrix):
        raise ShapeMismatchError("tt_matmul expects two TtMatrix operands")
    if a.col_shape != b.row_shape:
        raise ShapeMismatchError(f"inner shapes differ: {a.col_shape} vs {b.row_shape}")
    cores = []
    for x, y in zip(a.cores, b.cores):
        w = np.einsum("aijb,cjkd->acikbd", x, y)
        cores.append(w.reshape(x.shape[0] * y.shape[0], x.shape[1], y.shape[2], x.shape[3] * y.shape[3]))
    out = TtMatrix._wrap(cores, a.capped or b.capped)
    return tt_round(out, policy) if policy is not None else out


def tt_kron(a, b):
    """Kronecker product: ``a`` acts on the leading modes, ``b`` on the trailing ones."""
    if type(a) is not type(b):
        raise ShapeMismatchError("tt_kron operands must be of the same kind")
    return type(a)._wrap(list(a.cores) + list(b.cores), a.capped or b.capped)


def tt_sum(t: TtTensor) -> float:
    """Sum of all entries, contracting every core against a ones vector."""
    v = np.ones((1,))
    for c in t._flat():
        v = v @ c.sum(axis=1)
    return float(v[0])


def tt_dot(a, b) -> float:
    """Frobenius inner product ``<a, b>``."""
    _same_kind(a, b)
    v = np.ones((1, 1))
    for x, y in zip(a._flat(), b._flat()):
        v = np.einsum("ac,aib,cid->bd", v, x, y)
    return float(v[0, 0])


def tt_norm(t) -> float:
    """Frobenius norm from a left-orthogonalized copy (no dense expansion)."""
    cores = list(t._flat())
    for k in range(len(cores) - 1):
        r0, n, r1 = cores[k].shape
        q, rr = np.linalg.qr(cores[k].reshape(r0 * n, r1))
        cores[k + 1] = np.tensordot(rr, cores[k + 1], axes=(1, 0))
    return float(np.linalg.norm(cores[-1]))


# ---------------------------------------------------------------- quantization

def _bits(n: int) -> int:
    if n < 1 or n & (n - 1):
        raise ValueError(f"mode size {n} is not a power of two")
    return n.bit_length() - 1


def _split_exact(core: np.ndarray, sizes: Sequence[int]):
    """Split one ``(r, prod(sizes), r')`` core into a chain of cores, dropping only
    singular values at roundoff level."""
    r0, _, r1 = core.shape
    if len(sizes) == 1:
        return [core.reshape(r0, sizes[0], r1)]
    out = []
    rest = core.reshape(-1)
    r_prev = r0
    for k in range(len(sizes) - 1):
        mat = rest.reshape(r_prev * sizes[k], -1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        cut = s[0] * max(mat.shape) * np.finfo(float).eps if s.size and s[0] > 0 else 0.0
        r = max(1, int(np.count_nonzero(s > cut)))
        out.append(u[:, :r].reshape(r_prev, sizes[k], r))
        rest = s[:r, None] * vt[:r]
        r_prev = r
    out.append(rest.reshape(r_prev, sizes[-1], r1))
    return out


def quantize(t, base: int = 2):
    """Reshape every ``2**L`` mode into ``L`` binary modes (values unchanged)."""
    if base != 2:
        raise ValueError("only binary quantization is supported")
    cores = []
    if isinstance(t, TtMatrix):
        for c in t.cores:
            r0, m, n, r1 = c.shape
            lm, ln = _bits(m), _bits(n)
            if lm != ln:
                raise ValueError(f"row/column mode sizes {m} and {n} have different bit counts")
            if lm == 0:
                cores.append(c)
                continue
            g = c.reshape((r0,) + (2,) * lm + (2,) * ln + (r1,))
            perm = [0] + [ax for b in range(lm) for ax in (1 + b, 1 + lm + b)] + [1 + 2 * lm]
            g = g.transpose(perm).reshape(r0, 4 ** lm, r1)
            for s in _split_exact(g, [4] * lm):
                cores.append(s.reshape(s.shape[0], 2, 2, s.shape[-1]))
        return TtMatrix._wrap(cores, t.capped)
    for c in t.cores:
        L = _bits(c.shape[1])
        if L == 0:
            cores.append(c)
            continue
        cores.extend(_split_exact(c, [2] * L))
    return TtTensor._wrap(cores, t.capped)


def dequantize(t, shape, col_shape=None):
    """Inverse of :func:`quantize`: merge consecutive binary cores back into
    modes of the given sizes."""
    shape = _check_shape(shape)
    groups = [_bits(n) for n in shape]
    if isinstance(t, TtMatrix):
        col_shape = shape if col_shape is None else _check_shape(col_shape)
        if sum(groups) != t.d and not all(n == 1 for n in shape):
            raise ShapeMismatchError(f"{t.d} binary cores cannot form shape {shape}")
    elif sum(groups) != t.d and not all(n == 1 for n in shape):
        raise ShapeMismatchError(f"{t.d} binary cores cannot form shape {shape}")
    cores = []
    pos = 0
    for n, L in zip(shape, groups):
        chunk = t.cores[pos:pos + max(L, 1)]
        pos += max(L, 1)
        acc = chunk[0]
        for c in chunk[1:]:
            acc = np.tensordot(acc, c, axes=(acc.ndim - 1, 0))
        if isinstance(t, TtMatrix):
            r0, r1 = acc.shape[0], acc.shape[-1]
            Lc = len(chunk)
            perm = [0] + [1 + 2 * b for b in range(Lc)] + [2 + 2 * b for b in range(Lc)] + [1 + 2 * Lc]
            acc = acc.transpose(perm).reshape(r0, n, n, r1)
        else:
            acc = acc.reshape(acc.shape[0], n, acc.shape[-1])
        cores.append(acc)
    if pos != t.d:
        raise ShapeMismatchError(f"{t.d} binary cores cannot form shape {shape}")
    return type(t)._wrap(cores, t.capped)


# ----------------------------------------------------------------- diagnostics

def effective_rank(t) -> float:
    """Uniform rank whose storage equals ``sum_k r_{k-1} n_k r_k``.

    For operators the per-core mode size is ``m_k * n_k``.
    """
    r = t.ranks
    if isinstance(t, TtMatrix):
        n = [a * b for a, b in zip(t.row_shape, t.col_shape)]
    else:
        n = list(t.shape)
    d = len(n)
    storage = sum(r[k] * n[k] * r[k + 1] for k in range(d))
    if d == 1:
        return 1.0
    lin = r[0] * n[0] + r[d] * n[d - 1]
    quad = sum(n[1:d - 1])
    if quad == 0:
        return storage / lin
    return (math.sqrt(lin * lin + 4.0 * quad * storage) - lin) / (2.0 * quad)


def dump(t) -> str:
    """Structured text listing core shapes and ranks, for debugging."""
    kind = type(t).__name__
    lines = [f"{kind} d={t.d} ranks={list(t.ranks)} storage={t.storage} "
             f"effective_rank={effective_rank(t):.4f} capped={t.capped}"]
    for k, c in enumerate(t.cores):
        lines.append(f"  core[{k}] shape={list(c.shape)} norm={np.linalg.norm(c):.6e}")
    return "\n".join(lines)
