"""Diagonal operator algebra of the quantum CRF.

Basis ordering follows the Kronecker products left to right: in free mode the
``n`` label registers come first (position 1 most significant, mixed radix
``Q``), followed by ``n*K`` feature qubits.  Feature slot ``(k, i)`` sits at
flat position ``i*K + k`` (0-based), counted from the most significant bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from qcrf.crf import (Dataset, FeatureTable, DimensionError, _weight_vector,
                      check_labels)

DENSE_ORACLE_MAX = 2 ** 12
SCAN_MAX = 2 ** 16

CLAMPED = "clamped"
FREE = "free"


@dataclass(frozen=True)
class RegisterLayout:
    n: int
    K: int
    Q: int
    mode: str = CLAMPED

    def __post_init__(self):
        if self.mode not in (CLAMPED, FREE):
            raise ValueError(f"unknown register mode {self.mode!r}")
        if self.n < 1 or self.K < 1 or self.Q < 1:
            raise DimensionError(f"bad layout n={self.n} K={self.K} Q={self.Q}")

    @property
    def label_bits(self) -> int:
        return math.ceil(math.log2(self.Q)) if self.Q > 1 else 0

    @property
    def feature_qubits(self) -> int:
        return self.n * self.K

    @property
    def qubits(self) -> int:
        extra = self.n * self.label_bits if self.mode == FREE else 0
        return self.feature_qubits + extra

    @property
    def label_states(self) -> int:
        return self.Q ** self.n if self.mode == FREE else 1

    @property
    def dim(self) -> int:
        return self.label_states << self.feature_qubits

    def with_mode(self, mode: str) -> "RegisterLayout":
        return RegisterLayout(self.n, self.K, self.Q, mode)

    def slot(self, k: int, i: int) -> int:
        """Flat feature slot of 0-based ``(k, i)``."""
        if not (0 <= k < self.K and 0 <= i < self.n):
            raise IndexError(f"feature slot (k={k}, i={i}) outside K={self.K}, n={self.n}")
        return i * self.K + k

    def feature_part(self, index):
        return np.asarray(index) & ((1 << self.feature_qubits) - 1)

    def label_part(self, index):
        return np.asarray(index) >> self.feature_qubits

    def feature_bit(self, index, k: int, i: int):
        shift = self.feature_qubits - 1 - self.slot(k, i)
        return (np.asarray(index) >> shift) & 1

    def label_digits(self, index) -> np.ndarray:
        """``(j_1..j_n)`` for each index, shape ``(..., n)``; zeros in clamped mode."""
        lab = np.asarray(self.label_part(index))
        digits = np.empty(lab.shape + (self.n,), dtype=np.int64)
        for pos in range(self.n - 1, -1, -1):
            digits[..., pos] = lab % self.Q
            lab = lab // self.Q
        return digits

    def compose(self, labels, feature_bits) -> int:
        """Basis index of label digits ``labels`` and a feature-bit integer."""
        lab = 0
        for j in labels:
            lab = lab * self.Q + int(j)
        if self.mode == CLAMPED and lab != 0:
            raise DimensionError("clamped layout has no label registers")
        return (lab << self.feature_qubits) | int(feature_bits)

    def bits_to_int(self, bits: np.ndarray) -> int:
        """Pack a ``(K, n)`` 0/1 array into the feature-bit integer."""
        out = 0
        for i in range(self.n):
            for k in range(self.K):
                if bits[k, i]:
                    out |= 1 << (self.feature_qubits - 1 - self.slot(k, i))
        return out

    def all_indices(self) -> np.ndarray:
        return np.arange(self.dim, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class DiagonalOperator:
    """Real diagonal given as a vectorized function of basis indices.

    ``bounds`` brackets the spectrum; ``resolution`` is set when every entry
    is ``bounds[0]`` plus an integer multiple of it.
    """

    layout: RegisterLayout
    fn: Callable[[np.ndarray], np.ndarray]
    bounds: tuple = (-np.inf, np.inf)
    resolution: float | None = None
    name: str = "op"

    def __call__(self, index):
        vals = np.asarray(self.fn(np.asarray(index, dtype=np.int64)), dtype=float)
        return float(vals) if vals.ndim == 0 else vals

    def entry(self, index: int) -> float:
        return float(self(np.array([index]))[0])

    def diagonal(self) -> np.ndarray:
        if self.layout.dim > SCAN_MAX * 16:
            raise MemoryError(f"refusing to materialize a {self.layout.dim}-entry diagonal")
        return self(self.layout.all_indices())

    def _check(self, other):
        if other.layout != self.layout:
            raise DimensionError(f"layout mismatch: {self.layout} vs {other.layout}")

    def __add__(self, other):
        if isinstance(other, DiagonalOperator):
            self._check(other)
            res = _common_resolution(self, other)
            return DiagonalOperator(self.layout, lambda b: self.fn(b) + other.fn(b),
                                    (self.bounds[0] + other.bounds[0], self.bounds[1] + other.bounds[1]),
                                    res, f"({self.name}+{other.name})")
        c = float(other)
        return DiagonalOperator(self.layout, lambda b: self.fn(b) + c,
                                (self.bounds[0] + c, self.bounds[1] + c), self.resolution, self.name)

    def __mul__(self, other):
        if isinstance(other, DiagonalOperator):
            self._check(other)
            corners = [a * b for a in self.bounds for b in other.bounds]
            return DiagonalOperator(self.layout, lambda b: self.fn(b) * other.fn(b),
                                    (min(corners), max(corners)), None, f"{self.name}*{other.name}")
        c = float(other)
        lo, hi = sorted((self.bounds[0] * c, self.bounds[1] * c))
        res = None if self.resolution is None else abs(c) * self.resolution
        return DiagonalOperator(self.layout, lambda b: self.fn(b) * c, (lo, hi), res, self.name)

    __radd__ = __add__
    __rmul__ = __mul__

    def exp(self) -> "DiagonalOperator":
        lo, hi = self.bounds
        return DiagonalOperator(self.layout, lambda b: np.exp(self.fn(b)),
                                (math.exp(lo) if lo > -np.inf else 0.0, math.exp(hi)),
                                None, f"exp({self.name})")

    def dump(self) -> str:
        """``index<TAB>value`` lines for small layouts."""
        if self.layout.dim > DENSE_ORACLE_MAX:
            raise ValueError(f"dump limited to D <= {DENSE_ORACLE_MAX}, got {self.layout.dim}")
        diag = self.diagonal()
        return "".join(f"{b}\t{v:.17g}\n" for b, v in enumerate(diag))


def _common_resolution(a, b):
    if a.resolution is None or b.resolution is None:
        return None
    return a.resolution if a.resolution == b.resolution else None


def constant(layout: RegisterLayout, value: float) -> DiagonalOperator:
    value = float(value)
    return DiagonalOperator(layout, lambda b: np.full(np.shape(b), value),
                            (value, value), 1.0 if value == int(value) else None, f"{value:g}")


@dataclass(frozen=True, eq=False)
class Projector:
    """Diagonal 0/1 operator; ``support_fn`` lists its 1-entries without scanning."""

    layout: RegisterLayout
    indicator_fn: Callable[[np.ndarray], np.ndarray]
    support_fn: Callable[[], np.ndarray] | None = None
    name: str = "P"
    _cache: dict = field(default_factory=dict, repr=False)

    def indicator(self, index):
        vals = np.asarray(self.indicator_fn(np.asarray(index, dtype=np.int64)), dtype=np.int8)
        return int(vals) if vals.ndim == 0 else vals

    def support(self) -> np.ndarray:
        if "support" not in self._cache:
            if self.support_fn is not None:
                sup = np.sort(np.asarray(self.support_fn(), dtype=np.int64))
            else:
                if self.layout.dim > SCAN_MAX * 16:
                    raise MemoryError("projector support scan too large")
                idx = self.layout.all_indices()
                sup = idx[self.indicator(idx) == 1]
            self._cache["support"] = sup
        return self._cache["support"]

    @property
    def rank(self) -> int:
        return int(self.support().size)

    def as_operator(self) -> DiagonalOperator:
        return DiagonalOperator(self.layout, lambda b: self.indicator_fn(b).astype(float),
                                (0.0, 1.0), 1.0, self.name)


def identity_projector(layout: RegisterLayout) -> Projector:
    return Projector(layout, lambda b: np.ones(np.shape(b), dtype=np.int8),
                     lambda: layout.all_indices(), "I")


def zero_projector(layout: RegisterLayout) -> Projector:
    return Projector(layout, lambda b: np.zeros(np.shape(b), dtype=np.int8),
                     lambda: np.empty(0, dtype=np.int64), "0")


def sigma_z(layout: RegisterLayout, k: int, i: int) -> DiagonalOperator:
    """Pauli-Z on feature slot ``(k, i)`` (0-based), identity elsewhere."""
    layout.slot(k, i)
    return DiagonalOperator(layout, lambda b: 1.0 - 2.0 * layout.feature_bit(b, k, i),
                            (-1.0, 1.0), 2.0, f"Z[{k},{i}]")


def sigma_sum(layout: RegisterLayout, k: int) -> DiagonalOperator:
    """``sum_i Z[k, i]``: the derivative of the Hamiltonian with respect to ``w_k``."""
    if not 0 <= k < layout.K:
        raise IndexError(f"feature index {k} outside 0..{layout.K - 1}")

    def fn(b):
        out = np.zeros(np.shape(b))
        for i in range(layout.n):
            out += 1.0 - 2.0 * layout.feature_bit(b, k, i)
        return out
    n = float(layout.n)
    return DiagonalOperator(layout, fn, (-n, n), 1.0, f"dH/dw{k}")


def build_h(layout: RegisterLayout, w) -> DiagonalOperator:
    """``sum_{i,k} w_k Z[k, i]``; label registers (free mode) act as identity."""
    w = _weight_vector(w, layout.K)
    nq = layout.feature_qubits
    shifts = np.array([nq - 1 - layout.slot(k, i) for i in range(layout.n) for k in range(layout.K)])
    coeff = np.array([w[k] for i in range(layout.n) for k in range(layout.K)])

    def fn(b):
        b = np.asarray(b)
        bits = (b[..., None] >> shifts) & 1
        return (coeff * (1.0 - 2.0 * bits)).sum(axis=-1)
    bound = layout.n * float(np.abs(w).sum())
    return DiagonalOperator(layout, fn, (-bound, bound), None, "H")


def _target_bits(table: FeatureTable, labels) -> np.ndarray:
    """``(K, n)`` bits ``(1 - f_k(x_i, y_i)) / 2``."""
    y = check_labels(table, labels)
    f = table.values[:, np.arange(table.n), y]
    return ((1 - f) // 2).astype(np.int64)


def build_lambda_xy(table: FeatureTable, labels) -> Projector:
    layout = RegisterLayout(table.n, table.K, table.Q, CLAMPED)
    target = layout.bits_to_int(_target_bits(table, labels))
    return Projector(layout, lambda b: (np.asarray(b) == target).astype(np.int8),
                     lambda: np.array([target], dtype=np.int64), "Lxy")


def build_lambda_x(table: FeatureTable) -> Projector:
    """Free-mode projector: label register ``i`` selects the feature pattern at position ``i``."""
    layout = RegisterLayout(table.n, table.K, table.Q, FREE)
    # pattern[i, j] = feature bits of position i when it carries label j
    pattern = np.zeros((table.n, table.Q), dtype=np.int64)
    for i in range(table.n):
        for j in range(table.Q):
            for k in range(table.K):
                if table.values[k, i, j] == -1:
                    pattern[i, j] |= 1 << (layout.feature_qubits - 1 - layout.slot(k, i))

    def indicator(b):
        b = np.asarray(b)
        digits = layout.label_digits(b)
        expected = np.zeros(b.shape, dtype=np.int64)
        for i in range(table.n):
            expected |= pattern[i][digits[..., i]]
        return (layout.feature_part(b) == expected).astype(np.int8)

    def support():
        from itertools import product
        return np.array([layout.compose(js, np.bitwise_or.reduce(pattern[np.arange(table.n), list(js)]))
                         for js in product(range(table.Q), repeat=table.n)], dtype=np.int64)
    return Projector(layout, indicator, support, "Lx")


def trace_lambda_exp(P: Projector, H: DiagonalOperator, factor: DiagonalOperator | None = None) -> float:
    """``Tr(P e^H)`` or ``Tr(P e^H F)`` summed over the projector's support."""
    if H.layout != P.layout or (factor is not None and factor.layout != P.layout):
        raise DimensionError("projector and operators must share a layout")
    sup = P.support()
    if sup.size == 0:
        return 0.0
    h = np.asarray(H(sup), dtype=float)
    top = h.max()
    terms = np.exp(h - top)
    if factor is not None:
        terms = terms * factor(sup)
    return math.exp(top) * math.fsum(terms)


@dataclass(eq=False)
class QcrfInstance:
    """One labeled sequence with its Hamiltonians and projectors."""

    table: FeatureTable
    labels: tuple
    w: np.ndarray

    def __post_init__(self):
        self.w = _weight_vector(self.w, self.table.K).copy()
        self.labels = tuple(int(j) for j in check_labels(self.table, self.labels))
        self.clamped = RegisterLayout(self.table.n, self.table.K, self.table.Q, CLAMPED)
        self.free = self.clamped.with_mode(FREE)
        self.H0 = build_h(self.clamped, self.w)
        self.Hn = build_h(self.free, self.w)
        self.Lxy = build_lambda_xy(self.table, self.labels)
        self.Lx = build_lambda_x(self.table)

    def dH0(self, k: int) -> DiagonalOperator:
        return sigma_sum(self.clamped, k)

    def dHn(self, k: int) -> DiagonalOperator:
        return sigma_sum(self.free, k)


def quantum_probability(inst: QcrfInstance, y=None) -> float:
    """``Tr(Lxy e^H0) / Tr(Lx e^Hn)`` for labeling ``y`` (defaults to the instance's labels)."""
    if y is not None and tuple(y) != inst.labels:
        inst = QcrfInstance(inst.table, y, inst.w)
    num = trace_lambda_exp(inst.Lxy, inst.H0)
    den = trace_lambda_exp(inst.Lx, inst.Hn)
    assert den > 0
    return num / den


def clamped_average(inst: QcrfInstance, k: int) -> float:
    return trace_lambda_exp(inst.Lxy, inst.H0, inst.dH0(k)) / trace_lambda_exp(inst.Lxy, inst.H0)


def free_average(inst: QcrfInstance, k: int) -> float:
    return trace_lambda_exp(inst.Lx, inst.Hn, inst.dHn(k)) / trace_lambda_exp(inst.Lx, inst.Hn)


def quantum_gradient_exact(ds: Dataset, w) -> np.ndarray:
    out = []
    for r in ds.records:
        inst = QcrfInstance(r.table, r.labels, w)
        out.append(-r.weight * np.array([clamped_average(inst, k) - free_average(inst, k)
                                         for k in range(r.table.K)]))
    return np.sum(np.stack(out), axis=0)


def dense_z(nq: int, slot: int) -> np.ndarray:
    """Dense matrix I x .. x Z x .. x I on ``nq`` qubits; test oracle only."""
    if (1 << nq) > DENSE_ORACLE_MAX:
        raise ValueError("dense oracle limited to 12 qubits")
    m = np.array([[1.0]])
    for s in range(nq):
        m = np.kron(m, np.diag([1.0, -1.0]) if s == slot else np.eye(2))
    return m
