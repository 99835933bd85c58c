"""Trace and gradient estimation on top of the register simulator."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from qcrf.crf import Dataset
from qcrf.model import DiagonalOperator, QcrfInstance, constant
from qcrf.sim.state import (ConfigurationError, ContractViolation, PrecisionConfig,
                            ancilla_zero_probability, collapse_ancilla,
                            controlled_rotation, load_lambda, prepare_uniform,
                            projector_probability)

TRACE_KINDS = ("Lx_dHn", "Lx_Hn", "Lxy_dH0", "Lxy_H0")
STARVATION_FACTOR = 50


class PostSelectionStarved(RuntimeError):
    pass


@dataclass(frozen=True)
class SignSplit:
    positive_part: DiagonalOperator
    negative_part: DiagonalOperator

    @classmethod
    def of(cls, op: DiagonalOperator) -> "SignSplit":
        lo, hi = op.bounds
        pos = DiagonalOperator(op.layout, lambda b: np.maximum(op.fn(b), 0.0),
                               (0.0, max(hi, 0.0)), op.resolution, f"{op.name}+")
        neg = DiagonalOperator(op.layout, lambda b: np.maximum(-op.fn(b), 0.0),
                               (0.0, max(-lo, 0.0)), op.resolution, f"{op.name}-")
        return cls(pos, neg)

    def reconstruct(self, index):
        return self.positive_part(index) - self.negative_part(index)


@dataclass(frozen=True)
class TraceEstimate:
    which: str
    k: int | None
    value: float
    shots: int
    postselect_attempts: int
    postselect_successes: int
    standard_error: float
    seed: int
    r: int
    p0_empirical: float
    p0_analytic: float
    parts: tuple = field(default=(), repr=False)

    def csv_row(self) -> list:
        return [self.which, "" if self.k is None else self.k, self.r, self.shots, self.seed,
                _fmt(self.value), _fmt(self.standard_error),
                _fmt(self.p0_empirical), _fmt(self.p0_analytic)]


CSV_HEADER = ["which", "k", "r", "m", "seed", "estimate", "std_error", "p0_empirical", "p0_analytic"]


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def default_rotation_constant(D: int, nK: int, w, epsilon: float) -> float | None:
    """``sqrt(D (1 - eps) / (D - nK max|w_k|))``, or None when the denominator is not positive."""
    den = D - nK * float(np.max(np.abs(w)))
    if den <= 0:
        return None
    return math.sqrt(D * (1.0 - epsilon) / den)


def rotation_constant(cfg: PrecisionConfig, H: DiagonalOperator, mu: DiagonalOperator, w) -> float:
    """``cfg.C`` if set, else the default constant capped so that ``C sqrt(lambda) <= 1``.

    The cap uses the spectral brackets of ``H`` and ``mu``, not the simulated
    amplitudes, so it is what a circuit designer could compute in advance.
    """
    if cfg.C is not None:
        return cfg.C
    lam_max = max(abs(mu.bounds[0]), abs(mu.bounds[1])) * math.exp(H.bounds[1])
    lam_max += cfg.fixed.ulp
    cap = 1.0 / math.sqrt(lam_max)
    layout = H.layout
    base = default_rotation_constant(layout.dim, layout.feature_qubits, w, cfg.epsilon)
    return cap if base is None else min(base, cap)


def _operands(inst: QcrfInstance, which: str, k: int | None):
    if which not in TRACE_KINDS:
        raise ValueError(f"unknown trace kind {which!r}; expected one of {TRACE_KINDS}")
    free = which.startswith("Lx_")
    P = inst.Lx if free else inst.Lxy
    H = inst.Hn if free else inst.H0
    if which.endswith("dHn") or which.endswith("dH0"):
        if k is None:
            raise ValueError(f"{which} needs a feature index k")
        mu = inst.dHn(k) if free else inst.dH0(k)
    else:
        mu = None
    return P, H, mu


def prepare_phi(H: DiagonalOperator, mu: DiagonalOperator, cfg: PrecisionConfig, C: float):
    """Prepare, load lambda, rotate and post-select once; returns (post-selected |phi>, analytic P(0), lambda state)."""
    state = prepare_uniform(H.layout)
    load_lambda(state, H, mu, cfg)
    state.check_norm()
    loaded = state.copy()
    rotated = controlled_rotation(state, C)
    rotated.check_norm()
    p0 = ancilla_zero_probability(rotated)
    if p0 <= 0:
        return None, 0.0, loaded
    phi = collapse_ancilla(rotated, 0)
    load_lambda(phi, H, mu, cfg, inverse=True)
    if any(np.any(v) for v in phi.regs.values()):
        raise ContractViolation("precision registers not cleared after post-selection")
    return phi, p0, loaded


def _starved(p0: float, m: int, rng: np.random.Generator) -> tuple[bool, int]:
    """Whether any of ``m`` repeat-until-success loops exhausts its attempt budget."""
    budget = math.ceil(STARVATION_FACTOR / p0) if p0 > 0 else STARVATION_FACTOR
    if p0 <= 0:
        return True, budget
    one_state = (1.0 - p0) ** budget
    p_any = -math.expm1(m * math.log1p(-one_state)) if one_state < 1 else 1.0
    return bool(rng.random() < p_any), budget


@dataclass(frozen=True)
class _Part:
    C: float
    p0: float
    p_lambda: float
    D: int


def _part_setup(inst, P, H, mu, cfg) -> _Part:
    C = rotation_constant(cfg, H, mu, inst.w)
    phi, p0, _ = prepare_phi(H, mu, cfg, C)
    p_lambda = 0.0 if phi is None else min(max(projector_probability(phi, P), 0.0), 1.0)
    return _Part(C, p0, p_lambda, H.layout.dim)


def _estimate_part(part: _Part, cfg, m, rng, which, k, seed) -> TraceEstimate:
    starved, budget = _starved(part.p0, m, rng)
    if starved:
        raise PostSelectionStarved(
            f"post-selection starved for {which} k={k}: no success within {budget} attempts")
    # attempts for m successes; per-state starvation was drawn above
    attempts = m + int(rng.negative_binomial(m, part.p0))
    hits = int(rng.binomial(m, part.p_lambda))
    return _finish(part, cfg, m, attempts, hits, which, k, seed)


def _finish(part, cfg, m, attempts, hits, which, k, seed) -> TraceEstimate:
    p0_hat = m / attempts
    mean = hits / m
    pref = p0_hat * part.D / (part.C * part.C)
    value = pref * mean
    var = pref ** 2 * mean * (1 - mean) / m + value ** 2 * (1 - p0_hat) / m
    return TraceEstimate(which, k, value, m, attempts, m, math.sqrt(var), seed, cfg.r,
                         p0_hat, part.p0)


def estimate_trace(inst: QcrfInstance, which: str, k: int | None = None,
                   cfg: PrecisionConfig | None = None, m: int = 10_000, seed: int = 0,
                   split: bool = True) -> TraceEstimate:
    """Sampled ``Tr(P e^H mu)`` from ``m`` post-selected states and ``m`` projector shots.

    Derivative kinds run the circuit on the positive and negative parts of
    ``dH/dw_k`` and subtract; ``split=False`` runs a single pass and requires
    ``mu >= 0`` on every branch.
    """
    cfg = cfg or PrecisionConfig()
    if m < 1:
        raise ValueError("m must be >= 1")
    P, H, parts = _parts(inst, which, k, split)
    ests = [_zero_estimate(cfg, m, which, k, seed) if part.bounds == (0.0, 0.0) else
            _estimate_part(_part_setup(inst, P, H, part, cfg), cfg, m,
                           np.random.default_rng(np.random.SeedSequence([seed, j])),
                           which, k, seed)
            for j, part in enumerate(parts)]
    return _combine(ests, which, k, m, seed, cfg)


def _zero_estimate(cfg, m, which, k, seed) -> TraceEstimate:
    # an identically zero sign part contributes exactly nothing and needs no circuit run
    return TraceEstimate(which, k, 0.0, m, m, m, 0.0, seed, cfg.r, 1.0, 1.0)


def _parts(inst, which, k, split):
    P, H, mu = _operands(inst, which, k)
    if mu is None:
        parts = [constant(H.layout, 1.0)]
    elif split:
        s = SignSplit.of(mu)
        parts = [s.positive_part, s.negative_part]
    else:
        if mu.bounds[0] < 0 and np.any(mu(H.layout.all_indices()) < 0):
            raise ConfigurationError(f"{mu.name} has negative entries; use the sign split")
        parts = [mu]
    return P, H, parts


def _combine(ests, which, k, m, seed, cfg) -> TraceEstimate:
    if len(ests) == 1:
        return ests[0]
    pos, neg = ests
    attempts = pos.postselect_attempts + neg.postselect_attempts
    analytic = 2.0 / (1.0 / pos.p0_analytic + 1.0 / neg.p0_analytic)
    return TraceEstimate(which, k, pos.value - neg.value, m, attempts, 2 * m,
                         math.hypot(pos.standard_error, neg.standard_error), seed, cfg.r,
                         2 * m / attempts, analytic, (pos, neg))


def derive_seed(seed: int, *key: int) -> int:
    """Child seed (u64) for one cell; reproducible in isolation from ``(seed, key)``."""
    return int(np.random.SeedSequence([seed, *key]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class GradientEstimate:
    gradient: np.ndarray
    stderr: np.ndarray
    traces: tuple  # per record: (Lxy_H0, Lx_Hn, [Lxy_dH0 per k], [Lx_dHn per k])


def estimate_gradient(ds: Dataset, w, cfg: PrecisionConfig | None = None, m: int = 10_000,
                      seed: int = 0) -> GradientEstimate:
    """dL/dw from four sampled traces per record and feature."""
    cfg = cfg or PrecisionConfig()
    K = ds.K
    grad, var, traces = np.zeros(K), np.zeros(K), []
    for ridx, rec in enumerate(ds.records):
        inst = QcrfInstance(rec.table, rec.labels, w)
        kind = TRACE_KINDS.index
        b = estimate_trace(inst, "Lxy_H0", None, cfg, m, derive_seed(seed, ridx, kind("Lxy_H0")))
        d = estimate_trace(inst, "Lx_Hn", None, cfg, m, derive_seed(seed, ridx, kind("Lx_Hn")))
        a_list, c_list = [], []
        for k in range(K):
            a = estimate_trace(inst, "Lxy_dH0", k, cfg, m, derive_seed(seed, ridx, kind("Lxy_dH0"), k))
            c = estimate_trace(inst, "Lx_dHn", k, cfg, m, derive_seed(seed, ridx, kind("Lx_dHn"), k))
            a_list.append(a)
            c_list.append(c)
            clamped = a.value / b.value
            free = c.value / d.value
            grad[k] += -rec.weight * (clamped - free)
            var[k] += rec.weight ** 2 * (_ratio_var(a, b) + _ratio_var(c, d))
        traces.append((b, d, tuple(a_list), tuple(c_list)))
    return GradientEstimate(grad, np.sqrt(var), tuple(traces))


def _ratio_var(num: TraceEstimate, den: TraceEstimate) -> float:
    # first-order propagation for num/den with independent estimates
    return ((num.standard_error / den.value) ** 2
            + (num.value * den.standard_error / den.value ** 2) ** 2)


def quantum_backend(cfg: PrecisionConfig | None = None, m: int = 10_000, seed: int = 0, **_):
    """Gradient callable for :func:`qcrf.crf.train`; every call draws a fresh seed."""
    counter = itertools.count()
    return lambda ds, w: estimate_gradient(ds, w, cfg, m, derive_seed(seed, next(counter))).gradient


def trace_sample_path(inst: QcrfInstance, which: str, k: int | None = None,
                      cfg: PrecisionConfig | None = None, m: int = 340, seed: int = 0) -> np.ndarray:
    """Running estimate after each of ``m`` accumulated states; ``out[i]`` uses states ``0..i``.

    Each state costs a geometric number of post-selection attempts and
    yields one projector shot. Entries before the first post-selection of a
    starved part are NaN.
    """
    cfg = cfg or PrecisionConfig()
    P, H, parts = _parts(inst, which, k, True)
    total = np.zeros(m)
    for j, mu in enumerate(parts):
        if mu.bounds == (0.0, 0.0):
            continue
        part = _part_setup(inst, P, H, mu, cfg)
        if part.p0 <= 0:
            return np.full(m, np.nan)
        # separate streams keep out[:i] independent of m
        try_ss, hit_ss = np.random.SeedSequence([seed, j, 1]).spawn(2)
        tries = np.random.default_rng(try_ss).geometric(part.p0, size=m)
        hits = np.random.default_rng(hit_ss).random(m) < part.p_lambda
        # value_i = p0_hat * D / C^2 * hits_i / i with p0_hat = i / attempts_i
        value = part.D / part.C ** 2 * np.cumsum(hits) / np.cumsum(tries)
        total += value if j == 0 else -value
    return total


def gradient_sample_path(ds: Dataset, w, cfg: PrecisionConfig | None = None, m: int = 340,
                         seed: int = 0) -> np.ndarray:
    """Gradient estimate after each accumulated state, shape ``(m, K)``; NaN where a
    denominator trace is still zero."""
    cfg = cfg or PrecisionConfig()
    K = ds.K
    out = np.zeros((m, K))
    kind = TRACE_KINDS.index
    with np.errstate(divide="ignore", invalid="ignore"):
        for ridx, rec in enumerate(ds.records):
            inst = QcrfInstance(rec.table, rec.labels, w)
            b = trace_sample_path(inst, "Lxy_H0", None, cfg, m, derive_seed(seed, ridx, kind("Lxy_H0")))
            d = trace_sample_path(inst, "Lx_Hn", None, cfg, m, derive_seed(seed, ridx, kind("Lx_Hn")))
            b = np.where(b == 0, np.nan, b)
            d = np.where(d == 0, np.nan, d)
            for kk in range(K):
                a = trace_sample_path(inst, "Lxy_dH0", kk, cfg, m, derive_seed(seed, ridx, kind("Lxy_dH0"), kk))
                c = trace_sample_path(inst, "Lx_dHn", kk, cfg, m, derive_seed(seed, ridx, kind("Lx_dHn"), kk))
                out[:, kk] += -rec.weight * (a / b - c / d)
    return out
