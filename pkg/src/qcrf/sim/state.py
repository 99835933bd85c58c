"""Branch-wise register simulator for the trace-estimation circuit.

A :class:`RegisterState` stores only reachable branches: parallel arrays of
main-register index, named integer registers, ancilla bit and amplitude.
Every gate here except the two measurements is a permutation of basis
states or (for the rotation) a per-branch 2x2 unitary, so the state never
needs a dense vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from qcrf.model import DiagonalOperator, Projector, RegisterLayout

SIM_CAP = 2 ** 16
NORM_TOL = 1e-10


class ContractViolation(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


class FixedPointOverflow(ArithmeticError):
    pass


@dataclass(frozen=True)
class PhaseMap:
    """Affine map between an eigenvalue bracket and ``r``-bit register codes.

    With ``offset = 0`` code ``c`` decodes to ``lo + c * step`` exactly (used
    when the spectrum sits on a grid the register can hold). With
    ``offset = 0.5`` the bracket is cut into ``2^r`` cells and each code
    decodes to its cell centre, so the error is at most ``range * 2^-(r+1)``.
    """

    lo: float
    step: float
    r: int
    offset: float = 0.0

    @classmethod
    def for_operator(cls, op: DiagonalOperator, r: int) -> "PhaseMap":
        lo, hi = op.bounds
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise ConfigurationError(f"operator {op.name} has no finite spectral bracket")
        span = hi - lo
        if span == 0:
            return cls(lo, 1.0, r)
        res = op.resolution
        if res is not None and span / res <= (1 << r) - 1 and float(span / res).is_integer():
            return cls(lo, float(res), r)
        return cls(lo, span / (1 << r), r, 0.5)

    @property
    def scale(self) -> float:
        """Phase per unit eigenvalue: ``phase = (x - shift) * scale`` lands in ``[0, 1)``."""
        return 1.0 / (self.step * (1 << self.r))

    @property
    def shift(self) -> float:
        return self.lo

    def code(self, x) -> np.ndarray:
        t = (np.asarray(x, dtype=float) - self.lo) / self.step
        top = 1 << self.r
        if self.offset:
            slack = 1e-9 * top
            if np.any((t < -slack) | (t > top + slack)):
                raise ContractViolation("eigenvalue outside the phase-estimation bracket")
            return np.clip(np.floor(t), 0, top - 1).astype(np.int64)
        c = np.rint(t).astype(np.int64)
        if np.any((c < 0) | (c >= top)):
            raise ContractViolation("eigenvalue outside the phase-estimation bracket")
        return c

    def decode(self, code) -> np.ndarray:
        return self.lo + (np.asarray(code, dtype=float) + self.offset) * self.step

    @property
    def max_error(self) -> float:
        return 0.5 * self.step


@dataclass(frozen=True)
class FixedPoint:
    """Signed fixed-point with ``int_bits`` integer and ``frac_bits`` fractional bits."""

    int_bits: int
    frac_bits: int

    def encode(self, x, branches=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        c = np.rint(x * (1 << self.frac_bits)).astype(np.int64)  # rint: ties to even
        limit = 1 << (self.int_bits + self.frac_bits)
        bad = np.abs(c) >= limit
        if np.any(bad):
            first = int(np.flatnonzero(bad)[0])
            where = int(branches[first]) if branches is not None else first
            raise FixedPointOverflow(
                f"fixed-point saturation on branch {where}: value {float(x.flat[first]):.6g} "
                f"needs more than {self.int_bits} integer bits")
        return c

    def decode(self, code) -> np.ndarray:
        return np.asarray(code, dtype=float) / (1 << self.frac_bits)

    @property
    def ulp(self) -> float:
        return 1.0 / (1 << self.frac_bits)


@dataclass(frozen=True)
class PrecisionConfig:
    r: int = 12
    int_bits: int = 8
    C: float | None = None
    epsilon: float = 0.1

    def __post_init__(self):
        if not 4 <= self.r <= 24:
            raise ConfigurationError(f"precision r={self.r} outside [4, 24]")
        if self.C is not None and not self.C > 0:
            raise ConfigurationError("rotation constant C must be positive")
        if not 0 < self.epsilon < 1:
            raise ConfigurationError("epsilon must lie in (0, 1)")

    @property
    def fixed(self) -> FixedPoint:
        return FixedPoint(self.int_bits, self.r)

    def phase_map(self, op: DiagonalOperator) -> PhaseMap:
        return PhaseMap.for_operator(op, self.r)


@dataclass
class RegisterState:
    layout: RegisterLayout
    main: np.ndarray
    amp: np.ndarray
    regs: dict = field(default_factory=dict)
    ancilla: np.ndarray | None = None
    encodings: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("reg2", "reg3"):
            self.regs.setdefault(name, np.zeros_like(self.main))
        if self.ancilla is None:
            self.ancilla = np.zeros(self.main.shape, dtype=np.int8)

    @property
    def branches(self) -> int:
        return self.main.size

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.amp) ** 2)))

    def copy(self) -> "RegisterState":
        return RegisterState(self.layout, self.main.copy(), self.amp.copy(),
                             {k: v.copy() for k, v in self.regs.items()},
                             self.ancilla.copy(), dict(self.encodings))

    def reg(self, name: str) -> np.ndarray:
        if name not in self.regs:
            self.regs[name] = np.zeros_like(self.main)
        return self.regs[name]

    def keys(self):
        return list(zip(self.main.tolist(), self.regs["reg2"].tolist(),
                        self.regs["reg3"].tolist(), self.ancilla.tolist()))

    def as_dict(self) -> dict:
        """``(main, reg2, reg3, ancilla) -> amplitude`` (scratch registers must be clear)."""
        for name, v in self.regs.items():
            if name not in ("reg2", "reg3") and np.any(v):
                raise ContractViolation(f"scratch register {name} is not clear")
        return dict(zip(self.keys(), self.amp.tolist()))

    def clear(self, name: str) -> bool:
        return not np.any(self.regs.get(name, 0))

    def check_norm(self):
        nrm = self.norm()
        if abs(nrm - 1.0) > NORM_TOL:
            raise ContractViolation(f"state norm drifted to {nrm!r}")


def prepare_uniform(layout: RegisterLayout, cap: int = SIM_CAP) -> RegisterState:
    """Hadamard layer on the main register: amplitude ``1/sqrt(D)`` on every branch."""
    D = layout.dim
    if D > cap:
        raise ConfigurationError(f"D = {D} branches exceeds simulation cap {cap}")
    main = np.arange(D, dtype=np.int64)
    return RegisterState(layout, main, np.full(D, 1.0 / math.sqrt(D), dtype=complex))


def phase_estimate(state: RegisterState, op: DiagonalOperator, target: str,
                   cfg: PrecisionConfig, inverse: bool = False) -> RegisterState:
    """Write (or with ``inverse``, erase) the eigenvalue code of ``op`` into ``target``.

    Basis states are eigenvectors of a diagonal observable, so the code is
    deterministic per branch; there is no phase-estimation smearing.
    """
    if op.layout != state.layout:
        raise ContractViolation("operator layout differs from the state layout")
    pm = cfg.phase_map(op)
    codes = pm.code(op(state.main))
    reg = state.reg(target)
    if inverse:
        if state.encodings.get(target) != pm or np.any(reg != codes):
            raise ContractViolation(f"register {target} does not hold the codes of {op.name}")
        state.regs[target] = np.zeros_like(reg)
        del state.encodings[target]
    else:
        if np.any(reg != 0):
            raise ContractViolation(f"phase estimation target {target} is not zero")
        state.regs[target] = codes
        state.encodings[target] = pm
    return state


def decoded(state: RegisterState, name: str) -> np.ndarray:
    enc = state.encodings.get(name)
    if enc is None:
        raise ContractViolation(f"register {name} holds no encoded value")
    return enc.decode(state.regs[name])


def apply_exp(state: RegisterState, source: str, cfg: PrecisionConfig,
              target: str = "exp", inverse: bool = False) -> RegisterState:
    """``|a>|c> -> |a>|c + e^a>`` in fixed point; ``source`` is left untouched."""
    fx = cfg.fixed
    codes = fx.encode(np.exp(decoded(state, source)), state.main)
    return _accumulate(state, target, codes, fx, inverse)


def apply_multiply(state: RegisterState, a: str, b: str, cfg: PrecisionConfig,
                   target: str = "lam", inverse: bool = False) -> RegisterState:
    """``|a>|b>|c> -> |a>|b>|c + ab>`` with the product rounded to the fixed-point grid."""
    fx = cfg.fixed
    codes = fx.encode(decoded(state, a) * decoded(state, b), state.main)
    return _accumulate(state, target, codes, fx, inverse)


def _accumulate(state, target, codes, fx, inverse):
    reg = state.reg(target)
    if state.encodings.get(target, fx) != fx:
        raise ContractViolation(f"register {target} holds a different encoding")
    new = reg - codes if inverse else reg + codes
    fx.encode(fx.decode(new), state.main)  # saturation check on the accumulated value
    state.regs[target] = new
    if np.any(new):
        state.encodings[target] = fx
    else:
        state.encodings.pop(target, None)
    return state


def swap_registers(state: RegisterState, a: str, b: str) -> RegisterState:
    ra, rb = state.reg(a), state.reg(b)
    state.regs[a], state.regs[b] = rb, ra
    ea, eb = state.encodings.pop(a, None), state.encodings.pop(b, None)
    if eb is not None:
        state.encodings[a] = eb
    if ea is not None:
        state.encodings[b] = ea
    return state


def load_lambda(state: RegisterState, H: DiagonalOperator, mu: DiagonalOperator,
                cfg: PrecisionConfig, inverse: bool = False) -> RegisterState:
    """Leave ``lambda = mu * e^E`` in ``reg2`` with every other register clear.

    Forward: PE(H) -> reg2, PE(mu) -> reg3, EXP(reg2) -> exp, exp*reg3 -> lam,
    then uncompute exp, reg3 and reg2 and swap lam into reg2.
    """
    if not inverse:
        phase_estimate(state, H, "reg2", cfg)
        phase_estimate(state, mu, "reg3", cfg)
        apply_exp(state, "reg2", cfg, "exp")
        apply_multiply(state, "exp", "reg3", cfg, "lam")
        apply_exp(state, "reg2", cfg, "exp", inverse=True)
        phase_estimate(state, mu, "reg3", cfg, inverse=True)
        phase_estimate(state, H, "reg2", cfg, inverse=True)
        swap_registers(state, "reg2", "lam")
    else:
        swap_registers(state, "reg2", "lam")
        phase_estimate(state, H, "reg2", cfg)
        phase_estimate(state, mu, "reg3", cfg)
        apply_exp(state, "reg2", cfg, "exp")
        apply_multiply(state, "exp", "reg3", cfg, "lam", inverse=True)
        apply_exp(state, "reg2", cfg, "exp", inverse=True)
        phase_estimate(state, mu, "reg3", cfg, inverse=True)
        phase_estimate(state, H, "reg2", cfg, inverse=True)
    return state


def controlled_rotation(state: RegisterState, C: float, register: str = "reg2") -> RegisterState:
    """Ancilla ``|0> -> q|0> + sqrt(1 - q^2)|1>`` with ``q = C sqrt(lambda)`` per branch."""
    if np.any(state.ancilla != 0):
        raise ContractViolation("ancilla must start in |0>")
    lam = decoded(state, register)
    if np.any(lam < 0):
        raise ContractViolation("controlled rotation needs non-negative lambda codes")
    q = C * np.sqrt(lam)
    if np.any(q > 1.0 + 1e-12):
        raise ConfigurationError(
            f"rotation constant C={C:.6g} too large: max amplitude {q.max():.6g} > 1")
    q = np.minimum(q, 1.0)
    rest = np.sqrt(1.0 - q * q)
    two = lambda a: np.concatenate([a, a])
    return RegisterState(state.layout, two(state.main),
                         np.concatenate([state.amp * q, state.amp * rest]),
                         {k: two(v) for k, v in state.regs.items()},
                         np.concatenate([np.zeros(state.branches, np.int8),
                                         np.ones(state.branches, np.int8)]),
                         dict(state.encodings))


def ancilla_zero_probability(state: RegisterState) -> float:
    return float(np.sum(np.abs(state.amp[state.ancilla == 0]) ** 2))


def collapse_ancilla(state: RegisterState, outcome: int) -> RegisterState:
    keep = state.ancilla == outcome
    amp = state.amp[keep]
    nrm = math.sqrt(float(np.sum(np.abs(amp) ** 2)))
    if nrm == 0:
        raise ContractViolation(f"ancilla outcome {outcome} has zero probability")
    return RegisterState(state.layout, state.main[keep], amp / nrm,
                         {k: v[keep] for k, v in state.regs.items()},
                         np.zeros(int(keep.sum()), np.int8), dict(state.encodings))


def controlled_rotation_postselect(state: RegisterState, C: float, rng: np.random.Generator,
                                   uncompute=None) -> tuple[RegisterState, bool]:
    """One rotation + ancilla measurement.

    On outcome 0 the ancilla is discarded and ``uncompute`` (if given) clears
    the precision register; on outcome 1 the collapsed failure branch is
    returned.
    """
    rotated = controlled_rotation(state, C)
    p0 = ancilla_zero_probability(rotated)
    success = bool(rng.random() < p0)
    out = collapse_ancilla(rotated, 0 if success else 1)
    if success and uncompute is not None:
        out = uncompute(out)
    return out, success


def projector_probability(state: RegisterState, P: Projector) -> float:
    if P.layout != state.layout:
        raise ContractViolation("projector layout differs from the state layout")
    return float(np.sum(P.indicator(state.main) * np.abs(state.amp) ** 2))


def measure_projector(state: RegisterState, P: Projector, m: int,
                      rng: np.random.Generator) -> tuple[float, float]:
    """``m`` projective measurements of ``P`` on fresh copies of ``state``."""
    if m < 1:
        raise ValueError("need at least one shot")
    p = min(max(projector_probability(state, P), 0.0), 1.0)
    hits = int(rng.binomial(m, p))
    mean = hits / m
    return mean, math.sqrt(mean * (1.0 - mean) / m)
