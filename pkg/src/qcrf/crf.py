"""Linear-chain CRF with node features only.

All label sequences are integer index lists into a :class:`LabelAlphabet`.
Feature values live in a dense ``(K, n, Q)`` sign array so the potential of
a labeling is a sum of per-position node scores and the partition sum
factorizes over positions.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence as Seq

import numpy as np
from scipy.special import logsumexp

ENUMERATION_CAP = 2 ** 20
DIVERGENCE_PATIENCE = 10


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class EnumerationTooLarge(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class LabelAlphabet:
    labels: tuple

    def __post_init__(self):
        labels = tuple(self.labels)
        if len(set(labels)) != len(labels):
            raise DomainError(f"duplicate labels in alphabet {labels!r}")
        if len(labels) < 1:
            raise DomainError("empty label alphabet")
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, token) -> int:
        try:
            return self.labels.index(token)
        except ValueError:
            raise DomainError(f"label {token!r} not in alphabet") from None

    def token(self, idx: int):
        return self.labels[idx]


@dataclass(frozen=True)
class Sequence:
    observations: tuple
    labels: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.observations) < 1:
            raise DimensionError("sequence must have at least one position")
        if self.labels is not None and len(self.labels) != len(self.observations):
            raise DimensionError(
                f"{len(self.labels)} labels for {len(self.observations)} observations")

    def __len__(self):
        return len(self.observations)


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Signs ``f_k(x_i, y)`` for one observation sequence.

    ``values[k, i, j]`` is the sign of feature ``k`` at position ``i`` when
    the position carries label index ``j``.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.int8)
        if v.ndim != 3:
            raise DimensionError(f"feature table must be (K, n, Q), got shape {v.shape}")
        if not np.all((v == 1) | (v == -1)):
            raise DomainError("feature table entries must be -1 or +1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def Q(self) -> int:
        return self.values.shape[2]

    def node_scores(self, w) -> np.ndarray:
        """``s[i, j] = sum_k w_k f_k(x_i, j)``, shape ``(n, Q)``."""
        w = _weight_vector(w, self.K)
        return np.einsum("k,kij->ij", w, self.values.astype(float))

    def feature_sums(self, y) -> np.ndarray:
        """``sum_i f_k(x_i, y_i)`` for every k."""
        y = check_labels(self, y)
        return self.values[:, np.arange(self.n), y].sum(axis=1).astype(float)


@dataclass(frozen=True)
class FeatureTemplate:
    """Indicator ``token == T at position i and label == L`` (``token=None`` matches any token)."""

    label: object
    token: object = None

    def matches(self, observation, label) -> bool:
        return label == self.label and (self.token is None or observation == self.token)


def build_feature_table(observations: Seq, alphabet: LabelAlphabet,
                        templates: Seq[FeatureTemplate]) -> FeatureTable:
    values = np.empty((len(templates), len(observations), alphabet.size), dtype=np.int8)
    for k, tpl in enumerate(templates):
        for i, obs in enumerate(observations):
            for j, lab in enumerate(alphabet.labels):
                values[k, i, j] = 1 if tpl.matches(obs, lab) else -1
    return FeatureTable(values)


@dataclass(frozen=True, eq=False)
class Weights:
    w: np.ndarray
    eta: float = 0.1

    def __post_init__(self):
        w = np.array(self.w, dtype=float).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise DomainError("weights must be finite")
        if not self.eta >= 0:
            raise DomainError(f"step length must be non-negative, got {self.eta}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def K(self) -> int:
        return self.w.size

    def replace(self, w) -> "Weights":
        return Weights(w, self.eta)


@dataclass(frozen=True)
class Record:
    table: FeatureTable
    labels: tuple
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(j) for j in self.labels))
        check_labels(self.table, self.labels)


@dataclass(frozen=True)
class Dataset:
    records: tuple
    alphabet: LabelAlphabet | None = field(default=None, compare=False)

    def __post_init__(self):
        records = tuple(self.records)
        if not records:
            raise DimensionError("dataset is empty")
        total = math.fsum(r.weight for r in records)
        if abs(total - 1.0) > 1e-12:
            raise DomainError(f"empirical weights sum to {total!r}, expected 1")
        if any(not 0 < r.weight <= 1 for r in records):
            raise DomainError("empirical weights must lie in (0, 1]")
        K, Q = records[0].table.K, records[0].table.Q
        for r in records:
            if r.table.K != K or r.table.Q != Q:
                raise DimensionError("records disagree on feature count or alphabet size")
        object.__setattr__(self, "records", records)

    @property
    def K(self) -> int:
        return self.records[0].table.K

    @property
    def Q(self) -> int:
        return self.records[0].table.Q

    @classmethod
    def uniform(cls, pairs, alphabet=None) -> "Dataset":
        """Equal empirical weight for every ``(table, labels)`` pair."""
        pairs = list(pairs)
        return cls(tuple(Record(t, y, 1.0 / len(pairs)) for t, y in pairs), alphabet)

    @classmethod
    def from_sequences(cls, sequences, alphabet, templates) -> "Dataset":
        pairs = []
        for seq in sequences:
            if seq.labels is None:
                raise DomainError("training sequences need labels")
            table = build_feature_table(seq.observations, alphabet, templates)
            pairs.append((table, [alphabet.index(t) for t in seq.labels]))
        return cls.uniform(pairs, alphabet)


def _weight_vector(w, K=None) -> np.ndarray:
    vec = w.w if isinstance(w, Weights) else np.asarray(w, dtype=float).reshape(-1)
    if K is not None and vec.size != K:
        raise DimensionError(f"weight vector has length {vec.size}, table has K={K}")
    return vec


def check_labels(table: FeatureTable, y) -> np.ndarray:
    y = np.asarray(y, dtype=int).reshape(-1)
    if y.size != table.n:
        raise DimensionError(f"label sequence has length {y.size}, expected n={table.n}")
    if np.any((y < 0) | (y >= table.Q)):
        raise DomainError(f"label index outside 0..{table.Q - 1}: {y.tolist()}")
    return y


def potential(table: FeatureTable, w, y) -> float:
    """``E(x, y) = sum_i sum_k w_k f_k(x_i, y_i)``."""
    y = check_labels(table, y)
    s = table.node_scores(w)
    return float(s[np.arange(table.n), y].sum())


def log_partition(table: FeatureTable, w) -> float:
    # node-only features: log Z = sum_i logsumexp_j s[i, j]
    return float(logsumexp(table.node_scores(w), axis=1).sum())


def conditional_probability(table: FeatureTable, w, y) -> float:
    return math.exp(potential(table, w, y) - log_partition(table, w))


def label_marginals(table: FeatureTable, w) -> np.ndarray:
    """Per-position label distribution, shape ``(n, Q)``."""
    s = table.node_scores(w)
    return np.exp(s - logsumexp(s, axis=1, keepdims=True))


def enumerate_labelings(n: int, Q: int, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """All ``Q**n`` label sequences in lexicographic order, shape ``(Q**n, n)``."""
    total = Q ** n
    if total > cap:
        raise EnumerationTooLarge(
            f"enumeration too large: Q^n = {Q}^{n} = {total} exceeds cap {cap}")
    return np.array(list(itertools.product(range(Q), repeat=n)), dtype=int).reshape(total, n)


def nll(ds: Dataset, w) -> float:
    terms = [r.weight * (log_partition(r.table, w) - potential(r.table, w, r.labels))
             for r in ds.records]
    return math.fsum(terms)


def _reduce(per_record: list) -> np.ndarray:
    # records are summed in dataset order so the result never depends on scheduling
    return np.sum(np.stack(per_record), axis=0)


def gradient_naive(ds: Dataset, w, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """dL/dw by visiting every label sequence ``y*`` one at a time."""
    out = []
    for r in ds.records:
        t = r.table
        total = t.Q ** t.n
        if total > cap:
            raise EnumerationTooLarge(
                f"enumeration too large: Q^n = {t.Q}^{t.n} = {total} exceeds cap {cap}")
        wv = _weight_vector(w, t.K)
        pos = np.arange(t.n)
        E = np.empty(total)
        F = np.empty((total, t.K))
        for s, y in enumerate(itertools.product(range(t.Q), repeat=t.n)):
            F[s] = t.values[:, pos, y].sum(axis=1)
            E[s] = F[s] @ wv
        p = np.exp(E - logsumexp(E))
        out.append(-r.weight * (t.feature_sums(r.labels) - p @ F))
    return _reduce(out)


def gradient_factorized(ds: Dataset, w) -> np.ndarray:
    out = []
    for r in ds.records:
        t = r.table
        model = np.einsum("ij,kij->k", label_marginals(t, w), t.values.astype(float))
        out.append(-r.weight * (t.feature_sums(r.labels) - model))
    return _reduce(out)


@dataclass(frozen=True)
class GibbsEstimate:
    gradient: np.ndarray
    stderr: np.ndarray
    samples: int


def gibbs_chain(table: FeatureTable, w, sweeps: int, burn_in: int,
                rng: np.random.Generator) -> np.ndarray:
    """Single-site Gibbs chain over label sequences; returns the kept states.

    Each sweep visits positions ``0..n-1`` in order and redraws ``y_i`` from
    ``P(y_i | y_-i, x)``. With node-only features that conditional does not
    depend on the other sites, so a sweep's draws are computed in one block
    from the same uniform stream a site-by-site loop would consume.
    """
    if sweeps < 1:
        raise DomainError("sweeps must be >= 1")
    total = sweeps + burn_in
    cond = label_marginals(table, w)
    cdf = np.cumsum(cond, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((total, table.n))
    states = np.empty((total, table.n), dtype=int)
    for i in range(table.n):
        states[:, i] = np.searchsorted(cdf[i], u[:, i], side="right")
    return states[burn_in:]


def gibbs_estimate(ds: Dataset, w, sweeps: int, burn_in: int = 0, seed: int = 0) -> GibbsEstimate:
    children = np.random.SeedSequence(seed).spawn(len(ds.records))
    grads, vars_ = [], []
    for r, ss in zip(ds.records, children):
        t = r.table
        states = gibbs_chain(t, w, sweeps, burn_in, np.random.default_rng(ss))
        F = t.values[:, np.arange(t.n)[None, :], states].sum(axis=2).T.astype(float)
        mean = F.mean(axis=0)
        var = F.var(axis=0, ddof=1) / F.shape[0] if F.shape[0] > 1 else np.zeros(t.K)
        grads.append(-r.weight * (t.feature_sums(r.labels) - mean))
        vars_.append(r.weight ** 2 * var)
    return GibbsEstimate(_reduce(grads), np.sqrt(_reduce(vars_)), sweeps)


def gradient_gibbs(ds: Dataset, w, sweeps: int, burn_in: int = 0, seed: int = 0) -> np.ndarray:
    return gibbs_estimate(ds, w, sweeps, burn_in, seed).gradient


def gibbs_sample_path(ds: Dataset, w, sweeps: int, burn_in: int = 0, seed: int = 0) -> np.ndarray:
    """Gradient estimate after each sweep, shape ``(sweeps, K)``; the last row equals
    :func:`gibbs_estimate` with the same arguments."""
    children = np.random.SeedSequence(seed).spawn(len(ds.records))
    out = np.zeros((sweeps, ds.K))
    counts = np.arange(1, sweeps + 1)[:, None]
    for r, ss in zip(ds.records, children):
        t = r.table
        states = gibbs_chain(t, w, sweeps, burn_in, np.random.default_rng(ss))
        F = t.values[:, np.arange(t.n)[None, :], states].sum(axis=2).T.astype(float)
        out += -r.weight * (t.feature_sums(r.labels) - np.cumsum(F, axis=0) / counts)
    return out


@dataclass(frozen=True)
class TrainStep:
    iteration: int
    w: np.ndarray
    nll: float
    grad_norm: float


def _resolve_backend(name, **options) -> Callable:
    if callable(name):
        return name
    if name == "naive":
        return gradient_naive
    if name == "factorized":
        return gradient_factorized
    if name == "gibbs":
        sweeps = options.get("sweeps", 1000)
        burn_in = options.get("burn_in", 0)
        seed = options.get("seed", 0)
        counter = itertools.count()
        return lambda ds, w: gradient_gibbs(ds, w, sweeps, burn_in, seed + next(counter))
    if name == "quantum":
        from qcrf.sim.estimator import quantum_backend
        return quantum_backend(**options)
    raise DomainError(f"unknown gradient backend {name!r}")


def train(ds: Dataset, w0: Weights, grad_backend="factorized", iters: int = 100,
          **backend_options) -> list[TrainStep]:
    """Plain gradient descent ``w <- w - eta * dL/dw``.

    Row ``t`` holds the weights before update ``t`` together with their nll
    and gradient norm. Raises :class:`DivergenceError` once the nll has risen
    for ``DIVERGENCE_PATIENCE`` consecutive iterations.
    """
    if iters < 1:
        raise DomainError("iters must be >= 1")
    grad_fn = _resolve_backend(grad_backend, **backend_options)
    w = w0.w.copy()
    trajectory: list[TrainStep] = []
    rises = 0
    for it in range(iters):
        loss = nll(ds, w)
        g = np.asarray(grad_fn(ds, w), dtype=float)
        trajectory.append(TrainStep(it, w.copy(), loss, float(np.linalg.norm(g))))
        if it > 0 and loss > trajectory[-2].nll:
            rises += 1
            if rises >= DIVERGENCE_PATIENCE:
                raise DivergenceError(
                    f"nll increased for {rises} consecutive iterations "
                    f"(now {loss:.6g} at iteration {it}, eta={w0.eta})", trajectory)
        else:
            rises = 0
        w = w - w0.eta * g
    return trajectory
