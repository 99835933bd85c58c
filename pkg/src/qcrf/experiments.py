"""Experiment configs and the four runner commands behind the ``qcrf`` CLI.

Every command returns plain rows; :func:`write_csv` renders them with a fixed
float format so reruns with the same config and seed are byte-identical apart
from the timing columns.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
import timeit
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from qcrf.crf import (ENUMERATION_CAP, Dataset, DivergenceError, DomainError, Weights,
                      conditional_probability, enumerate_labelings, gibbs_sample_path,
                      gradient_factorized, gradient_gibbs, gradient_naive, nll, potential, train)
from qcrf.instances import (aligned_instance, reference_instance, random_instance, random_shape,
                            small_instance)
from qcrf.io import fmt, read_feature_table
from qcrf.model import (SCAN_MAX, QcrfInstance, build_lambda_x, build_lambda_xy,
                        quantum_gradient_exact, quantum_probability, trace_lambda_exp)
from qcrf.sim.estimator import (PostSelectionStarved, derive_seed, estimate_gradient,
                                gradient_sample_path)
from qcrf.sim.state import FixedPointOverflow, PrecisionConfig

SCHEMA_VERSION = 1
INSTANCE_KINDS = ("reference", "small", "aligned", "random", "files")
TRAIN_BACKENDS = ("exact", "naive", "gibbs", "quantum")
ITERATION_MODES = ("states", "epochs")
RANDOM_CHECKS = 100
FD_STEP = 1e-5
FD_FLOOR = 1e-9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InstanceSpec:
    kind: str = "small"
    n: int = 2
    K: int = 2
    Q: int = 2
    seed: int = 0
    records: int = 1
    scale: float = 1.0
    tables: tuple = ()
    labels: tuple = ()


@dataclass(frozen=True)
class TrainerSpec:
    eta: float = 0.1
    iters: int = 340
    backend: str = "exact"
    burn_in: int = 0


@dataclass(frozen=True)
class EstimatorSpec:
    r: int = 12
    int_bits: int = 8
    m: int = 10_000
    m_schedule: tuple = tuple(range(1, 341))
    C: float | None = None
    epsilon: float = 0.1
    seeds: int = 10
    iteration_mode: str = "states"


@dataclass(frozen=True)
class ScalingSpec:
    n_min: int = 6
    n_max: int = 10
    K: int = 2
    Q: int = 2
    records: int = 1
    repeats: int = 5


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    instance: InstanceSpec = field(default_factory=InstanceSpec)
    weights: tuple | None = None
    trainer: TrainerSpec = field(default_factory=TrainerSpec)
    estimator: EstimatorSpec = field(default_factory=EstimatorSpec)
    scaling: ScalingSpec = field(default_factory=ScalingSpec)
    output: str | None = None
    seed: int = 0

    def precision(self) -> PrecisionConfig:
        e = self.estimator
        return PrecisionConfig(r=e.r, int_bits=e.int_bits, C=e.C, epsilon=e.epsilon)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _section(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {', '.join(extra)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def config_from_dict(data: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"unknown top-level keys: {', '.join(extra)}")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {data.get('schema_version')!r}")
    inst = _section(InstanceSpec, data.get("instance"), "instance")
    base = Path(base_dir)
    inst = replace(inst, tables=tuple(str(base / p) for p in inst.tables),
                   labels=tuple(tuple(y) for y in inst.labels))
    weights = data.get("weights")
    cfg = ExperimentConfig(
        schema_version=SCHEMA_VERSION,
        instance=inst,
        weights=None if weights is None else tuple(float(v) for v in weights),
        trainer=_section(TrainerSpec, data.get("trainer"), "trainer"),
        estimator=_section(EstimatorSpec, data.get("estimator"), "estimator"),
        scaling=_section(ScalingSpec, data.get("scaling"), "scaling"),
        output=data.get("output"),
        seed=data.get("seed", 0),
    )
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data, path.parent)


def check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return seed


def validate(cfg: ExperimentConfig) -> None:
    inst, est, tr, sc = cfg.instance, cfg.estimator, cfg.trainer, cfg.scaling
    check_seed(cfg.seed)
    if inst.kind not in INSTANCE_KINDS:
        raise ConfigError(f"instance.kind must be one of {INSTANCE_KINDS}")
    if min(inst.n, inst.K, inst.Q, inst.records) < 1:
        raise ConfigError("instance n, K, Q and records must be >= 1")
    if inst.kind == "files":
        if not inst.tables or len(inst.tables) != len(inst.labels):
            raise ConfigError("files instance needs one labels entry per table")
        for p in inst.tables:
            if not Path(p).is_file():
                raise ConfigError(f"feature table not found: {p}")
    sched = list(est.m_schedule)
    if not sched or sched[0] < 1 or any(b <= a for a, b in zip(sched, sched[1:])):
        raise ConfigError("estimator.m_schedule must be non-empty, positive and strictly increasing")
    if est.int_bits < 1:
        raise ConfigError("estimator.int_bits must be >= 1")
    if est.m < 1 or est.seeds < 1:
        raise ConfigError("estimator.m and estimator.seeds must be >= 1")
    if est.iteration_mode not in ITERATION_MODES:
        raise ConfigError(f"estimator.iteration_mode must be one of {ITERATION_MODES}")
    if tr.backend not in TRAIN_BACKENDS:
        raise ConfigError(f"trainer.backend must be one of {TRAIN_BACKENDS}")
    if tr.iters < 1 or tr.burn_in < 0:
        raise ConfigError("trainer.iters must be >= 1 and trainer.burn_in >= 0")
    if not 1 <= sc.n_min <= sc.n_max or sc.repeats < 1:
        raise ConfigError("scaling needs 1 <= n_min <= n_max and repeats >= 1")
    try:
        cfg.precision()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_problem(cfg: ExperimentConfig) -> tuple[Dataset, Weights]:
    inst, eta = cfg.instance, cfg.trainer.eta
    if inst.kind == "reference":
        ds, w = reference_instance(eta)
    elif inst.kind == "small":
        ds, w = small_instance(inst.seed, eta)
    elif inst.kind == "aligned":
        ds, w = aligned_instance(inst.n, inst.K, inst.Q, eta)
    elif inst.kind == "random":
        ds, w = random_instance(np.random.default_rng(inst.seed), inst.n, inst.K, inst.Q,
                                inst.records, inst.scale, eta)
    else:
        try:
            pairs = [(read_feature_table(p), y) for p, y in zip(inst.tables, inst.labels)]
            ds = Dataset.uniform(pairs)
        except (DomainError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        w = Weights(np.zeros(ds.K), eta)
    if cfg.weights is not None:
        if len(cfg.weights) != ds.K:
            raise ConfigError(f"weights has {len(cfg.weights)} entries, instance has K = {ds.K}")
        w = Weights(cfg.weights, eta)
    return ds, w


def write_csv(rows: list[dict], header: list[str], path=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(row.get(h)) for h in header])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return fmt(v)
    return str(v)


# ---------------------------------------------------------------- check

CHECK_TOLERANCES = {
    "trace_clamped": 1e-10,
    "trace_free": 1e-10,
    "bridge": 1e-12,
    "rank_lambda_xy": 0.0,
    "rank_lambda_x": 0.0,
    "zero_weight_traces": 1e-12,
    "gradient_naive_vs_factorized": 1e-10,
    "gradient_quantum_vs_naive": 1e-10,
    "gradient_finite_difference": 1e-6,
}
CHECK_HEADER = ["check", "scope", "instances", "skipped", "worst_residual", "tolerance", "status"]


def instance_residuals(ds: Dataset, w) -> dict:
    """Residual per check for one dataset; ``None`` marks a check skipped by a cap."""
    w = np.asarray(w, dtype=float)
    res = {name: 0.0 for name in CHECK_TOLERANCES}
    t0 = ds.records[0].table
    if t0.Q ** t0.n * 2 ** (t0.n * t0.K) > SCAN_MAX:
        for name in ("trace_clamped", "trace_free", "bridge", "rank_lambda_xy",
                     "rank_lambda_x", "zero_weight_traces", "gradient_quantum_vs_naive"):
            res[name] = None
    else:
        for r in ds.records:
            t, y = r.table, r.labels
            inst = QcrfInstance(t, y, w)
            e = potential(t, w, y)
            tc = trace_lambda_exp(inst.Lxy, inst.H0)
            res["trace_clamped"] = max(res["trace_clamped"], abs(tc - math.exp(e)) / math.exp(e))
            ys = enumerate_labelings(t.n, t.Q)
            z = math.fsum(math.exp(potential(t, w, yy)) for yy in ys)
            tf = trace_lambda_exp(inst.Lx, inst.Hn)
            res["trace_free"] = max(res["trace_free"], abs(tf - z) / z)
            res["bridge"] = max(res["bridge"], abs(quantum_probability(inst) - conditional_probability(t, w, y)))
            res["rank_lambda_xy"] = max(res["rank_lambda_xy"], abs(build_lambda_xy(t, y).rank - 1))
            res["rank_lambda_x"] = max(res["rank_lambda_x"], abs(build_lambda_x(t).rank - t.Q ** t.n))
            zero = QcrfInstance(t, y, np.zeros_like(w))
            res["zero_weight_traces"] = max(
                res["zero_weight_traces"],
                abs(trace_lambda_exp(zero.Lxy, zero.H0) - 1.0),
                abs(trace_lambda_exp(zero.Lx, zero.Hn) - t.Q ** t.n) / t.Q ** t.n)
    g_fact = gradient_factorized(ds, w)
    if t0.Q ** t0.n > ENUMERATION_CAP:
        res["gradient_naive_vs_factorized"] = None
        res["gradient_quantum_vs_naive"] = None
        g_ref = g_fact
    else:
        g_naive = gradient_naive(ds, w)
        res["gradient_naive_vs_factorized"] = float(np.max(np.abs(g_naive - g_fact)))
        if res["gradient_quantum_vs_naive"] is not None:
            res["gradient_quantum_vs_naive"] = float(np.max(np.abs(quantum_gradient_exact(ds, w) - g_naive)))
        g_ref = g_naive
    res["gradient_finite_difference"] = finite_difference_residual(ds, w, g_ref)
    return res


def finite_difference_residual(ds: Dataset, w, g, h: float = FD_STEP) -> float:
    """Relative central-difference gap ``(|g - fd|_inf - FD_FLOOR)+ / |g|_inf``.

    The absolute floor absorbs rounding when the gradient vanishes.
    """
    fd = np.empty_like(g)
    for k in range(g.size):
        e = np.zeros_like(w)
        e[k] = h
        fd[k] = (nll(ds, w + e) - nll(ds, w - e)) / (2 * h)
    gap = float(np.max(np.abs(g - fd))) - FD_FLOOR
    if gap <= 0:
        return 0.0
    scale = float(np.max(np.abs(g)))
    return gap / scale if scale > 0 else math.inf


def cmd_check(cfg: ExperimentConfig) -> tuple[list[dict], bool]:
    ds, w = build_problem(cfg)
    scopes = {"instance": [instance_residuals(ds, w.w)]}
    rand = []
    for i in range(RANDOM_CHECKS):
        rng = np.random.default_rng(derive_seed(cfg.seed, 1, i))
        n, K, Q = random_shape(rng, 2 ** 12)
        rds, rw = random_instance(rng, n, K, Q, records=int(rng.integers(1, 3)))
        rand.append(instance_residuals(rds, rw.w))
    scopes["random"] = rand
    rows, ok = [], True
    for scope, results in scopes.items():
        for name, tol in CHECK_TOLERANCES.items():
            vals = [r[name] for r in results if r[name] is not None]
            skipped = len(results) - len(vals)
            worst = max(vals) if vals else None
            status = "skipped" if worst is None else ("pass" if worst <= tol else "fail")
            ok &= status != "fail"
            rows.append({"check": name, "scope": scope, "instances": len(vals), "skipped": skipped,
                         "worst_residual": None if worst is None else float(worst),
                         "tolerance": float(tol), "status": status})
    return rows, ok


# ------------------------------------------------------- gradient error

RUN_HEADER = ["iteration", "backend", "nll", "gradient_error", "wall_time", "seed", "flag"]


def _relative_error(est, exact) -> float:
    den = float(np.linalg.norm(exact))
    err = float(np.linalg.norm(np.asarray(est) - exact))
    return err / den if den > 0 else err


def cmd_gradient_error(cfg: ExperimentConfig) -> list[dict]:
    """Gradient error of the quantum estimator and the Gibbs baseline.

    ``states`` mode: iteration ``i`` means ``i`` accumulated post-selected
    states (and ``i`` Gibbs sweeps) at the initial weights. ``epochs`` mode:
    iteration ``t`` is a training epoch driven by the quantum estimate with
    ``estimator.m`` states per trace (and ``m`` Gibbs sweeps).
    """
    if cfg.estimator.iteration_mode == "states":
        return _gradient_error_states(cfg)
    return _gradient_error_epochs(cfg)


def _gradient_error_states(cfg):
    ds, w = build_problem(cfg)
    pcfg = cfg.precision()
    sched = list(cfg.estimator.m_schedule)
    M = sched[-1]
    exact = gradient_factorized(ds, w.w)
    loss = nll(ds, w.w)
    rows = []
    for s in range(cfg.estimator.seeds):
        seed = derive_seed(cfg.seed, s)
        t0 = time.perf_counter()
        qpath = gradient_sample_path(ds, w.w, pcfg, M, seed)
        tq = time.perf_counter() - t0
        t0 = time.perf_counter()
        gpath = gibbs_sample_path(ds, w.w, M, cfg.trainer.burn_in, seed)
        tg = time.perf_counter() - t0
        for m in sched:
            for backend, path, wall in (("gibbs", gpath, tg), ("quantum", qpath, tq)):
                est = path[m - 1]
                if np.all(np.isfinite(est)):
                    err, flag = _relative_error(est, exact), ""
                else:
                    err, flag = math.nan, "no_postselected_hits"
                rows.append({"iteration": m, "backend": backend, "nll": loss, "gradient_error": err,
                             "wall_time": wall, "seed": seed, "flag": flag, "_order": s})
    return _ordered(rows)


def _gradient_error_epochs(cfg):
    ds, w0 = build_problem(cfg)
    pcfg = cfg.precision()
    m = cfg.estimator.m
    rows = []
    for s in range(cfg.estimator.seeds):
        seed = derive_seed(cfg.seed, s)
        w = w0.w.copy()
        for it in range(cfg.trainer.iters):
            exact = gradient_factorized(ds, w)
            loss = nll(ds, w)
            cell = derive_seed(seed, it)
            t0 = time.perf_counter()
            g_gibbs = gradient_gibbs(ds, w, m, cfg.trainer.burn_in, cell)
            tg = time.perf_counter() - t0
            t0 = time.perf_counter()
            try:
                g_q, flag = estimate_gradient(ds, w, pcfg, m, cell).gradient, ""
                err = _relative_error(g_q, exact)
            except PostSelectionStarved:
                g_q, flag, err = np.zeros_like(w), "postselection_starved", math.nan
            tq = time.perf_counter() - t0
            base = {"iteration": it + 1, "nll": loss, "seed": cell, "_order": s}
            rows.append({**base, "backend": "gibbs", "gradient_error": _relative_error(g_gibbs, exact),
                         "wall_time": tg, "flag": ""})
            rows.append({**base, "backend": "quantum", "gradient_error": err, "wall_time": tq, "flag": flag})
            w = w - w0.eta * g_q
    return _ordered(rows)


def _ordered(rows):
    rows.sort(key=lambda r: (r["iteration"], r["backend"], r.pop("_order")))
    return rows


# ---------------------------------------------------------------- train

TRAIN_STATUS_EXIT = {"ok": 0, "diverged": 1, "postselection_starved": 1, "fixed_point_overflow": 2}


def cmd_train(cfg: ExperimentConfig, backend: str | None = None) -> tuple[list[dict], str, str]:
    """Train with ``backend`` and record the gradient error against the exact gradient.

    Returns ``(rows, status, message)``. On divergence, post-selection
    starvation or fixed-point saturation the rows up to the abort are kept,
    the last one is flagged and ``status`` names the cause.
    """
    backend = backend or cfg.trainer.backend
    if backend not in TRAIN_BACKENDS:
        raise ConfigError(f"backend must be one of {TRAIN_BACKENDS}")
    ds, w0 = build_problem(cfg)
    pcfg, m, burn = cfg.precision(), cfg.estimator.m, cfg.trainer.burn_in
    counter = iter(range(cfg.trainer.iters))
    log = []  # (nll, gradient error, elapsed) per iteration
    start = time.perf_counter()

    def grad(ds_, w):
        it = next(counter)
        cell = derive_seed(cfg.seed, it)
        if backend == "exact":
            g = gradient_factorized(ds_, w)
        elif backend == "naive":
            g = gradient_naive(ds_, w)
        elif backend == "gibbs":
            g = gradient_gibbs(ds_, w, m, burn, cell)
        else:
            g = estimate_gradient(ds_, w, pcfg, m, cell).gradient
        log.append((nll(ds_, w), _relative_error(g, gradient_factorized(ds_, w)),
                    time.perf_counter() - start))
        return g

    status, message = "ok", ""
    try:
        train(ds, w0, grad, cfg.trainer.iters)
    except DivergenceError as exc:
        status, message = "diverged", str(exc)
    except PostSelectionStarved as exc:
        status, message = "postselection_starved", str(exc)
    except FixedPointOverflow as exc:
        status, message = "fixed_point_overflow", f"{exc}; raise estimator.int_bits"
    rows = [{"iteration": it, "backend": backend, "nll": loss, "gradient_error": err,
             "wall_time": wall, "seed": cfg.seed, "flag": ""}
            for it, (loss, err, wall) in enumerate(log)]
    if status != "ok" and rows:
        rows[-1]["flag"] = status
    return rows, status, message


# -------------------------------------------------------------- scaling

SCALING_HEADER = ["n", "backend", "seconds", "ratio", "max_abs_diff", "status", "seed"]


def _batch_size(fn) -> int:
    return timeit.Timer(fn).autorange()[0]


def cmd_scaling(cfg: ExperimentConfig) -> list[dict]:
    """Per-call gradient timings over ``n``.

    Each round times one batch of every (n, backend) cell back to back, so load
    drift hits neighbouring ``n`` alike. ``seconds`` is the median per-call time
    and ``ratio`` the median over rounds of the per-round ratio to ``n - 1``.
    """
    sc = cfg.scaling
    cells, out = {}, {}
    for n in range(sc.n_min, sc.n_max + 1):
        seed = derive_seed(cfg.seed, n)
        ds, w = random_instance(np.random.default_rng(seed), n, sc.K, sc.Q, sc.records)
        g_fact = gradient_factorized(ds, w.w)
        fns = {"factorized": lambda ds=ds, w=w: gradient_factorized(ds, w.w)}
        if sc.Q ** n > ENUMERATION_CAP:
            out[n] = (seed, None, "skipped")
        else:
            g_naive = gradient_naive(ds, w.w)
            out[n] = (seed, float(np.max(np.abs(g_naive - g_fact))), "ok")
            fns["naive"] = lambda ds=ds, w=w: gradient_naive(ds, w.w)
        for backend, fn in fns.items():
            cells[n, backend] = (fn, _batch_size(fn), [])
    for _ in range(sc.repeats):
        for fn, number, times in cells.values():
            times.append(timeit.Timer(fn).timeit(number) / number)
    rows = []
    for n in range(sc.n_min, sc.n_max + 1):
        seed, diff, status = out[n]
        for backend in ("factorized", "naive"):
            cell, prev = cells.get((n, backend)), cells.get((n - 1, backend))
            t = float(np.median(cell[2])) if cell else None
            ratio = (float(np.median(np.divide(cell[2], prev[2])))
                     if cell and prev else None)
            rows.append({"n": n, "backend": backend, "seconds": t, "ratio": ratio,
                         "max_abs_diff": diff, "status": "ok" if backend == "factorized" else status,
                         "seed": seed})
    return rows
