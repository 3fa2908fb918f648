"""Experiment orchestration and costed-regret accounting."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import zlib
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .baselines import AmbientRidge, OracleLinUCB, PcaLowRank
from .config import ExperimentConfig
from .env import EnvSpec, build_env, observe, segment_bounds, step
from .ident import lift, projector_distance
from .policy import DetectorState, Probe, Spsc, SpscAdaptive

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "experiment", "d", "r", "K", "T", "seed", "method",
    "control_regret", "costed_regret", "probe_count", "subspace_error_final", "wall_ms",
)

ABLATIONS = ("variance", "coupling", "coverage", "probe_rate", "rank_misspec", "oracle_quality", "small_d")


@dataclass
class RegretTrace:
    control: np.ndarray  # per-round instantaneous control regret
    probe_charge: np.ndarray  # c on probe rounds, else 0
    is_probe: np.ndarray
    subspace_error: list[tuple[int, int, float]] = field(default_factory=list)  # (t, probes, err)
    detector: list[tuple[int, float]] = field(default_factory=list)
    fires: list[int] = field(default_factory=list)

    @property
    def cumulative_control(self) -> np.ndarray:
        return np.cumsum(self.control)

    @property
    def cumulative_costed(self) -> np.ndarray:
        return np.cumsum(self.control + self.probe_charge)

    @property
    def probe_count(self) -> int:
        return int(self.is_probe.sum())


@dataclass
class CellResult:
    experiment: str
    d: int
    r: int
    K: int
    T: int
    seed: int
    method: str
    control_regret: float
    costed_regret: float
    probe_count: int
    subspace_error_final: float
    wall_ms: float

    def row(self) -> dict:
        return asdict(self)


def env_seed(cfg: ExperimentConfig, replicate: int) -> int:
    """Shared across methods of a (cell, replicate) so comparisons are paired."""
    ss = np.random.SeedSequence([cfg.base_seed, cfg.d, cfg.r, cfg.K, cfg.T, replicate])
    return int(ss.generate_state(1)[0])


def policy_rng(seed: int, method: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(method.encode())])


def make_policy(method, cfg: ExperimentConfig, segments, rng, oracle_segments=None, threshold=None):
    d = cfg.d
    bcfg = cfg.baseline_config()
    if method == "spsc":
        bounds = oracle_segments or [(s.start, s.end) for s in segments]
        return Spsc(d, cfg.spsc_config(), rng, bounds)
    if method == "spsc_adaptive":
        return SpscAdaptive(d, cfg.spsc_config(), rng, threshold)
    if method == "linucb":
        return AmbientRidge(d, bcfg, "linucb")
    if method == "sw_linucb":
        return AmbientRidge(d, bcfg, "sw")
    if method == "d_linucb":
        return AmbientRidge(d, bcfg, "discount")
    if method == "restart_linucb":
        return AmbientRidge(d, bcfg, "restart")
    if method == "oracle":
        return OracleLinUCB(d, bcfg, segments)
    if method in PcaLowRank.KINDS:
        return PcaLowRank(d, bcfg, method, segments)
    raise ValueError(f"unknown method {method!r}")


def run_episode(
    cfg: ExperimentConfig,
    method: str,
    seed: int,
    *,
    experiment: str = "run",
    oracle_segments: Sequence[tuple[int, int]] | None = None,
    threshold: float | None = None,
    track_subspace: bool = True,
) -> tuple[RegretTrace, CellResult]:
    """Play one policy against one seeded environment for T rounds."""
    spec = cfg.env_spec(seed)
    segments, state = build_env(spec)
    if method == "spsc_adaptive" and threshold is None and cfg.detector_threshold is None:
        threshold = calibrate_threshold(cfg)
    policy = make_policy(method, cfg, segments, policy_rng(seed, method), oracle_segments, threshold)

    T = spec.T
    control = np.zeros(T)
    charge = np.zeros(T)
    is_probe = np.zeros(T, dtype=bool)
    trace = RegretTrace(control, charge, is_probe)
    started = time.perf_counter()
    for i in range(T):
        t = i + 1
        view = step(state, segments)
        decision = policy.select(t, view.actions)
        if isinstance(decision, Probe):
            x = decision.u
            if x.shape != (spec.d,):
                raise ValueError("probe dimension does not match environment")
            is_probe[i] = True
            charge[i] = spec.probe_cost
        else:
            x = view.actions[decision]
        y = observe(state, x)
        policy.update(x, y)
        best = float(np.max(view.actions @ view.theta_snapshot))
        control[i] = best - float(x @ view.theta_snapshot)
        if track_subspace and is_probe[i] and hasattr(policy, "tracker"):
            err = projector_distance(policy.basis, segments[state.k].B)
            trace.subspace_error.append((t, policy.tracker.m, err))
    wall_ms = (time.perf_counter() - started) * 1000.0

    basis = getattr(policy, "basis", None)
    final_err = projector_distance(basis, segments[state.k].B) if basis is not None else float("nan")
    if isinstance(policy, SpscAdaptive):
        trace.detector = policy.stat_trace
        trace.fires = policy.fire_rounds
    result = CellResult(
        experiment=experiment, d=spec.d, r=spec.r, K=spec.K, T=T, seed=seed, method=method,
        control_regret=float(control.sum()),
        costed_regret=float(control.sum() + charge.sum()),
        probe_count=int(is_probe.sum()),
        subspace_error_final=float(final_err),
        wall_ms=wall_ms,
    )
    return trace, result


# ---------------------------------------------------------------- calibration

_THRESHOLD_CACHE: dict = {}


def null_detector_stats(cfg: ExperimentConfig, seed: int) -> np.ndarray:
    """Detector statistics along a stationary (single-segment) probe stream."""
    spec = cfg.replace(K=1, swap_at=None).env_spec(seed)
    segments, state = build_env(spec)
    rng = np.random.default_rng([seed, 7])
    det = DetectorState(spec.d, cfg.n_det)
    from .ident import draw_probe

    stats = []
    for _ in range(spec.T):
        step(state, segments)
        if rng.random() >= cfg.mu:
            observe(state, np.zeros(spec.d))
            continue
        u = draw_probe(spec.d, rng, cfg.coverage)
        y = observe(state, u)
        det.push(lift(y, u, spec.sigma_eps**2 + cfg.variance_offset).G)
        if det.recent.full and det.past.full:
            stats.append(det.stat())
    return np.asarray(stats)


def calibrate_threshold(cfg: ExperimentConfig) -> float:
    """Threshold ``b = mean + cusum_threshold * std`` of S_t on stationary streams.

    Calibration streams use seeds disjoint from evaluation seeds.
    """
    if cfg.detector_threshold is not None:
        return cfg.detector_threshold
    key = (cfg.d, cfg.r, cfg.T, cfg.n_actions, cfg.sigma_eps, cfg.rho_A, cfg.sigma_eta,
           cfg.mu, cfg.n_det, cfg.cusum_threshold, cfg.calibration_runs, cfg.coverage,
           cfg.variance_offset, cfg.eps_cross)
    if key not in _THRESHOLD_CACHE:
        pooled = np.concatenate([
            null_detector_stats(cfg, seed=10_000_019 + i) for i in range(cfg.calibration_runs)
        ])
        b = float(pooled.mean() + cfg.cusum_threshold * pooled.std())
        log.info("calibrated detector threshold b=%.4f from %d statistics", b, pooled.size)
        _THRESHOLD_CACHE[key] = b
    return _THRESHOLD_CACHE[key]


# ---------------------------------------------------------------- execution


@dataclass(frozen=True)
class Job:
    cfg: ExperimentConfig
    method: str
    seed: int
    experiment: str
    oracle_segments: tuple | None = None
    threshold: float | None = None


def _run_job(job: Job) -> CellResult:
    try:
        _, res = run_episode(
            job.cfg, job.method, job.seed, experiment=job.experiment,
            oracle_segments=job.oracle_segments, threshold=job.threshold, track_subspace=False,
        )
        return res
    except Exception as exc:  # recorded as an error row, the cell is marked failed
        log.error("run failed: %s %s seed=%s: %s", job.experiment, job.method, job.seed, exc)
        return error_row(job)


def error_row(job: Job) -> CellResult:
    """Placeholder for a failed run; ``probe_count = -1`` marks it."""
    c = job.cfg
    return CellResult(job.experiment, c.d, c.r, c.K, c.T, job.seed, job.method,
                      math.nan, math.nan, -1, math.nan, math.nan)


def execute(jobs: Sequence[Job], workers: int = 1) -> list[CellResult]:
    # thresholds are calibrated up front so worker processes do not each redo it
    jobs = [
        Job(j.cfg, j.method, j.seed, j.experiment, j.oracle_segments, calibrate_threshold(j.cfg))
        if j.method == "spsc_adaptive" and j.threshold is None else j
        for j in jobs
    ]
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def failed(results: Iterable[CellResult]) -> bool:
    return any(res.probe_count < 0 for res in results)


# ---------------------------------------------------------------- aggregation


@dataclass
class CellSummary:
    d: int
    r: int
    mean: dict[str, float]
    se: dict[str, float]
    ratio: float
    verdict: str
    crossover_predicts_spsc: bool
    error: bool = False


def mean_se(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(sorted(values), dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def summarize(results: Iterable[CellResult], T: int, metric: str = "costed_regret") -> list[CellSummary]:
    """Per-(d, r) mean and SE per method; order of ``results`` does not matter."""
    groups: dict = defaultdict(lambda: defaultdict(list))
    errors = set()
    for res in results:
        if res.probe_count < 0:
            errors.add((res.d, res.r))
        groups[(res.d, res.r)][res.method].append(getattr(res, metric))
    out = []
    for (d, r) in sorted(groups):
        means, ses = {}, {}
        for method, vals in sorted(groups[(d, r)].items()):
            means[method], ses[method] = mean_se(vals)
        ratio = means.get("spsc", math.nan) / means.get("linucb", math.nan) if "linucb" in means else math.nan
        verdict = "SPSC" if ratio < 1 else "LinUCB"
        out.append(CellSummary(d, r, means, ses, ratio, verdict, (d - r) >= T ** (1 / 6), (d, r) in errors))
    return out


# ---------------------------------------------------------------- experiments


def grid_cells(cfg: ExperimentConfig) -> list[tuple[int, int]]:
    cells = [(d, r) for d in cfg.grid_d for r in cfg.grid_r if r < d]
    if not cells:
        raise ValueError("grid has no valid (d, r) cell")
    return cells


def grid_jobs(cfg: ExperimentConfig) -> list[Job]:
    jobs = []
    for d, r in grid_cells(cfg):
        cell = cfg.replace(d=d, r=r)
        for rep in range(cfg.n_seeds):
            seed = env_seed(cell, rep)
            jobs.extend(Job(cell, m, seed, "grid") for m in cfg.methods)
    return jobs


def run_grid(cfg: ExperimentConfig, workers: int = 1) -> tuple[list[CellSummary], list[CellResult]]:
    results = execute(grid_jobs(cfg), workers)
    return summarize(results, cfg.T), results


REFERENCE = dict(d=4, r=1, K=4, T=6000, probe_period=30, W=100)

DEFAULT_SWEEPS = {
    "variance": [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5],
    "coupling": [0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0],
    "coverage": None,  # 1..d
    "probe_rate": [5, 10, 20, 30, 50, 100, 300],
    "rank_misspec": None,  # 1..d-1
    "oracle_quality": [1, 2, 4, 8, 16, 30, 40],
    "small_d": [0],
}


def evenly_spaced_segments(T: int, K: int) -> tuple:
    return tuple(segment_bounds(T, K))


def ablation_jobs(kind: str, cfg: ExperimentConfig) -> list[Job]:
    """Jobs for one ablation. The swept value is encoded in the experiment label."""
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; choose from {ABLATIONS}")
    sweep = cfg.sweep if cfg.sweep is not None else DEFAULT_SWEEPS[kind]
    if kind == "coverage" and sweep is None:
        sweep = list(range(1, cfg.d + 1))
    if kind == "rank_misspec" and sweep is None:
        sweep = list(range(1, cfg.d))
    if not sweep:
        raise ValueError(f"ablation {kind!r} needs a non-empty sweep list")

    jobs = []
    for value in sweep:
        label = f"{kind}={value}"
        if kind == "variance":
            cell, methods = cfg.replace(variance_offset=float(value)), ["spsc"]
        elif kind == "coupling":
            cell, methods = cfg.replace(eps_cross=float(value)), ["spsc"]
        elif kind == "coverage":
            cell, methods = cfg.replace(coverage=int(value)), ["spsc"]
        elif kind == "probe_rate":
            cell, methods = cfg.replace(probe_period=int(value)), ["spsc"]
        elif kind == "rank_misspec":
            cell, methods = cfg.replace(policy_r=int(value)), ["spsc"]
        elif kind == "oracle_quality":
            cell, methods = cfg, ["spsc"]
        else:
            cell, methods = cfg, list(cfg.methods)
        for rep in range(cfg.n_seeds):
            seed = env_seed(cfg, rep)  # same worlds across the sweep
            for m in methods:
                if kind == "oracle_quality":
                    bounds = evenly_spaced_segments(cfg.T, int(value) * cfg.K)
                    jobs.append(Job(cell, m, seed, label, oracle_segments=bounds))
                else:
                    jobs.append(Job(cell, m, seed, label))
    # references run once per seed, outside the sweep
    refs = {"coverage": ["linucb"], "oracle_quality": ["spsc_adaptive", "linucb"]}.get(kind, [])
    for rep in range(cfg.n_seeds):
        jobs.extend(Job(cfg, m, env_seed(cfg, rep), f"{kind}=reference") for m in refs)
    return jobs


def run_ablation(kind: str, cfg: ExperimentConfig, workers: int = 1) -> list[CellResult]:
    return execute(ablation_jobs(kind, cfg), workers)


def ablation_defaults(kind: str, cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    """The reference setting for an ablation, overridable by ``cfg``."""
    base = cfg or ExperimentConfig()
    if kind == "small_d":
        return base.replace(d=2, r=1, K=4, T=6000, n_actions=50, sigma_eps=1.0, probe_period=30, W=100,
                            methods=["spsc", "oracle", "d_linucb", "sw_linucb", "linucb", "restart_linucb"])
    if kind == "oracle_quality":
        return base.replace(d=60, r=5, K=5, T=5000)
    return base.replace(**REFERENCE)


def subspace_rate(cfg: ExperimentConfig, seed: int, m_max: int) -> list[tuple[int, float]]:
    """Projector error of the running lifted estimate after each of m_max probes
    on a single stationary segment."""
    from .ident import SubspaceTracker, update_tracker

    spec = cfg.replace(K=1, swap_at=None, T=max(cfg.T, m_max)).env_spec(seed)
    segments, state = build_env(spec)
    B = segments[0].B
    rng = np.random.default_rng([seed, 11])
    tracker = SubspaceTracker(spec.d, cfg.r)
    out = [(0, projector_distance(tracker.U_hat, B))]
    wanted = set(cfg.rate_bins)
    for m in range(1, m_max + 1):
        step(state, segments)
        u = tracker.draw(rng)
        y = observe(state, u)
        update_tracker(tracker, lift(y, u, spec.sigma_eps**2), refresh=m in wanted)
        if m in wanted:
            out.append((m, projector_distance(tracker.U_hat, B)))
    return out


def subspace_rate_report(cfg: ExperimentConfig) -> tuple[list[dict], float]:
    """Mean projector error per probe-count bin over seeds, and the log-log slope."""
    if not cfg.rate_bins:
        raise ValueError("rate_bins must be non-empty")
    m_max = max(cfg.rate_bins)
    per_bin: dict = defaultdict(list)
    for rep in range(cfg.n_seeds):
        for m, err in subspace_rate(cfg, env_seed(cfg, rep), m_max):
            per_bin[m].append(err)
    rows = [{"probe_count": m, "mean_error": float(np.mean(v)), "n": len(v)} for m, v in sorted(per_bin.items())]
    pts = [(m, e["mean_error"]) for m, e in zip(sorted(per_bin), rows) if m > 0]
    slope = float(np.polyfit(np.log([p[0] for p in pts]), np.log([p[1] for p in pts]), 1)[0])
    return rows, slope


# ---------------------------------------------------------------- output


def emit(results: Sequence[CellResult], fmt: str, path: str | Path, series: dict | None = None) -> Path:
    """Write results as CSV or JSON. ``series`` maps a run label to its
    cumulative-regret array and is written as long-form (run, t, value) rows."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            with path.open("w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
                writer.writeheader()
                for res in results:
                    writer.writerow(res.row())
            if series:
                series_path = path.with_name(path.stem + "_series.csv")
                with series_path.open("w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["run", "t", "value"])
                    for label, values in series.items():
                        writer.writerows((label, t + 1, float(v)) for t, v in enumerate(values))
        elif fmt == "json":
            payload: dict = {"results": [res.row() for res in results]}
            if series:
                payload["series"] = [
                    {"run": label, "t": t + 1, "value": float(v)}
                    for label, values in series.items() for t, v in enumerate(values)
                ]
            path.write_text(json.dumps(payload, indent=1, allow_nan=True))
        else:
            raise ValueError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc
    return path


def load_results(path: str | Path) -> list[CellResult]:
    path = Path(path)
    if path.suffix == ".json":
        return [CellResult(**row) for row in json.loads(path.read_text())["results"]]
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    conv = {"d": int, "r": int, "K": int, "T": int, "seed": int, "probe_count": int,
            "control_regret": float, "costed_regret": float, "subspace_error_final": float, "wall_ms": float}
    return [CellResult(**{k: conv.get(k, str)(v) for k, v in row.items()}) for row in rows]
