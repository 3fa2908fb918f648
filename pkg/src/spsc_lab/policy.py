"""SPSC and SPSC-Adaptive.

Both policies interleave scaled-sphere probe rounds, which feed the lifted
second-moment estimator, with exploitation rounds that run windowed ridge-UCB
on actions projected onto the current basis estimate. SPSC is told where the
segments start; SPSC-Adaptive detects changes from the probe stream itself.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .ident import (
    SubspaceTracker,
    estimate_variance,
    lift,
    top_r_subspace,
    update_tracker,
)


@dataclass(frozen=True)
class Probe:
    """Directive to play the probe vector ``u`` instead of an action."""

    u: np.ndarray


@dataclass(frozen=True)
class SpscConfig:
    r: int
    W: int = 400
    lam: float = 0.01
    delta: float = 0.05
    sigma_eps: float = 0.3
    S_w: float = 1.0
    K: int = 10
    R_A: float = 1.0
    c0: float = 1.0
    probe_period: int | None = 50
    gamma_mode: str = "off"
    gamma_scale: float = 1.0
    # centering: "known" uses sigma_eps**2, "plugin" estimates it from segment-1 probes
    variance_mode: str = "known"
    variance_offset: float = 0.0  # ablation A
    coverage: int | None = None  # ablation C
    # adaptive variant
    mu: float = 0.1
    n_det: int = 50
    tau_burn: int = 100
    m_relearn: int = 30
    cusum_threshold: float = 3.0
    detector_threshold: float | None = None

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")
        if self.W < 1:
            raise ValueError("W must be >= 1")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.gamma_mode not in ("off", "plugin"):
            raise ValueError(f"unknown gamma_mode {self.gamma_mode!r}")
        if self.variance_mode not in ("known", "plugin"):
            raise ValueError(f"unknown variance_mode {self.variance_mode!r}")
        if self.probe_period is not None and self.probe_period < 1:
            raise ValueError("probe_period must be >= 1")


def probe_budget(length: int, c0: float, probe_period: int | None = None) -> int:
    if length < 1:
        raise ValueError("segment length must be >= 1")
    if probe_period is not None:
        return math.ceil(length / probe_period)
    # round before ceil so that e.g. 1000**(2/3) = 99.999... gives 100
    return min(length, math.ceil(round(c0 * length ** (2.0 / 3.0), 9)))


def probe_schedule(length: int, c0: float = 1.0, probe_period: int | None = None) -> list[int]:
    """Evenly spaced in-segment probe offsets, starting at offset 0."""
    m = probe_budget(length, c0, probe_period)
    if probe_period is not None:
        return list(range(0, length, probe_period))
    return [(i * length) // m for i in range(m)]


def beta(r, W, lam, sigma_eps, delta, K, R_A=1.0, S_w=1.0) -> float:
    """Self-normalized confidence radius of the projected ridge estimate."""
    return sigma_eps * math.sqrt(
        r * math.log(1.0 + W * R_A**2 / (lam * r)) + 2.0 * math.log(2.0 * K / delta)
    ) + math.sqrt(lam) * S_w


def argmax_lowest(scores: np.ndarray, rtol: float = 1e-12) -> int:
    """Index of the best score; scores within rounding of the max count as
    ties and go to the lowest index."""
    best = float(np.max(scores))
    return int(np.flatnonzero(scores >= best - rtol * max(1.0, abs(best)))[0])


def gamma(m: int, d: int, cfg: SpscConfig) -> float:
    if cfg.gamma_mode == "off":
        return 0.0
    return cfg.gamma_scale * min(1.0, math.sqrt(math.log(2.0 * d / cfg.delta) / max(m, 1)))


class ExploitWindow:
    """Last ``W`` exploitation pairs, kept as ambient sufficient statistics.

    Re-projecting the window through a basis ``U`` is then exact:
    ``sum (U^T x)(U^T x)^T = U^T (sum x x^T) U``.
    """

    def __init__(self, d: int, W: int):
        self.d, self.W = d, W
        self.buf: deque = deque()
        self.gram = np.zeros((d, d))
        self.xy = np.zeros(d)

    def __len__(self):
        return len(self.buf)

    def add(self, x: np.ndarray, y: float) -> None:
        self.buf.append((x, y))
        self.gram += np.outer(x, x)
        self.xy += y * x
        if len(self.buf) > self.W:
            x0, y0 = self.buf.popleft()
            self.gram -= np.outer(x0, x0)
            self.xy -= y0 * x0

    def clear(self) -> None:
        self.buf.clear()
        self.gram = np.zeros((self.d, self.d))
        self.xy = np.zeros(self.d)


def projected_ucb_scores(U, window: ExploitWindow, actions, lam, beta_, gamma_=0.0) -> np.ndarray:
    r = U.shape[1]
    V = lam * np.eye(r) + U.T @ window.gram @ U
    b = U.T @ window.xy
    fac = cho_factor(V)
    a_hat = cho_solve(fac, b)
    Z = actions @ U
    width = np.sqrt(np.maximum(np.einsum("ij,ji->i", Z, cho_solve(fac, Z.T)), 0.0))
    scores = Z @ a_hat + beta_ * width
    if gamma_:
        scores = scores + gamma_ * np.linalg.norm(actions, axis=1)
    return scores


class _SpscBase:
    def __init__(self, d: int, cfg: SpscConfig, rng: np.random.Generator):
        if cfg.r > d:
            raise ValueError(f"rank r={cfg.r} exceeds ambient dimension d={d}")
        self.d, self.cfg, self.rng = d, cfg, rng
        self.tracker = SubspaceTracker(d, cfg.r, coverage=cfg.coverage)
        self.window = ExploitWindow(d, cfg.W)
        self.beta = beta(cfg.r, cfg.W, cfg.lam, cfg.sigma_eps, cfg.delta, cfg.K, cfg.R_A, cfg.S_w)
        self.n_probes = 0
        self._pending: Probe | None = None
        self._plugin_records: list | None = [] if cfg.variance_mode == "plugin" else None
        self._sigma_hat_sq = cfg.sigma_eps**2 if cfg.variance_mode == "known" else 0.0

    @property
    def basis(self) -> np.ndarray:
        return self.tracker.U_hat

    @property
    def sigma_hat_sq(self) -> float:
        return self._sigma_hat_sq + self.cfg.variance_offset

    def _finish_plugin(self) -> None:
        recs = self._plugin_records
        if recs is not None and len(recs) >= 4:
            self._sigma_hat_sq = estimate_variance(recs, min(self.cfg.r, self.d - 1))
        self._plugin_records = None

    def _exploit(self, actions: np.ndarray) -> int:
        scores = projected_ucb_scores(
            self.basis, self.window, actions, self.cfg.lam, self.beta,
            gamma(self.tracker.m, self.d, self.cfg),
        )
        return argmax_lowest(scores)

    def _probe(self) -> Probe:
        self._pending = Probe(self.tracker.draw(self.rng))
        self.n_probes += 1
        return self._pending

    def _lift(self, y: float):
        u = self._pending.u
        if self._plugin_records is not None:
            self._plugin_records.append((u, y))
        return lift(y, u, self.sigma_hat_sq)


class Spsc(_SpscBase):
    """Probe/exploit interleaving with oracle segment starts.

    ``segments`` is a list of ``(start, end)`` round intervals; it may be a
    corrupted version of the truth (oracle-quality ablation).
    """

    def __init__(self, d, cfg, rng, segments: Sequence[tuple[int, int]]):
        super().__init__(d, cfg, rng)
        self.starts = {s for s, _ in segments}
        self.probe_rounds = set()
        for s, e in segments:
            self.probe_rounds.update(s + o for o in probe_schedule(e - s, cfg.c0, cfg.probe_period))
        self._first_end = segments[0][1]

    def select(self, t: int, actions: np.ndarray):
        if t == self._first_end and self._plugin_records is not None:
            self._finish_plugin()
        if t in self.starts:
            self.tracker.reset(keep_basis=True)
            self.window.clear()
        if t in self.probe_rounds:
            return self._probe()
        self._pending = None
        return self._exploit(actions)

    def update(self, x: np.ndarray, y: float) -> None:
        if self._pending is not None:
            update_tracker(self.tracker, self._lift(y))
            self._pending = None
        else:
            self.window.add(x, y)


def detector_stat(recent_mean: np.ndarray, past_mean: np.ndarray) -> float:
    """Operator norm of the difference between two buffer means."""
    D = recent_mean - past_mean
    return float(np.max(np.abs(np.linalg.eigvalsh((D + D.T) / 2))))


class LiftedBuffer:
    """Fixed-capacity FIFO of lifted samples with a running sum."""

    def __init__(self, d: int, n: int):
        self.n = n
        self.items: deque = deque()
        self.total = np.zeros((d, d))

    def __len__(self):
        return len(self.items)

    @property
    def full(self) -> bool:
        return len(self.items) >= self.n

    def push(self, G: np.ndarray) -> np.ndarray | None:
        self.items.append(G)
        self.total += G
        if len(self.items) > self.n:
            old = self.items.popleft()
            self.total -= old
            return old
        return None

    def mean(self) -> np.ndarray:
        return self.total / len(self.items)

    def clear(self) -> None:
        self.items.clear()
        self.total[:] = 0.0


class DetectorState:
    RECOVERY = "recovery"
    NORMAL = "normal"

    def __init__(self, d: int, n: int):
        self.phase = self.RECOVERY
        self.rec_count = 0
        self.recent = LiftedBuffer(d, n)
        self.past = LiftedBuffer(d, n)
        self.rounds_since_reset = 0
        self.S_t = float("nan")

    def push(self, G: np.ndarray) -> None:
        # a sample leaving the recent window moves to the past window
        old = self.recent.push(G)
        if old is not None:
            self.past.push(old)

    def clear(self) -> None:
        self.recent.clear()
        self.past.clear()

    def armed(self, tau_burn: int) -> bool:
        return self.past.full and self.recent.full and self.rounds_since_reset >= tau_burn

    def stat(self) -> float:
        if not (len(self.recent) and len(self.past)):
            return float("nan")
        self.S_t = detector_stat(self.recent.mean(), self.past.mean())
        return self.S_t


class SpscAdaptive(_SpscBase):
    """Unknown boundaries: Bernoulli probing plus a two-window change detector."""

    def __init__(self, d, cfg, rng, threshold: float | None = None):
        super().__init__(d, cfg, rng)
        b = threshold if threshold is not None else cfg.detector_threshold
        if b is None:
            raise ValueError("SPSC-Adaptive needs a calibrated detector threshold")
        self.b = float(b)
        self.det = DetectorState(d, cfg.n_det)
        self.fire_rounds: list[int] = []
        self.stat_trace: list[tuple[int, float]] = []
        self._t = 0

    def select(self, t: int, actions: np.ndarray):
        self._t = t
        self.det.rounds_since_reset += 1
        if self.det.phase == DetectorState.RECOVERY:
            return self._probe()
        if self.rng.random() < self.cfg.mu:
            return self._probe()
        self._pending = None
        return self._exploit(actions)

    def _enter_recovery(self) -> None:
        self.det.phase = DetectorState.RECOVERY
        self.det.rec_count = 0
        self.tracker.reset(keep_basis=True)
        self.det.clear()
        self.window.clear()

    def update(self, x: np.ndarray, y: float) -> None:
        if self._pending is None:
            self.window.add(x, y)
            return
        sample = self._lift(y)
        self._pending = None
        det, cfg = self.det, self.cfg
        if det.phase == DetectorState.RECOVERY:
            update_tracker(self.tracker, sample, refresh=False)
            det.rec_count += 1
            if det.rec_count >= cfg.m_relearn:
                self.tracker.U_hat = top_r_subspace(self.tracker.mean, cfg.r)
                if self._plugin_records is not None:
                    self._finish_plugin()
                det.clear()
                self.window.clear()
                det.phase = DetectorState.NORMAL
                det.rounds_since_reset = 0
            return
        update_tracker(self.tracker, sample)
        det.push(sample.G)
        if det.armed(cfg.tau_burn):
            S = det.stat()
            self.stat_trace.append((self._t, S))
            if S > self.b:
                self.fire_rounds.append(self._t)
                self._enter_recovery()
