"""Piecewise-stationary low-rank linear dynamical environment.

The reward parameter is ``theta_t = B_k w_t`` where ``B_k`` (d x r, orthonormal
columns) is constant on each segment and ``w_t`` follows a stable AR(1)
recursion ``w_t = A_k w_{t-1} + eta_{t-1}``. The latent vector is carried over
segment boundaries; only ``B``, ``A`` and the innovation covariance switch.

Randomness is split into three independent streams (latent, actions, reward
noise) so that every policy run on the same seed sees the same world.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    d: int
    r: int
    K: int = 10
    T: int = 5000
    n_actions: int = 40
    sigma_eps: float = 0.3
    rho_A: float = 0.99
    sigma_eta: float = 0.04
    probe_cost: float = 0.1
    seed: int = 0
    # coupling ablation: eps_t <- eps_t + eps_cross * x^T theta_t
    eps_cross: float = 0.0
    # A_k = rho_A * Q with Q = I ("scaled_identity") or Haar-random ("random_orthogonal")
    dynamics: str = "scaled_identity"
    # detector check: one switch at this round to a factor orthogonal to the first (needs K=1)
    swap_at: int | None = None

    def __post_init__(self):
        if not (1 <= self.r < self.d):
            raise ValueError(f"need 1 <= r < d, got r={self.r}, d={self.d}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.T < self.K:
            raise ValueError("T must be >= K")
        if self.n_actions < 1:
            raise ValueError("n_actions must be >= 1")
        if self.sigma_eps < 0:
            raise ValueError("sigma_eps must be >= 0")
        if not (0.0 <= self.rho_A <= 1.0):
            raise ValueError(f"rho_A must lie in [0, 1], got {self.rho_A}")
        if self.sigma_eta <= 0:
            raise ValueError("sigma_eta must be > 0")
        if self.probe_cost < 0:
            raise ValueError("probe_cost must be >= 0")
        if self.dynamics not in ("scaled_identity", "random_orthogonal"):
            raise ValueError(f"unknown dynamics {self.dynamics!r}")
        if self.swap_at is not None:
            if self.K != 1 or not (1 < self.swap_at <= self.T):
                raise ValueError("swap_at needs K=1 and 1 < swap_at <= T")
            if 2 * self.r > self.d:
                raise ValueError("an orthogonal swap needs 2r <= d")

    @property
    def stationary_var(self) -> float:
        """Per-coordinate stationary variance of the latent AR(1)."""
        if self.rho_A >= 1.0:
            return self.sigma_eta**2
        return self.sigma_eta**2 / (1.0 - self.rho_A**2)

    @property
    def default_S_w(self) -> float:
        """Envelope 3 * sigma_eta * sqrt(r / (1 - rho^2)) used by policy radii."""
        return 3.0 * np.sqrt(self.r * self.stationary_var)


@dataclass(frozen=True)
class SegmentSpec:
    start: int  # inclusive, 1-based round index
    end: int  # exclusive
    B: np.ndarray
    A: np.ndarray
    Sigma_eta: np.ndarray

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class EnvState:
    spec: EnvSpec
    t: int  # last completed round (0 before the first step)
    k: int  # active segment index (0-based)
    w: np.ndarray
    theta: np.ndarray
    latent_rng: np.random.Generator
    action_rng: np.random.Generator
    noise_rng: np.random.Generator
    max_w_norm: float = 0.0
    _chol: list = field(default_factory=list, repr=False)


@dataclass
class RoundView:
    actions: np.ndarray  # (n_actions, d), unit rows
    theta_snapshot: np.ndarray  # hidden; harness only


def segment_bounds(T: int, K: int) -> list[tuple[int, int]]:
    """Equal partition of rounds 1..T into K half-open intervals."""
    edges = [1 + (i * T) // K for i in range(K + 1)]
    return [(edges[i], edges[i + 1]) for i in range(K)]


def random_orthonormal(rng: np.random.Generator, d: int, r: int) -> np.ndarray:
    q, rr = np.linalg.qr(rng.standard_normal((d, r)))
    # fix the QR sign ambiguity so the draw is Haar
    return q * np.sign(np.diag(rr))


def build_env(spec: EnvSpec) -> tuple[list[SegmentSpec], EnvState]:
    root = np.random.SeedSequence(spec.seed)
    world_ss, latent_ss, action_ss, noise_ss = root.spawn(4)
    world_rng = np.random.default_rng(world_ss)

    if spec.swap_at is None:
        bounds = segment_bounds(spec.T, spec.K)
    else:
        bounds = [(1, spec.swap_at), (spec.swap_at, spec.T + 1)]
    segments = []
    for start, end in bounds:
        B = random_orthonormal(world_rng, spec.d, spec.r)
        if segments and spec.swap_at is not None:
            B0 = segments[0].B
            B = np.linalg.qr(B - B0 @ (B0.T @ B))[0]
        Q = random_orthonormal(world_rng, spec.r, spec.r)
        A = spec.rho_A * (Q if spec.dynamics == "random_orthogonal" else np.eye(spec.r))
        Sigma = spec.sigma_eta**2 * np.eye(spec.r)
        segments.append(SegmentSpec(start, end, B, A, Sigma))

    latent_rng = np.random.default_rng(latent_ss)
    w0 = np.sqrt(spec.stationary_var) * latent_rng.standard_normal(spec.r)
    state = EnvState(
        spec=spec,
        t=0,
        k=0,
        w=w0,
        theta=segments[0].B @ w0,
        latent_rng=latent_rng,
        action_rng=np.random.default_rng(action_ss),
        noise_rng=np.random.default_rng(noise_ss),
        max_w_norm=float(np.linalg.norm(w0)),
        _chol=[np.linalg.cholesky(s.Sigma_eta) for s in segments],
    )
    return segments, state


def segment_index(segments: list[SegmentSpec], t: int) -> int:
    for k, seg in enumerate(segments):
        if seg.start <= t < seg.end:
            return k
    raise IndexError(f"round {t} outside horizon")


def sample_sphere(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def step(state: EnvState, segments: list[SegmentSpec]) -> RoundView:
    """Advance to round t+1 and draw its action set."""
    spec = state.spec
    t = state.t + 1
    if t > spec.T:
        raise RuntimeError(f"cannot step past horizon T={spec.T}")
    k = state.k
    while t >= segments[k].end:
        k += 1
    seg = segments[k]
    eta = state._chol[k] @ state.latent_rng.standard_normal(spec.r)
    w = seg.A @ state.w + eta
    state.t, state.k, state.w = t, k, w
    state.theta = seg.B @ w
    state.max_w_norm = max(state.max_w_norm, float(np.linalg.norm(w)))
    actions = sample_sphere(state.action_rng, spec.n_actions, spec.d)
    return RoundView(actions=actions, theta_snapshot=state.theta.copy())


def observe(state: EnvState, x: np.ndarray) -> float:
    # one noise draw per round, whatever is played, keeps the noise stream aligned
    signal = float(x @ state.theta)
    eps = state.spec.sigma_eps * state.noise_rng.standard_normal()
    eps += state.spec.eps_cross * signal
    return signal + eps
