"""Probe-side subspace identification.

Scaled-sphere probes ``u = sqrt(d) v`` satisfy ``E[(u^T M u) u u^T] = K(M)`` with
``K(M) = d/(d+2) (tr(M) I + 2M)``. Lifting the centered squared reward through
``K^{-1}`` gives a matrix sample whose mean is the second moment of theta, so
the top eigenvectors of the running average estimate the reward subspace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SYM_TOL = 1e-9
TIE_TOL = 1e-12


def _check_symmetric(M: np.ndarray) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if np.max(np.abs(M - M.T), initial=0.0) > SYM_TOL:
        raise ValueError("matrix is not symmetric")


def draw_probe(d: int, rng: np.random.Generator, coverage: int | None = None) -> np.ndarray:
    """Draw ``u`` uniform on the sphere of radius sqrt(d).

    ``coverage`` restricts the support to the first ``coverage`` coordinates.
    """
    d_cov = d if coverage is None else coverage
    if not (1 <= d_cov <= d):
        raise ValueError(f"coverage must lie in [1, {d}], got {d_cov}")
    g = rng.standard_normal(d_cov)
    u = np.zeros(d)
    u[:d_cov] = np.sqrt(d) * g / np.linalg.norm(g)
    return u


def k_apply(M: np.ndarray) -> np.ndarray:
    _check_symmetric(M)
    d = M.shape[0]
    return d / (d + 2) * (np.trace(M) * np.eye(d) + 2.0 * M)


def k_inverse(N: np.ndarray) -> np.ndarray:
    _check_symmetric(N)
    d = N.shape[0]
    return (d + 2) / (2 * d) * N - np.trace(N) / (2 * d) * np.eye(d)


@dataclass
class ProbeSample:
    u: np.ndarray
    y: float
    s: float
    G: np.ndarray


def lift(y: float, u: np.ndarray, sigma_hat_sq: float) -> ProbeSample:
    """Centered statistic ``s = y^2 - sigma_hat_sq`` and ``G = K^{-1}(s u u^T)``.

    Uses the closed form directly (``tr(u u^T) = |u|^2``) rather than building
    ``s u u^T`` and checking symmetry.
    """
    d = u.shape[0]
    s = y * y - sigma_hat_sq
    G = (d + 2) / (2 * d) * s * np.outer(u, u)
    G[np.diag_indices(d)] -= s * float(u @ u) / (2 * d)
    return ProbeSample(u=u, y=y, s=s, G=G)


def top_r_subspace(M: np.ndarray, r: int) -> np.ndarray:
    """Eigenvectors of the ``r`` algebraically largest eigenvalues of ``M``.

    Columns are ordered by decreasing eigenvalue. Within a numerically tied
    group, columns are ordered by the index of their largest-magnitude entry,
    and every column is signed so that entry is positive.
    """
    d = M.shape[0]
    if not (1 <= r <= d):
        raise ValueError(f"rank must lie in [1, {d}], got {r}")
    vals, vecs = np.linalg.eigh((M + M.T) / 2)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    pivots = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivots, np.arange(d)])
    vecs = vecs * np.where(signs == 0, 1.0, signs)

    order = []
    i = 0
    while i < d and len(order) < r:
        j = i + 1
        while j < d and vals[j - 1] - vals[j] < TIE_TOL:
            j += 1
        order.extend(sorted(range(i, j), key=lambda c: pivots[c]))
        i = j
    return vecs[:, order[:r]]


def projector(U: np.ndarray) -> np.ndarray:
    return U @ U.T


def projector_distance(U1: np.ndarray, U2: np.ndarray) -> float:
    """Operator norm of ``U1 U1^T - U2 U2^T``."""
    D = projector(U1) - projector(U2)
    if not D.any():
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvalsh(D))))


@dataclass
class SubspaceTracker:
    d: int
    r: int
    coverage: int | None = None
    M_acc: np.ndarray = field(init=False)
    m: int = field(init=False, default=0)
    U_hat: np.ndarray = field(init=False)

    def __post_init__(self):
        if not (1 <= self.r <= self.d):
            raise ValueError(f"rank {self.r} incompatible with d={self.d}")
        self.M_acc = np.zeros((self.d, self.d))
        self.U_hat = np.eye(self.d)[:, : self.r]

    def reset(self, keep_basis: bool = True) -> None:
        """Zero the accumulator; the basis is carried over until the next probe."""
        self.M_acc = np.zeros((self.d, self.d))
        self.m = 0
        if not keep_basis:
            self.U_hat = np.eye(self.d)[:, : self.r]

    @property
    def mean(self) -> np.ndarray:
        return self.M_acc / max(self.m, 1)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return draw_probe(self.d, rng, self.coverage)


def update_tracker(tracker: SubspaceTracker, sample: ProbeSample, refresh: bool = True) -> SubspaceTracker:
    if sample.G.shape != tracker.M_acc.shape:
        raise ValueError("sample dimension does not match tracker")
    tracker.M_acc += sample.G
    tracker.m += 1
    if refresh:
        tracker.U_hat = top_r_subspace(tracker.mean, tracker.r)
    return tracker


def estimate_variance(records: Sequence[tuple[np.ndarray, float]], rank: int = 1) -> float:
    """Split-sample noise variance estimate from probe records ``(u, y)``.

    The first half builds an uncentered lifted moment, which equals the
    rank-``rank`` signal moment plus ``(sigma^2 / d) I``. The scaled identity is
    read off the trailing eigenvalues and removed, the remainder truncated to
    rank ``rank``, and the second half averages ``y^2 - u^T M u``. Negative
    estimates are clamped to 0.
    """
    N = len(records)
    if N < 4:
        raise ValueError(f"need at least 4 probes, got {N}")
    half = N // 2
    d = records[0][0].shape[0]
    if not (1 <= rank < d):
        raise ValueError(f"rank must lie in [1, {d - 1}], got {rank}")
    M = np.zeros((d, d))
    for u, y in records[:half]:
        M += lift(y, u, 0.0).G
    M /= half
    vals, vecs = np.linalg.eigh(M)
    floor = vals[: d - rank].mean()
    top = vecs[:, d - rank:]
    M_sig = top @ np.diag(vals[d - rank:] - floor) @ top.T
    resid = [y * y - u @ M_sig @ u for u, y in records[half:]]
    return max(0.0, float(np.mean(resid)))


def lifted_envelope(d: int, S_w: float, sigma_eps: float, sigma_hat_sq: float, T: int, delta: float) -> float:
    """Almost-sure envelope R_X = d * R_s + S_w^2 on the lifted sample."""
    L_eps = sigma_eps * np.sqrt(2.0 * np.log(2.0 * T / delta))
    R_s = (np.sqrt(d) * S_w + L_eps) ** 2 + sigma_hat_sq
    return d * R_s + S_w**2


def rank_threshold(d: int, m: int, delta: float, R_X: float) -> float:
    return 2.0 * R_X * np.sqrt(np.log(2.0 * d / delta) / m)


def adaptive_rank(M_hat: np.ndarray, m: int, delta: float, R_X: float) -> int:
    """Number of eigenvalues above twice the rank threshold, floored at 1."""
    if m < 1:
        raise ValueError("need at least one probe")
    d = M_hat.shape[0]
    tau = rank_threshold(d, m, delta, R_X)
    vals = np.linalg.eigvalsh((M_hat + M_hat.T) / 2)
    return max(1, int(np.sum(vals > 2.0 * tau)))
