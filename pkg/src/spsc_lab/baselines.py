"""Reference policies: ambient LinUCB and its non-stationary variants, the
oracle-subspace LinUCB, and reward-outer-product PCA low-rank adaptations."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .ident import top_r_subspace
from .policy import ExploitWindow, argmax_lowest, beta, projected_ucb_scores


@dataclass(frozen=True)
class BaselineConfig:
    lam: float = 0.01
    delta: float = 0.05
    sigma_eps: float = 0.3
    S_w: float = 1.0
    K: int = 10
    T: int = 5000
    R_A: float = 1.0
    W: int = 400
    zeta: float = 0.998
    r: int = 1
    pca_warmup: int = 30
    pca_every: int = 20
    lr_window: int = 200


class AmbientRidge:
    """LinUCB in R^d, optionally windowed, discounted or periodically restarted.

    ``kind`` is one of ``linucb``, ``sw``, ``discount``, ``restart``.
    """

    KINDS = ("linucb", "sw", "discount", "restart")

    def __init__(self, d: int, cfg: BaselineConfig, kind: str = "linucb", dim_for_beta: int | None = None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown ambient kind {kind!r}")
        self.d, self.cfg, self.kind = d, cfg, kind
        self.dim_for_beta = dim_for_beta or d
        self.period = max(1, cfg.T // cfg.K) if kind == "restart" else None
        self.reset()

    def reset(self) -> None:
        d, lam = self.d, self.cfg.lam
        self.V = lam * np.eye(d)
        self.b = np.zeros(d)
        self.n = 0
        self.buf: deque = deque()

    def _effective_window(self) -> float:
        if self.kind == "sw":
            return min(self.n, self.cfg.W)
        if self.kind == "discount" and self.cfg.zeta < 1.0:
            return min(self.n, 1.0 / (1.0 - self.cfg.zeta))
        return self.n

    def scores(self, X: np.ndarray) -> np.ndarray:
        c = self.cfg
        fac = cho_factor(self.V)
        theta = cho_solve(fac, self.b)
        width = np.sqrt(np.maximum(np.einsum("ij,ji->i", X, cho_solve(fac, X.T)), 0.0))
        rad = beta(self.dim_for_beta, self._effective_window(), c.lam, c.sigma_eps, c.delta, c.K, c.R_A, c.S_w)
        return X @ theta + rad * width

    def select(self, t: int, actions: np.ndarray) -> int:
        if self.period is not None and t > 1 and (t - 1) % self.period == 0:
            self.reset()
        return argmax_lowest(self.scores(actions))

    def update(self, x: np.ndarray, y: float) -> None:
        if self.kind == "discount":
            z = self.cfg.zeta
            self.V = z * self.V + np.outer(x, x) + (1.0 - z) * self.cfg.lam * np.eye(self.d)
            self.b = z * self.b + y * x
        else:
            self.V += np.outer(x, x)
            self.b += y * x
            if self.kind == "sw":
                self.buf.append((x, y))
                if len(self.buf) > self.cfg.W:
                    x0, y0 = self.buf.popleft()
                    self.V -= np.outer(x0, x0)
                    self.b -= y0 * x0
        self.n += 1


class OracleLinUCB:
    """LinUCB on ``z = B_k^T x`` with the true factor, reset at true boundaries."""

    def __init__(self, d: int, cfg: BaselineConfig, segments: Sequence | None):
        if not segments:
            raise ValueError("Oracle-LinUCB needs the true segments")
        self.segments = list(segments)
        self.r = self.segments[0].B.shape[1]
        self.inner = AmbientRidge(self.r, cfg, "linucb")
        self._k = -1
        self._B = None

    @property
    def basis(self) -> np.ndarray:
        return self._B

    def select(self, t: int, actions: np.ndarray) -> int:
        k = self._k
        while k < 0 or t >= self.segments[k].end:
            k += 1
        if k != self._k:
            self._k, self._B = k, self.segments[k].B
            self.inner.reset()
        return self.inner.select(t, actions @ self._B)

    def update(self, x: np.ndarray, y: float) -> None:
        self.inner.update(self._B.T @ x, y)


class PcaLowRank:
    """Running top-r eigenspace of sum w_t (y_t x_t)(y_t x_t)^T.

    ``lowoful``: unit weights over the whole history. ``voful``: weights
    1 / (|x|^2 + sigma^2). ``lr_reward``: unit weights over the last
    ``lr_window`` rounds, restarted at the true segment boundaries. Before the
    first eigenspace estimate the policy plays ambient LinUCB.
    """

    KINDS = ("lowoful", "voful", "lr_reward")

    def __init__(self, d: int, cfg: BaselineConfig, kind: str, segments: Sequence | None = None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown PCA kind {kind!r}")
        if kind == "lr_reward" and not segments:
            raise ValueError("lr_reward resets at true boundaries and needs segments")
        self.d, self.cfg, self.kind = d, cfg, kind
        self.starts = {s.start for s in segments} if kind == "lr_reward" else set()
        self.beta = beta(cfg.r, cfg.W, cfg.lam, cfg.sigma_eps, cfg.delta, cfg.K, cfg.R_A, cfg.S_w)
        self.ambient = AmbientRidge(d, cfg, "linucb")
        self.window = ExploitWindow(d, cfg.W)
        self._reset()

    def _reset(self) -> None:
        self.M = np.zeros((self.d, self.d))
        self.vbuf: deque = deque()
        self.n = 0
        self.U: np.ndarray | None = None
        self.ambient.reset()
        self.window.clear()

    @property
    def basis(self):
        return self.U

    def select(self, t: int, actions: np.ndarray) -> int:
        if t in self.starts and t > 1:
            self._reset()
        if self.U is None:
            return self.ambient.select(t, actions)
        return argmax_lowest(projected_ucb_scores(self.U, self.window, actions, self.cfg.lam, self.beta))

    def update(self, x: np.ndarray, y: float) -> None:
        c = self.cfg
        v = y * x
        w = 1.0 / (float(x @ x) + c.sigma_eps**2) if self.kind == "voful" else 1.0
        self.M += w * np.outer(v, v)
        if self.kind == "lr_reward":
            self.vbuf.append(v)
            if len(self.vbuf) > c.lr_window:
                v0 = self.vbuf.popleft()
                self.M -= np.outer(v0, v0)
        self.ambient.update(x, y)
        self.window.add(x, y)
        self.n += 1
        if self.n >= c.pca_warmup and (self.n - c.pca_warmup) % c.pca_every == 0:
            self.U = top_r_subspace(self.M, c.r)
