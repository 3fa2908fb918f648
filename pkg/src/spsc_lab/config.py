"""Experiment configuration: one flat set of keys shared by every command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .baselines import BaselineConfig
from .env import EnvSpec
from .policy import SpscConfig

ALL_METHODS = (
    "spsc",
    "spsc_adaptive",
    "linucb",
    "oracle",
    "sw_linucb",
    "d_linucb",
    "restart_linucb",
    "lr_reward",
    "lowoful",
    "voful",
)

# config-file spellings that differ from attribute names
ALIASES = {"lambda": "lam", "seeds": "n_seeds"}


@dataclass
class ExperimentConfig:
    # environment
    d: int = 60
    r: int = 5
    K: int = 10
    T: int = 5000
    n_actions: int = 40
    sigma_eps: float = 0.3
    rho_A: float = 0.99
    sigma_eta: float = 0.04
    probe_cost: float = 0.1
    eps_cross: float = 0.0
    dynamics: str = "scaled_identity"
    swap_at: int | None = None
    # policy
    c0: float = 1.0
    probe_period: int | None = 50
    W: int = 400
    lam: float = 0.01
    delta: float = 0.05
    S_w: float | None = None  # None: 3 sigma_eta sqrt(r / (1 - rho^2))
    gamma_mode: str = "off"
    gamma_scale: float = 1.0
    variance_mode: str = "known"
    variance_offset: float = 0.0
    coverage: int | None = None
    policy_r: int | None = None  # working rank if different from the true rank
    mu: float = 0.1
    n_det: int = 50
    tau_burn: int = 100
    m_relearn: int = 30
    cusum_threshold: float = 3.0
    detector_threshold: float | None = None
    calibration_runs: int = 20
    # baselines
    zeta: float = 0.998
    lr_window: int = 200
    # experiment
    methods: list[str] = field(default_factory=lambda: ["spsc", "linucb", "oracle"])
    n_seeds: int = 10
    base_seed: int = 0
    grid_d: list[int] = field(default_factory=lambda: [5, 10, 20, 30, 45, 60, 80, 100])
    grid_r: list[int] = field(default_factory=lambda: [1, 3, 5, 10, 15, 20])
    sweep: list[float] | None = None
    rate_bins: list[int] = field(default_factory=lambda: [50, 100, 200, 400, 800, 1600])

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        """Build from config-file keys; keys absent from ``raw`` come from ``base``."""
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            key = ALIASES.get(key, key)
            if key not in names:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = value
        cfg = dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValueError(f"config {path} must be a mapping")
        return cls.from_dict(raw, base)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        unknown = [m for m in self.methods if m not in ALL_METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {ALL_METHODS}")
        if self.n_seeds < 1:
            raise ValueError("need at least one seed")
        self.env_spec(0)

    def quick(self) -> "ExperimentConfig":
        """Smoke-test scale: 3 seeds, T=2000 (not used for acceptance)."""
        return self.replace(n_seeds=3, T=min(self.T, 2000))

    def env_spec(self, seed: int) -> EnvSpec:
        return EnvSpec(
            d=self.d, r=self.r, K=self.K, T=self.T, n_actions=self.n_actions,
            sigma_eps=self.sigma_eps, rho_A=self.rho_A, sigma_eta=self.sigma_eta,
            probe_cost=self.probe_cost, seed=seed, eps_cross=self.eps_cross,
            dynamics=self.dynamics, swap_at=self.swap_at,
        )

    @property
    def envelope(self) -> float:
        if self.S_w is not None:
            return self.S_w
        return self.env_spec(0).default_S_w

    @property
    def working_rank(self) -> int:
        return self.policy_r if self.policy_r is not None else self.r

    def spsc_config(self) -> SpscConfig:
        return SpscConfig(
            r=self.working_rank, W=self.W, lam=self.lam, delta=self.delta,
            sigma_eps=self.sigma_eps, S_w=self.envelope, K=self.K, c0=self.c0,
            probe_period=self.probe_period, gamma_mode=self.gamma_mode,
            gamma_scale=self.gamma_scale, variance_mode=self.variance_mode,
            variance_offset=self.variance_offset, coverage=self.coverage,
            mu=self.mu, n_det=self.n_det, tau_burn=self.tau_burn,
            m_relearn=self.m_relearn, cusum_threshold=self.cusum_threshold,
            detector_threshold=self.detector_threshold,
        )

    def baseline_config(self) -> BaselineConfig:
        return BaselineConfig(
            lam=self.lam, delta=self.delta, sigma_eps=self.sigma_eps,
            S_w=self.envelope, K=self.K, T=self.T, W=self.W, zeta=self.zeta,
            r=self.working_rank, lr_window=self.lr_window,
        )
