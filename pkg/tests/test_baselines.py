import math

import numpy as np
import pytest

from spsc_lab.baselines import AmbientRidge, BaselineConfig, OracleLinUCB, PcaLowRank
from spsc_lab.config import ExperimentConfig
from spsc_lab.env import EnvSpec, build_env
from spsc_lab.harness import run_episode
from spsc_lab.ident import projector_distance
from spsc_lab.policy import beta


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def play(policy, rng, d, T, theta, sigma=0.0, n=8):
    picks = []
    for t in range(1, T + 1):
        X = unit_rows(rng, n, d)
        i = policy.select(t, X)
        picks.append(i)
        policy.update(X[i], float(X[i] @ theta) + sigma * rng.standard_normal())
    return picks


def test_unknown_kinds_rejected():
    with pytest.raises(ValueError):
        AmbientRidge(3, BaselineConfig(), "ucb2")
    with pytest.raises(ValueError):
        PcaLowRank(3, BaselineConfig(), "svd")
    with pytest.raises(ValueError):
        PcaLowRank(3, BaselineConfig(), "lr_reward")  # needs segments
    with pytest.raises(ValueError):
        OracleLinUCB(3, BaselineConfig(), None)


def test_empty_history_index_and_tie():
    cfg = BaselineConfig(lam=0.04)
    pol = AmbientRidge(6, cfg)
    X = unit_rows(np.random.default_rng(0), 12, 6)
    b_d = beta(6, 0, cfg.lam, cfg.sigma_eps, cfg.delta, cfg.K, cfg.R_A, cfg.S_w)
    np.testing.assert_allclose(pol.scores(X), b_d / math.sqrt(cfg.lam) * np.ones(12), rtol=1e-12)
    assert pol.select(1, X) == 0


def test_linucb_consistency_noiseless():
    rng = np.random.default_rng(1)
    d = 5
    theta = np.r_[0.8, 0.3, 0.0, -0.2, 0.1]
    aligned = theta / np.linalg.norm(theta)
    cfg = BaselineConfig(sigma_eps=0.0, S_w=1.0, lam=0.01)
    pol = AmbientRidge(d, cfg)
    hits = 0
    for t in range(1, 201):
        X = np.vstack([unit_rows(rng, 9, d), aligned])
        i = pol.select(t, X)
        if t > 100:
            hits += i == 9
        pol.update(X[i], float(X[i] @ theta))
    assert hits >= 95


def test_sliding_window_matches_rebuild():
    rng = np.random.default_rng(2)
    d, W = 4, 7
    cfg = BaselineConfig(W=W, lam=0.3)
    pol = AmbientRidge(d, cfg, "sw")
    hist = []
    for x in unit_rows(rng, 25, d):
        y = float(rng.standard_normal())
        pol.update(x, y)
        hist.append((x, y))
        assert len(pol.buf) <= W
    X = np.array([x for x, _ in hist[-W:]])
    Y = np.array([y for _, y in hist[-W:]])
    np.testing.assert_allclose(pol.V, 0.3 * np.eye(d) + X.T @ X, atol=1e-12)
    np.testing.assert_allclose(pol.b, X.T @ Y, atol=1e-12)


def test_discount_update_rule_and_pd():
    rng = np.random.default_rng(3)
    d, z, lam = 3, 0.9, 0.5
    pol = AmbientRidge(d, BaselineConfig(zeta=z, lam=lam), "discount")
    V, b = lam * np.eye(d), np.zeros(d)
    for x in unit_rows(rng, 200, d):
        y = float(rng.standard_normal())
        pol.update(x, y)
        V = z * V + np.outer(x, x) + (1 - z) * lam * np.eye(d)
        b = z * b + y * x
        assert np.linalg.eigvalsh(pol.V)[0] >= (1 - z) * lam
    np.testing.assert_allclose(pol.V, V, atol=1e-12)
    np.testing.assert_allclose(pol.b, b, atol=1e-12)


def small_cfg(**kw):
    base = dict(d=6, r=2, K=3, T=600, W=100, probe_period=30, n_seeds=1)
    base.update(kw)
    return ExperimentConfig(**base)


def test_discount_with_unit_factor_is_linucb():
    cfg = small_cfg(zeta=1.0)
    a, _ = run_episode(cfg, "linucb", 5)
    b, _ = run_episode(cfg, "d_linucb", 5)
    assert np.array_equal(a.control, b.control)


def test_restart_with_single_segment_is_linucb():
    cfg = small_cfg(K=1)
    a, _ = run_episode(cfg, "linucb", 6)
    b, _ = run_episode(cfg, "restart_linucb", 6)
    assert np.array_equal(a.control, b.control)


def test_restart_period():
    cfg = BaselineConfig(T=100, K=4)
    pol = AmbientRidge(3, cfg, "restart")
    rng = np.random.default_rng(4)
    resets = []
    for t in range(1, 101):
        X = unit_rows(rng, 3, 3)
        i = pol.select(t, X)
        if pol.n == 0 and t > 1:
            resets.append(t)
        pol.update(X[i], 0.1)
    assert resets == [26, 51, 76]


def test_ambient_baselines_ignore_rank():
    cfg = small_cfg()
    for method in ("linucb", "sw_linucb", "d_linucb", "restart_linucb"):
        a, _ = run_episode(cfg.replace(policy_r=1), method, 7)
        b, _ = run_episode(cfg.replace(policy_r=4), method, 7)
        assert np.array_equal(a.control, b.control), method


def test_oracle_uses_true_factor_and_resets():
    spec = EnvSpec(d=6, r=2, K=3, T=300, seed=2)
    segments, _ = build_env(spec)
    pol = OracleLinUCB(6, BaselineConfig(), segments)
    rng = np.random.default_rng(5)
    for t in range(1, 301):
        X = unit_rows(rng, 5, 6)
        i = pol.select(t, X)
        k = next(j for j, s in enumerate(segments) if s.start <= t < s.end)
        assert np.array_equal(pol.basis, segments[k].B)
        if t == segments[k].start:
            assert pol.inner.n == 0
        pol.update(X[i], 0.0)


def test_pca_warmup_acts_ambient():
    rng_a, rng_b = np.random.default_rng(6), np.random.default_rng(6)
    d = 5
    theta = np.r_[0.5, 0.2, 0, 0, 0]
    cfg = BaselineConfig(r=1)
    pca = PcaLowRank(d, cfg, "lowoful")
    amb = AmbientRidge(d, cfg)
    a = play(pca, rng_a, d, cfg.pca_warmup - 1, theta, 0.1)
    b = play(amb, rng_b, d, cfg.pca_warmup - 1, theta, 0.1)
    assert a == b
    assert pca.U is None


def test_pca_reestimation_cadence():
    rng = np.random.default_rng(7)
    d = 5
    cfg = BaselineConfig(r=2)
    pca = PcaLowRank(d, cfg, "lowoful")
    refreshed = []
    last = None
    for t in range(1, 120):
        X = unit_rows(rng, 4, d)
        i = pca.select(t, X)
        pca.update(X[i], float(rng.standard_normal()))
        if pca.U is not None and (last is None or not np.array_equal(pca.U, last)):
            refreshed.append(pca.n)
            last = pca.U.copy()
    assert refreshed[:4] == [30, 50, 70, 90]


def test_voful_matches_lowoful_on_unit_actions():
    rng_a, rng_b = np.random.default_rng(8), np.random.default_rng(8)
    d = 6
    theta = np.r_[0.4, -0.3, 0.2, 0, 0, 0]
    cfg = BaselineConfig(r=2, sigma_eps=0.3)
    lo = PcaLowRank(d, cfg, "lowoful")
    vo = PcaLowRank(d, cfg, "voful")
    # feed both the same pairs so only the weights differ
    for t in range(1, 200):
        X = unit_rows(rng_a, 4, d)
        x = X[lo.select(t, X)]
        y = float(x @ theta) + 0.3 * rng_b.standard_normal()
        lo.update(x, y)
        vo.update(x, y)
    np.testing.assert_allclose(vo.M, lo.M / (1 + cfg.sigma_eps**2), rtol=1e-10)
    assert projector_distance(lo.U, vo.U) <= 1e-10


def test_lr_reward_window_and_reset():
    spec = EnvSpec(d=5, r=1, K=2, T=600, seed=3)
    segments, _ = build_env(spec)
    cfg = BaselineConfig(r=1, lr_window=50)
    pol = PcaLowRank(5, cfg, "lr_reward", segments)
    rng = np.random.default_rng(9)
    for t in range(1, 301):
        X = unit_rows(rng, 4, 5)
        i = pol.select(t, X)
        pol.update(X[i], float(rng.standard_normal()))
        assert len(pol.vbuf) <= 50
    V = np.array(pol.vbuf)
    np.testing.assert_allclose(pol.M, V.T @ V, atol=1e-10)
    X = unit_rows(rng, 4, 5)
    pol.select(301, X)
    assert pol.n == 0 and pol.U is None and len(pol.window) == 0
