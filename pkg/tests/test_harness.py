import csv
import json
import math
import random

import numpy as np
import pytest

from spsc_lab import harness
from spsc_lab.baselines import BaselineConfig, OracleLinUCB
from spsc_lab.config import ExperimentConfig
from spsc_lab.env import EnvSpec, SegmentSpec, build_env, observe, step
from spsc_lab.harness import (
    CSV_COLUMNS,
    CellResult,
    Job,
    ablation_jobs,
    emit,
    env_seed,
    execute,
    failed,
    grid_cells,
    load_results,
    mean_se,
    run_episode,
    summarize,
)


def small_cfg(**kw):
    base = dict(d=6, r=2, K=3, T=600, W=100, probe_period=30, n_seeds=2, methods=["spsc", "linucb"])
    base.update(kw)
    return ExperimentConfig(**base)


def fake_result(i, method="spsc", d=5, r=2, regret=None):
    value = float(i) if regret is None else regret
    return CellResult("grid", d, r, 10, 5000, i, method, value, value + 1.0, 10, 0.5, 1.0)


# ---- accounting


def test_probe_free_costed_equals_control():
    trace, res = run_episode(small_cfg(probe_cost=0.0), "linucb", 1)
    assert np.array_equal(trace.cumulative_costed, trace.cumulative_control)
    assert res.costed_regret == res.control_regret
    assert res.probe_count == 0


@pytest.mark.parametrize("method", ["spsc", "spsc_adaptive"])
def test_accounting_identity(method):
    cfg = small_cfg(probe_cost=0.1, detector_threshold=1e9)
    trace, res = run_episode(cfg, method, 2)
    probes_so_far = np.cumsum(trace.is_probe)
    np.testing.assert_allclose(trace.cumulative_costed, trace.cumulative_control + 0.1 * probes_so_far, atol=1e-9)
    assert res.costed_regret - res.control_regret == pytest.approx(0.1 * res.probe_count, abs=1e-9)
    if method == "spsc":
        assert res.probe_count == 3 * math.ceil(200 / 30)


@pytest.mark.parametrize("method", ["spsc", "linucb", "oracle", "sw_linucb", "lowoful", "lr_reward"])
def test_exploit_rounds_nonnegative_regret(method):
    trace, _ = run_episode(small_cfg(), method, 3)
    assert np.all(trace.control[~trace.is_probe] >= -1e-10)
    assert np.all(np.isfinite(trace.control))


def test_oracle_consistency_fixed_theta():
    spec = EnvSpec(d=8, r=2, K=1, T=2000, sigma_eps=0.0, seed=4)
    segments, state = build_env(spec)
    seg = segments[0]
    segments[0] = SegmentSpec(seg.start, seg.end, seg.B, np.eye(2), np.zeros((2, 2)))
    state._chol[0] = np.zeros((2, 2))
    state.w = np.array([0.6, -0.4])
    pol = OracleLinUCB(8, BaselineConfig(sigma_eps=0.0, S_w=1.0), segments)
    total = 0.0
    for t in range(1, spec.T + 1):
        view = step(state, segments)
        i = pol.select(t, view.actions)
        x = view.actions[i]
        pol.update(x, observe(state, x))
        total += np.max(view.actions @ view.theta_snapshot) - x @ view.theta_snapshot
    assert total / spec.T <= 0.05


def test_dimension_mismatch_rejected(monkeypatch):
    cfg = small_cfg()

    class Bad:
        def select(self, t, actions):
            return harness.Probe(np.ones(3))

        def update(self, x, y):
            pass

    monkeypatch.setattr(harness, "make_policy", lambda *a, **k: Bad())
    with pytest.raises(ValueError):
        run_episode(cfg, "spsc", 1)


# ---- determinism and seeding


def test_determinism_excluding_wall_time():
    cfg = small_cfg()
    a = execute([Job(cfg, m, 9, "x") for m in ("spsc", "linucb", "oracle")])
    b = execute([Job(cfg, m, 9, "x") for m in ("spsc", "linucb", "oracle")])
    strip = lambda rows: [{k: repr(v) for k, v in r.row().items() if k != "wall_ms"} for r in rows]
    assert strip(a) == strip(b)


def test_env_seed_shared_across_methods_and_distinct_across_cells():
    cfg = small_cfg()
    assert env_seed(cfg, 0) == env_seed(cfg.replace(methods=["oracle"]), 0)
    assert env_seed(cfg, 0) != env_seed(cfg, 1)
    assert env_seed(cfg, 0) != env_seed(cfg.replace(d=7), 0)


def test_methods_see_same_world():
    cfg = small_cfg()
    spec = cfg.env_spec(env_seed(cfg, 0))
    s1, _ = build_env(spec)
    s2, _ = build_env(spec)
    assert all(np.array_equal(a.B, b.B) for a, b in zip(s1, s2))


# ---- failure handling


def test_failed_run_records_error_row(monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("synthetic failure")

    monkeypatch.setattr(harness, "run_episode", boom)
    rows = execute([Job(small_cfg(), "spsc", 1, "grid")])
    assert rows[0].probe_count == -1 and math.isnan(rows[0].costed_regret)
    assert failed(rows)
    summary = summarize(rows, 600)
    assert summary[0].error


# ---- aggregation


def test_mean_se_two_seeds():
    m, se = mean_se([3.0, 5.0])
    assert m == 4.0
    assert se == pytest.approx(np.std([3.0, 5.0], ddof=1) / math.sqrt(2))


def test_summary_verdict_and_crossover():
    rows = [fake_result(i, "spsc", regret=80.0 + i) for i in range(3)]
    rows += [fake_result(i, "linucb", regret=100.0 + i) for i in range(3)]
    (s,) = summarize(rows, 5000)
    assert s.ratio == pytest.approx(82.0 / 102.0)  # costed = control + 1
    assert s.verdict == "SPSC"
    assert s.crossover_predicts_spsc == ((5 - 2) >= 5000 ** (1 / 6))


def test_aggregation_order_independent():
    rng = random.Random(0)
    rows = [fake_result(i, m, d=d, regret=rng.random() * 100)
            for i in range(5) for m in ("spsc", "linucb") for d in (5, 10)]
    base = summarize(rows, 5000)
    for _ in range(5):
        rng.shuffle(rows)
        again = summarize(rows, 5000)
        assert [(s.d, s.r, s.mean, s.se, s.ratio) for s in again] == [(s.d, s.r, s.mean, s.se, s.ratio) for s in base]


def test_grid_cells_filter_and_empty():
    cfg = small_cfg(grid_d=[5, 10], grid_r=[1, 5, 15])
    assert grid_cells(cfg) == [(5, 1), (10, 1), (10, 5)]
    with pytest.raises(ValueError):
        grid_cells(cfg.replace(grid_d=[3], grid_r=[5]))


# ---- ablations


def test_unknown_ablation_rejected():
    with pytest.raises(ValueError):
        ablation_jobs("temperature", small_cfg())


def test_empty_sweep_rejected():
    with pytest.raises(ValueError):
        ablation_jobs("variance", small_cfg(sweep=[]))


def test_full_coverage_is_identity():
    cfg = small_cfg()
    a, _ = run_episode(cfg, "spsc", 11)
    b, _ = run_episode(cfg.replace(coverage=cfg.d), "spsc", 11)
    assert np.array_equal(a.control, b.control)


def test_ablation_labels_and_references():
    jobs = ablation_jobs("coverage", small_cfg(sweep=[1, 6], n_seeds=2))
    labels = sorted({j.experiment for j in jobs})
    assert labels == ["coverage=1", "coverage=6", "coverage=reference"]
    assert {j.method for j in jobs if j.experiment == "coverage=reference"} == {"linucb"}
    oq = ablation_jobs("oracle_quality", small_cfg(sweep=[1, 4], n_seeds=1))
    bounds = [len(j.oracle_segments) for j in oq if j.oracle_segments]
    assert bounds == [3, 12]


def test_small_d_defaults():
    cfg = harness.ablation_defaults("small_d")
    assert (cfg.d, cfg.r, cfg.K, cfg.T, cfg.n_actions) == (2, 1, 4, 6000, 50)


# ---- output


def test_emit_empty_csv_is_header_only(tmp_path):
    path = emit([], "csv", tmp_path / "e.csv")
    lines = path.read_text().splitlines()
    assert lines == [",".join(CSV_COLUMNS)]


def test_emit_single_row(tmp_path):
    path = emit([fake_result(1)], "csv", tmp_path / "one.csv")
    rows = list(csv.reader(path.open()))
    assert len(rows) == 2 and len(rows[1]) == 12
    assert tuple(rows[0]) == CSV_COLUMNS


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_roundtrip(tmp_path, fmt):
    rows = [fake_result(i, m) for i, m in enumerate(["spsc", "linucb", "oracle"])]
    path = emit(rows, fmt, tmp_path / f"r.{fmt}")
    assert load_results(path) == rows
    if fmt == "json":
        assert [CellResult(**r) for r in json.loads(path.read_text())["results"]] == rows


def test_series_long_form(tmp_path):
    path = emit([fake_result(1)], "csv", tmp_path / "s.csv", series={"spsc/1": np.array([0.5, 1.5])})
    rows = list(csv.reader((tmp_path / "s_series.csv").open()))
    assert rows == [["run", "t", "value"], ["spsc/1", "1", "0.5"], ["spsc/1", "2", "1.5"]]
    data = json.loads(emit([fake_result(1)], "json", tmp_path / "s.json", series={"a": [1.0]}).read_text())
    assert data["series"] == [{"run": "a", "t": 1, "value": 1.0}]


def test_emit_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit([fake_result(1)], "csv", blocker / "sub" / "out.csv")


def test_emit_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit([], "xml", tmp_path / "x.xml")


# ---- config


def test_config_aliases_and_unknown_keys(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("d: 8\nr: 2\nlambda: 0.5\nseeds: 4\nmethods: [spsc, oracle]\n")
    cfg = ExperimentConfig.load(p)
    assert (cfg.d, cfg.r, cfg.lam, cfg.n_seeds, cfg.methods) == (8, 2, 0.5, 4, ["spsc", "oracle"])
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"dd": 3})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"methods": ["thompson"]})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"d": 3, "r": 3})


def test_quick_scale():
    q = ExperimentConfig().quick()
    assert q.n_seeds == 3 and q.T == 2000


def test_default_envelope():
    cfg = ExperimentConfig()
    assert cfg.envelope == pytest.approx(3 * 0.04 * math.sqrt(5 / (1 - 0.99**2)))
