import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from semms.bench import METHODS, BenchmarkTable, default_workers, parse_methods, run_benchmark
from semms.sim import (
    SCENARIOS,
    augment_semisynthetic,
    design_effect,
    generate,
    get_scenario,
    icc_logistic,
    load_sleepstudy,
    read_scenario_file,
    score_selection,
)


def test_generator_is_deterministic():
    s = get_scenario("sim4").with_seed(12)
    (a, ta), (b, tb) = generate(s), generate(s)
    for f in ("y", "Z", "group", "slope_covariate"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    np.testing.assert_array_equal(ta, tb)
    assert generate(s.with_seed(13))[0].y.tobytes() != a.y.tobytes()


def test_sim1_shape():
    d, truth = generate(get_scenario("sim1").with_seed(1))
    assert d.n == 200 and d.K == 100 and d.n_groups == 20
    assert truth.tolist() == [0, 1, 2, 3, 4]
    t = d.slope_covariate[:10]
    assert t.mean() == pytest.approx(0, abs=1e-12) and t.std(ddof=1) == pytest.approx(1)


def test_pure_noise_variance():
    s = replace(get_scenario("sim1"), beta_true=(0.0,) * 5, sigma_b0=0.0, sigma_b1=0.0)
    for seed in range(5):
        d, _ = generate(s.with_seed(seed))
        assert d.y.var(ddof=1) == pytest.approx(1.0, abs=0.15)


def test_cluster_mean_variance_decomposition():
    s = get_scenario("sim1")
    # t is centred within cluster, so the slope drops out of cluster means
    want = s.sigma_b0**2 + (sum(b * b for b in s.beta_true) + 1.0) / s.n
    got = []
    for r in range(50):
        d, _ = generate(s.with_seed(100 + r))
        got.append(d.y.reshape(s.m, s.n).mean(axis=1).var(ddof=1))
    assert np.mean(got) == pytest.approx(want, rel=0.25)


def test_registry_arithmetic():
    # 0.64 + 0.49 + 0.36 + 0.36 + 0.25
    assert sum(b * b for b in get_scenario("sim2").beta_true) == pytest.approx(2.10, abs=1e-12)
    s3 = get_scenario("sim3")
    assert s3.N == 90 and s3.K == 200 and s3.K / s3.N == pytest.approx(2.2, abs=0.03)
    s5 = get_scenario("sim5")
    assert s5.N == 600 and icc_logistic(s5.sigma_b0) == pytest.approx(0.73, abs=0.005)
    s6 = get_scenario("sim6")
    assert s6.N == 1000 and not s6.random_slope
    rho = icc_logistic(s6.sigma_b0)
    assert s6.N / design_effect(s6.n, rho) == pytest.approx(67, abs=0.5)


def test_design_effect_and_icc():
    assert design_effect(20, 0.73) == pytest.approx(14.87, abs=1e-12)
    for rho in (0.0, 0.3, 1.0):
        assert design_effect(1, rho) == 1.0
    assert icc_logistic(3.0) == pytest.approx(9 / (9 + math.pi**2 / 3), rel=1e-15)
    with pytest.raises(ValueError):
        design_effect(0, 0.5)
    with pytest.raises(ValueError):
        design_effect(3, 1.5)


def test_augmentation():
    base = load_sleepstudy()
    d, truth = augment_semisynthetic(base, seed=5)
    assert d.n == 144 and d.K == 50 and truth.tolist() == [0, 1]
    np.testing.assert_allclose(d.Z.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(d.Z.std(0, ddof=1), 1, atol=1e-12)
    np.testing.assert_allclose(d.y, base.y + 20 * d.Z[:, 0] - 15 * d.Z[:, 1], rtol=1e-14)
    same, _ = augment_semisynthetic(base, signal=(), seed=5)
    np.testing.assert_array_equal(same.y, base.y)
    assert 20 / 25.53 == pytest.approx(0.78, abs=0.005)
    with pytest.raises(ValueError):
        augment_semisynthetic(base, K=3, signal=((3, 1.0),))


def test_score_selection():
    m = score_selection(range(5), range(5))
    assert (m.tp, m.fp, m.exact) == (5, 0, True)
    m = score_selection([0, 1, 2, 6], range(5))
    assert (m.tp, m.fp, m.exact) == (3, 1, False)
    assert not score_selection([], range(5)).exact


def test_scenario_file(tmp_path):
    p = tmp_path / "mine.cfg"
    p.write_text("base = sim2\nm = 8\nbeta_true = 1.0, -1.0\ntrue_idx = 3 7\nfamily = poisson\n")
    s = read_scenario_file(p)
    assert s.name == "mine" and s.m == 8 and s.n == 10 and s.K == 100
    assert s.beta_true == (1.0, -1.0) and s.true_idx == (3, 7)
    assert s.family.value == "poisson"
    p.write_text("[scenario]\nname = x\nm = 4\nn = 3\nK = 6\nbeta_true = 1\n"
                 "sigma_b0 = 1\nsigma_b1 = 0\n")
    s = read_scenario_file(p)
    assert s.N == 12 and s.true_idx == (0,)
    p.write_text("base = sim1\nbogus = 1\n")
    with pytest.raises(ValueError, match="bogus"):
        read_scenario_file(p)


def test_unknown_scenario_lists_registry():
    with pytest.raises(KeyError, match="sim1"):
        get_scenario("nope")
    assert set(SCENARIOS) == {f"sim{i}" for i in range(1, 7)}


def test_parse_methods():
    assert parse_methods("plain,mixed") == ("plain-semms", "mixed-semms")
    assert parse_methods(["lasso"]) == ("lasso-cv",)
    assert set(METHODS) == {"plain-semms", "mixed-semms", "lasso-cv"}
    with pytest.raises(ValueError):
        parse_methods("ridge")


def test_default_workers(monkeypatch):
    monkeypatch.setenv("SEMMS_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("SEMMS_WORKERS", "x")
    with pytest.raises(ValueError):
        default_workers()


def test_single_replicate_table():
    s = get_scenario("sim1")
    tab = run_benchmark(s, "plain,lasso", reps=1, base_seed=42)
    for m in ("plain-semms", "lasso-cv"):
        row = next(r for r in tab.rows if r.method == m)
        summ = tab.summaries[m]
        assert (summ.mean_tp, summ.mean_fp, summ.exact_rate) == (row.tp, row.fp, float(row.exact))
        assert summ.n_reps == 1 and summ.n_failed == 0
    assert tab.to_dict()["seeds"] == [42]


def test_benchmark_byte_identical_and_worker_invariant(tmp_path):
    s = get_scenario("sim2")
    a = run_benchmark(s, "plain,mixed", reps=3, base_seed=5, workers=1)
    b = run_benchmark(s, "plain,mixed", reps=3, base_seed=5, workers=1)
    c = run_benchmark(s, "plain,mixed", reps=3, base_seed=5, workers=2)
    assert a.to_json() == b.to_json() == c.to_json()
    a.write(tmp_path / "a.json", tmp_path / "a.csv")
    data = json.loads((tmp_path / "a.json").read_text())
    assert data["methods"]["mixed-semms"]["n_reps"] == 3
    assert 0 <= data["methods"]["plain-semms"]["exact_rate"] <= 1
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert len(rows) == 6 and rows[0]["seed"] == "5"
    sel = [int(k) for k in rows[0]["selected"].split()]
    assert all(1 <= k <= s.K for k in sel)


def test_failed_cells_are_counted(monkeypatch):
    import semms.bench as bench
    from semms.exceptions import NumericalFailure

    real = bench._run_method

    def flaky(method, d, truth, s, seed, cfg):
        if method == "plain-semms" and seed == 1:
            raise NumericalFailure("synthetic")
        return real(method, d, truth, s, seed, cfg)

    monkeypatch.setattr(bench, "_run_method", flaky)
    tab = run_benchmark(get_scenario("sim1"), "plain", reps=2, base_seed=0, workers=1)
    summ = tab.summaries["plain-semms"]
    assert summ.n_failed == 1 and summ.n_reps == 2
    ok = next(r for r in tab.rows if r.status == "ok")
    assert summ.mean_tp == ok.tp
    bad = next(r for r in tab.rows if r.status == "failed")
    assert "synthetic" in bad.error
    assert isinstance(tab, BenchmarkTable)
