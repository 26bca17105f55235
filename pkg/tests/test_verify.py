import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dartkit.verify import (ROC_SWEEP, SCORE_COLUMNS, THRESHOLDS, ContingencyTable, aggregate_mean,
                            aggregate_pooled, bulk_scores, contingency, coverage_pct, filter_significant, read_pgm,
                            roc_auc, score_rows, scores, table_from_map, verification_map, write_scores_csv,
                            write_verification_map)

tables = st.builds(ContingencyTable, *[st.integers(0, 500)] * 4)


def brute_table(pred, obs, thr):
    a = b = c = d = 0
    for p, o in zip(pred.ravel(), obs.ravel()):
        if p <= thr and o <= thr:
            a += 1
        elif o <= thr:
            c += 1
        elif p <= thr:
            b += 1
        else:
            d += 1
    return a, b, c, d


def brute_scores(a, b, c, d):
    def r(n, m):
        return n / m if m else 0.0
    return {"csi": r(a, a + b + c), "pod": r(a, a + c), "far": r(b, a + b), "bias": r(a + b, a + c),
            "hss": r(2.0 * (a * d - b * c), (a + c) * (c + d) + (a + b) * (b + d))}


def test_two_by_two_hand_case():
    obs = np.array([[200.0, 300.0], [300.0, 300.0]])
    pred = np.array([[300.0, 200.0], [300.0, 300.0]])
    assert contingency(pred, obs, 220.0) == ContingencyTable(0, 1, 1, 2)
    with pytest.raises(ValueError, match="shape"):
        contingency(pred, obs[:1])


def test_score_examples():
    s = scores(ContingencyTable(5, 0, 0, 7))
    assert (s.csi, s.pod, s.far, s.bias, s.hss) == (1.0, 1.0, 0.0, 1.0, 1.0)
    s = scores(ContingencyTable(1, 1, 1, 1))
    assert s.csi == pytest.approx(1 / 3) and (s.pod, s.far, s.bias, s.hss) == (0.5, 0.5, 1.0, 0.0)
    s = scores(ContingencyTable(0, 3, 0, 5))
    assert s.csi == 0.0 and s.pod == 0.0 and "far" in s.degenerate


def test_all_warm_scores_degenerate_zero():
    s = scores(contingency(np.full((4, 4), 260.0), np.full((4, 4), 260.0)))
    assert s.as_dict() == {"csi": 0.0, "hss": 0.0, "pod": 0.0, "far": 0.0, "bias": 0.0}
    assert set(s.degenerate) == {"csi", "pod", "far", "bias", "hss"}


def test_random_fields_match_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        pred, obs = rng.uniform(190, 260, (2, 16, 16))
        for thr in THRESHOLDS:
            t = contingency(pred, obs, thr)
            a, b, c, d = brute_table(pred, obs, thr)
            assert (t.hits, t.false_alarms, t.misses, t.correct_negatives) == (a, b, c, d)
            s = scores(t).as_dict()
            for k, v in brute_scores(a, b, c, d).items():
                assert s[k] == pytest.approx(v, abs=1e-12)


@given(tables)
def test_algebraic_identities(t):
    s = scores(t)
    assert s.csi <= s.pod + 1e-12
    assert s.csi <= 1.0 - s.far + 1e-12
    if t.hits + t.false_alarms > 0 and t.hits + t.misses > 0 and s.far < 1.0:
        assert abs(s.bias - s.pod / (1.0 - s.far)) < 1e-9
    assert 0 <= s.csi <= 1 and 0 <= s.pod <= 1 and 0 <= s.far <= 1 and s.bias >= 0 and -1 <= s.hss <= 1


@given(arrays(np.float64, (6, 6), elements=st.floats(190, 250)), arrays(np.float64, (6, 6), elements=st.floats(190, 250)),
       st.sampled_from(THRESHOLDS))
def test_verification_map_consistent_with_table(p, o, thr):
    vmap = verification_map(p, o, thr)
    assert table_from_map(vmap) == contingency(p, o, thr)


def test_verification_map_hand_case(tmp_path):
    obs = np.array([[200, 300, 200], [300, 300, 210], [215, 250, 300.0]])
    pred = np.array([[205, 205, 300], [300, 219, 220], [300, 250, 230.0]])
    expected = np.array([[0, 2, 1], [3, 2, 0], [1, 3, 3]])
    np.testing.assert_array_equal(verification_map(pred, obs, 220.0), expected)
    assert not np.isin(verification_map(obs, obs), (1, 2)).any()
    pgm, legend = write_verification_map(tmp_path, "case", expected)
    np.testing.assert_array_equal(read_pgm(pgm), expected)
    assert "false_alarm\tyellow" in legend.read_text()


def test_bulk_scores_examples():
    rng = np.random.default_rng(1)
    obs = rng.uniform(200, 300, (16, 16))
    b = bulk_scores(obs, obs)
    assert (b.rmse, b.r2) == (0.0, 1.0)
    assert b.pearson_corr == pytest.approx(1.0) and b.ssim == pytest.approx(1.0, abs=1e-6)
    assert bulk_scores(np.full_like(obs, obs.mean()), obs).r2 == pytest.approx(0.0, abs=1e-12)
    flat = bulk_scores(obs, np.full_like(obs, 250.0))
    assert {"pearson_corr", "r2"} <= set(flat.degenerate)


def test_bulk_scores_match_brute_force():
    rng = np.random.default_rng(2)
    p, o = rng.uniform(200, 300, (2, 12, 12))
    b = bulk_scores(p, o)
    n = p.size
    mp, mo = sum(p.ravel()) / n, sum(o.ravel()) / n
    cov = sum((x - mp) * (y - mo) for x, y in zip(p.ravel(), o.ravel()))
    vp = sum((x - mp) ** 2 for x in p.ravel())
    vo = sum((y - mo) ** 2 for y in o.ravel())
    sse = sum((x - y) ** 2 for x, y in zip(p.ravel(), o.ravel()))
    assert b.rmse == pytest.approx((sse / n) ** 0.5, rel=1e-6)
    assert b.pearson_corr == pytest.approx(cov / (vp * vo) ** 0.5, rel=1e-6)
    assert b.r2 == pytest.approx(1 - sse / vo, rel=1e-6)


def test_roc_sweep_grid():
    assert ROC_SWEEP.size == 101 and ROC_SWEEP[0] == 180.0 and ROC_SWEEP[-1] == 280.0
    assert np.all(np.diff(ROC_SWEEP) == 1.0)


def test_roc_perfect_noise_and_reversed():
    rng = np.random.default_rng(3)
    obs = rng.uniform(180, 280, 10_000)
    assert roc_auc(obs, obs).auc == 1.0
    noise = roc_auc(rng.uniform(180, 280, obs.size), obs).auc
    assert 0.45 <= noise <= 0.55
    assert roc_auc(460.0 - obs, obs).auc < 0.5
    assert roc_auc(obs, np.full(obs.size, 300.0)).degenerate


def test_roc_points_monotone():
    rng = np.random.default_rng(4)
    obs = rng.uniform(180, 280, 2000)
    r = roc_auc(obs + rng.normal(0, 15, obs.size), obs)
    assert np.all(np.diff(r.fpr) >= 0) and np.all(np.diff(r.tpr) >= 0)
    assert 0.5 < r.auc < 1.0


def test_roc_invariant_under_monotone_transform():
    rng = np.random.default_rng(5)
    obs = rng.uniform(180, 280, 3000)
    pred = obs + rng.normal(0, 10, obs.size)
    # sweep on the transformed scale so every threshold maps onto the same cut
    f = [lambda x: 2.0 * x - 100.0, lambda x: (x - 230.0) ** 3]
    base = roc_auc(pred, obs, sweep=np.sort(pred)).auc
    for g in f:
        assert roc_auc(g(pred), obs, sweep=np.sort(g(pred))).auc == pytest.approx(base, abs=1e-12)


def test_coverage_and_significance_boundary():
    f = np.full((256, 256), 260.0)
    f.ravel()[:655] = 200.0
    assert coverage_pct(f) == pytest.approx(100 * 655 / 65536)
    g = np.full((256, 256), 260.0)
    g.ravel()[:654] = 200.0
    assert filter_significant([f, np.full((256, 256), 280.0), g]) == [0]


def test_pooled_differs_from_mean_of_samples():
    t1, t2 = ContingencyTable(9, 1, 0, 0), ContingencyTable(0, 1, 1, 8)
    pooled = aggregate_pooled([t1, t2])
    mean = aggregate_mean([scores(t1), scores(t2)])
    assert pooled.csi == pytest.approx(9 / 12)
    assert mean["csi"][0] == pytest.approx(0.45) and mean["csi"][1] == pytest.approx(0.45)
    with pytest.raises(ValueError):
        aggregate_mean([])


def test_score_rows_and_csv(tmp_path):
    rng = np.random.default_rng(6)
    p, o = rng.uniform(190, 260, (2, 12, 12))
    rows = score_rows("s0", p, o)
    assert [r["threshold"] for r in rows] == list(THRESHOLDS)
    write_scores_csv(tmp_path / "s.csv", rows)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].split(",") == SCORE_COLUMNS and len(lines) == 4
