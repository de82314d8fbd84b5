import numpy as np
import pytest

from hdmoe import evaluation as ev
from hdmoe import model as hm
from hdmoe.data import SampleRecord
from hdmoe.errors import MetricError
from hdmoe.moe import RouterTrace, route


def oracle_cindex(times, events, risks):
    """Independent exhaustive enumeration over unordered pairs."""
    conc, comp = 0.0, 0
    n = len(times)
    for i in range(n):
        for j in range(i + 1, n):
            if times[i] == times[j]:
                continue  # non-comparable by convention
            a, b = (i, j) if times[i] < times[j] else (j, i)
            if events[a] != 1:
                continue
            comp += 1
            if risks[a] > risks[b]:
                conc += 1.0
            elif risks[a] == risks[b]:
                conc += 0.5
    return conc, comp


def _table(risks, times, events):
    return ev.RiskTable(
        risks=np.asarray(risks, float),
        times=np.asarray(times, float),
        events=np.asarray(events, int),
    )


# ---------------------------------------------------------------------------
# c-index


def test_cindex_perfect_ordering():
    t = _table(risks=[3.0, 2.0, 1.0], times=[1.0, 2.0, 3.0], events=[1, 1, 1])
    assert ev.c_index(t) == 1.0


def test_cindex_reversed_ordering():
    t = _table(risks=[1.0, 2.0, 3.0], times=[1.0, 2.0, 3.0], events=[1, 1, 1])
    assert ev.c_index(t) == 0.0


def test_cindex_hand_case_two_thirds():
    t = _table(risks=[0.5, 0.9, 0.4], times=[2.0, 4.0, 6.0], events=[1, 1, 0])
    assert ev.c_index(t) == pytest.approx(2.0 / 3.0)


def test_cindex_no_comparable_pairs():
    t = _table(risks=[1.0, 2.0], times=[5.0, 7.0], events=[0, 0])
    with pytest.raises(MetricError):
        ev.c_index(t)


def test_cindex_matches_exhaustive_oracle_exactly():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(50):
        n = int(rng.integers(2, 31))
        times = np.round(rng.uniform(0, 20, n), 1)
        events = rng.integers(0, 2, n)
        risks = np.round(rng.normal(size=n), 2)
        conc, comp = oracle_cindex(times, events, risks)
        if comp == 0:
            continue
        checked += 1
        assert ev.c_index(_table(risks, times, events)) == conc / comp
    assert checked > 30


def test_cindex_flip_and_monotone_invariance():
    rng = np.random.default_rng(1)
    times = rng.uniform(0, 10, 20)
    events = rng.integers(0, 2, 20)
    events[0] = 1
    risks = rng.normal(size=20)  # continuous: no ties
    c = ev.c_index(_table(risks, times, events))
    assert ev.c_index(_table(-risks, times, events)) == pytest.approx(1.0 - c)
    assert ev.c_index(_table(np.exp(2.0 * risks), times, events)) == pytest.approx(c)


# ---------------------------------------------------------------------------
# Kaplan-Meier


def test_km_no_events_stays_at_one():
    curve = ev.km_estimate([1.0, 2.0, 3.0], [0, 0, 0])
    assert curve.times.size == 0  # no drops: estimator identically 1


def test_km_hand_product_limit():
    curve = ev.km_estimate([1.0, 2.0, 3.0], [1, 1, 1])
    assert np.allclose(curve.survival, [2.0 / 3.0, 1.0 / 3.0, 0.0])
    assert list(curve.at_risk) == [3, 2, 1]
    assert list(curve.events) == [1, 1, 1]


def test_km_single_event_drops_to_zero():
    curve = ev.km_estimate([5.0], [1])
    assert list(curve.times) == [5.0]
    assert list(curve.survival) == [0.0]


def test_km_with_censoring_hand_case():
    # events at 1 and 3; censored at 2 leaves 2 at risk for the second event
    curve = ev.km_estimate([1.0, 2.0, 3.0, 4.0], [1, 0, 1, 0])
    assert np.allclose(curve.survival, [0.75, 0.75 * 0.5])


def test_km_no_censoring_equals_empirical_survival():
    rng = np.random.default_rng(2)
    times = np.round(rng.uniform(0, 10, 40), 1)
    curve = ev.km_estimate(times, np.ones(40, dtype=int))
    for t, s in zip(curve.times, curve.survival):
        assert s == pytest.approx(np.mean(times > t))


# ---------------------------------------------------------------------------
# log-rank


def test_log_rank_identical_groups():
    times = [1.0, 2.0, 3.0, 4.0]
    events = [1, 1, 0, 1]
    chi2, p = ev.log_rank_p(times, events, times, events)
    assert chi2 == pytest.approx(0.0, abs=1e-12)
    assert p == pytest.approx(1.0)


def test_log_rank_separated_groups():
    ta = np.arange(1.0, 11.0)
    tb = np.arange(101.0, 111.0)
    chi2, p = ev.log_rank_p(ta, np.ones(10, int), tb, np.ones(10, int))
    assert p < 0.001


def test_log_rank_symmetric():
    rng = np.random.default_rng(3)
    ta, tb = rng.uniform(0, 10, 12), rng.uniform(0, 12, 15)
    ea, eb = rng.integers(0, 2, 12), rng.integers(0, 2, 15)
    ea[0] = eb[0] = 1
    r1 = ev.log_rank_p(ta, ea, tb, eb)
    r2 = ev.log_rank_p(tb, eb, ta, ea)
    assert r1 == pytest.approx(r2)


def test_log_rank_zero_variance_degenerate():
    with pytest.raises(MetricError):
        ev.log_rank_p([1.0], [1], [1.0], [1])


def test_chi2_tail_textbook_value():
    assert ev.chi2_sf(3.841, df=1) == pytest.approx(0.05, abs=1e-3)
    assert ev.chi2_sf(6.635, df=1) == pytest.approx(0.01, abs=1e-3)
    assert ev.chi2_sf(0.0, df=1) == 1.0


# ---------------------------------------------------------------------------
# Welch t


def test_welch_identical_groups():
    t, p = ev.welch_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert t == 0.0
    assert p == pytest.approx(1.0)


def test_welch_maximal_separation():
    rng = np.random.default_rng(4)
    a = 1e-6 * rng.normal(size=4)
    b = 1.0 + 1e-6 * rng.normal(size=4)
    _, p = ev.welch_t_test(a, b)
    assert p < 1e-6


def test_welch_hand_case():
    t, p = ev.welch_t_test([1.0, 2.0, 3.0], [2.0, 3.0, 4.0])
    assert t == pytest.approx(-1.2247, abs=1e-3)
    assert p == pytest.approx(0.288, abs=2e-3)


def test_welch_sign_flip_under_swap():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=8), rng.normal(loc=0.4, size=11)
    t1, p1 = ev.welch_t_test(a, b)
    t2, p2 = ev.welch_t_test(b, a)
    assert t1 == pytest.approx(-t2)
    assert p1 == pytest.approx(p2)


def test_welch_degenerate_variance():
    with pytest.raises(MetricError):
        ev.welch_t_test([1.0, 1.0], [1.0, 1.0])


def test_incomplete_beta_boundaries():
    assert ev.reg_incomplete_beta(2.0, 3.0, 0.0) == 0.0
    assert ev.reg_incomplete_beta(2.0, 3.0, 1.0) == 1.0
    # I_x(1,1) is the uniform cdf
    assert ev.reg_incomplete_beta(1.0, 1.0, 0.37) == pytest.approx(0.37, abs=1e-12)


# ---------------------------------------------------------------------------
# expert histogram


def _trace_with_selected(selected, n_experts):
    selected = np.asarray(selected, dtype=np.intp)
    t = selected.shape[0]
    probs = np.full((t, n_experts), 1.0 / n_experts)
    return RouterTrace(
        logits=np.zeros((t, n_experts)), probs=probs, selected=selected,
        gates=np.take_along_axis(probs, selected, axis=1), num_experts=n_experts,
    )


def test_histogram_alternating_routing_equal_counts():
    groups = [
        (_trace_with_selected([[0], [1], [0], [1]], 2),)
        for _ in range(5)
    ]
    counts = ev.expert_histogram(groups)
    assert counts.shape == (1, 2)
    assert counts[0, 0] == counts[0, 1] == 10


def test_histogram_conservation():
    rng = np.random.default_rng(6)
    m, t, k, n = 7, 5, 2, 4
    groups = [
        (_trace_with_selected(rng.integers(0, n, size=(t, k)), n),)
        for _ in range(m)
    ]
    counts = ev.expert_histogram(groups)
    assert counts.sum() == t * k * m


def test_histogram_random_router_covers_all_experts():
    rng = np.random.default_rng(7)
    router = rng.normal(size=(6, 4))
    selected = []
    for _ in range(1000):
        token = rng.normal(size=6)
        selected.append(route(token, router, 1).selected[0])
    counts = ev.expert_histogram([(_trace_with_selected(np.array(selected), 4),)])
    assert (counts > 0).all()


# ---------------------------------------------------------------------------
# redundancy


def test_identical_tokens_full_offdiagonal():
    row = np.linspace(-1, 1, 6)
    tokens = np.tile(row, (4, 1))
    corr = ev.average_abs_correlation([tokens])
    off = ~np.eye(4, dtype=bool)
    assert corr[off].sum() == pytest.approx(4 * 3)


def test_identity_map_gives_zero_delta():
    rng = np.random.default_rng(8)
    mats = [rng.normal(size=(4, 6)) for _ in range(3)]
    pre = ev.average_abs_correlation(mats)
    post = ev.average_abs_correlation([m.copy() for m in mats])
    off = ~np.eye(4, dtype=bool)
    assert pre[off].sum() - post[off].sum() == 0.0


def test_constant_tokens_zero_variance_error():
    with pytest.raises(MetricError):
        ev.average_abs_correlation([np.ones((3, 5))])


def test_redundancy_score_shapes_and_finite_delta():
    cfg = hm.ModelConfig(d_in=4, d1=8, d2=16, token_len_l1=4, token_len_l2=4,
                         num_experts=2, top_k=1, expansion=2)
    rng = np.random.default_rng(9)
    params = hm.init_params(cfg, rng)
    records = [
        SampleRecord(f"r{i}", rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), 5.0, 0)
        for i in range(4)
    ]
    for modality in ("a", "b"):
        pre, post, delta = ev.redundancy_score(
            params, cfg, records, 1, modality, np.random.default_rng(0)
        )
        assert pre.shape == (2, 2) and post.shape == (2, 2)
        assert np.isfinite(delta)
    pre, post, delta = ev.redundancy_score(params, cfg, records, 2, None, np.random.default_rng(0))
    assert pre.shape == (4, 4)


# ---------------------------------------------------------------------------
# stability


def _tiny_setup(segment_values=(1, 2, 4, 8)):
    cfg = hm.ModelConfig(d_in=4, d1=8, d2=16, token_len_l1=4, token_len_l2=4,
                         num_experts=2, top_k=1, expansion=2,
                         segment_values=segment_values)
    rng = np.random.default_rng(10)
    params = hm.init_params(cfg, rng)
    records = [
        SampleRecord(f"r{i}", rng.normal(size=(3, 4)), rng.normal(size=(3, 4)),
                     float(i + 1), int(i % 3 == 0))
        for i in range(10)
    ]
    return cfg, params, records


def test_stability_degenerate_segment_set_is_exactly_zero_std():
    cfg, params, records = _tiny_setup(segment_values=(1,))
    scores, mean, std = ev.stability_report(params, cfg, records, 5, np.random.default_rng(0))
    assert std == 0.0
    assert len(set(scores)) == 1


def test_stability_single_repeat_zero_std():
    cfg, params, records = _tiny_setup()
    scores, mean, std = ev.stability_report(params, cfg, records, 1, np.random.default_rng(0))
    assert std == 0.0 and len(scores) == 1


def test_km_curves_csv_format():
    curve = ev.km_estimate([1.0, 2.0], [1, 1])
    text = ev.km_curves_csv({"high": curve})
    lines = text.strip().split("\n")
    assert lines[0] == "group,time,survival,at_risk,events"
    assert lines[1].startswith("high,1,0.5,2,1")
