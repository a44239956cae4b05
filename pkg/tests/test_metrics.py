import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog
from scipy.stats import wasserstein_distance

from steeradv.geometry import Trajectory
from steeradv.metrics import (EvalReport, evaluate_generator, parallel_map, replay_generator, rows_csv, spearman,
                              wasserstein_1d)


def ot_lp(a, b) -> float:
    """Earth mover's distance by solving the transport linear program directly."""
    n, m = len(a), len(b)
    cost = np.abs(np.subtract.outer(a, b)).ravel()
    rows = np.zeros((n + m, n * m))
    for i in range(n):
        rows[i, i * m:(i + 1) * m] = 1
    for j in range(m):
        rows[n + j, j::m] = 1
    rhs = np.concatenate([np.full(n, 1 / n), np.full(m, 1 / m)])
    return linprog(cost, A_eq=rows, b_eq=rhs, bounds=(0, None), method="highs").fun


class TestWasserstein:
    def test_examples(self):
        assert wasserstein_1d([3.0, -1.0, 2.0], [2.0, 3.0, -1.0]) == 0.0
        assert wasserstein_1d([0.0], [1.0]) == 1.0
        assert wasserstein_1d([0.0, 1.0], [1.0, 2.0]) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            wasserstein_1d([], [1.0])

    @settings(max_examples=150, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.lists(st.floats(-10, 10), min_size=1, max_size=8))
    def test_matches_transport_lp(self, a, b):
        assert wasserstein_1d(a, b) == pytest.approx(ot_lp(np.array(a), np.array(b)), abs=1e-9)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30))
    def test_agrees_with_scipy_and_is_symmetric(self, a, b):
        w = wasserstein_1d(a, b)
        assert w == pytest.approx(wasserstein_distance(a, b), rel=1e-9, abs=1e-9)
        assert w == pytest.approx(wasserstein_1d(b, a), rel=1e-12, abs=1e-12)
        assert w >= 0


class TestEvaluate:
    def test_replay(self, corpus):
        rep = evaluate_generator(replay_generator, corpus)
        assert rep.attack_success_rate == 0.0
        assert (rep.wd_accel, rep.wd_vel, rep.wd_yaw) == (0.0, 0.0, 0.0)
        assert rep.feasibility_rate == 1.0 and rep.n_skipped == 0 and rep.n_scenarios == len(corpus)

    def test_constant_off_road(self, corpus):
        def far_away(s, ego):
            t = s.logged_future(s.adversary)
            return Trajectory(t.xy + 500.0 * np.array([np.cos(t.heading[0] + np.pi / 2),
                                                       np.sin(t.heading[0] + np.pi / 2)]), t.heading, t.speed, t.dt)
        rep = evaluate_generator(far_away, corpus)
        assert rep.cross_line_rate == 1.0
        assert rep.feasibility_rate == 0.0

    def test_failures_are_skipped(self, corpus):
        def flaky(s, ego):
            if s.id == corpus[0].id:
                raise RuntimeError("boom")
            return replay_generator(s, ego)
        rep = evaluate_generator(flaky, corpus[:4])
        assert rep.n_skipped == 1 and rep.n_scenarios == 3

    def test_rates_are_exact_fractions(self, corpus):
        hit = {s.id for s in corpus[:3]}

        def ram(s, ego):  # drive straight through the ego on three scenarios
            return ego if s.id in hit else replay_generator(s, ego)
        rep = evaluate_generator(ram, corpus)
        assert rep.attack_success_rate == 3 / len(corpus)

    def test_deterministic_and_worker_invariant(self, corpus, experts, theta_ref):
        from steeradv.steering import MixSpec, steered_generator
        gen = steered_generator(MixSpec("weight_interp", 0.5), experts, theta_ref, 0.5, 8)
        a = evaluate_generator(gen, corpus)
        assert evaluate_generator(gen, corpus).to_csv() == a.to_csv()
        assert evaluate_generator(gen, corpus, workers=4).to_csv() == a.to_csv()

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate_generator(replay_generator, [])

    def test_table_layout(self, corpus):
        text = evaluate_generator(replay_generator, corpus[:2]).table()
        head, values = text.splitlines()
        assert "Attack Succ." in head and len(head.split("|")) == len(values.split("|")) == 9


def test_report_csv_round_trip():
    rep = EvalReport(0.25, 1.5, 0.1, 0.2, 0.0, 0.125, 0.875, 0.3, 0.4, 0.5, 8)
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("attack_success_rate,") and lines[1].startswith("0.25,1.5,")
    assert rep.mean_p_real == pytest.approx(0.3)


def test_rows_csv():
    assert rows_csv([{"a": 0.1, "b": 2}]) == "a,b\n0.1,2\n"
    assert rows_csv([]) == ""


def test_parallel_map_preserves_order():
    assert parallel_map(lambda x: x * x, list(range(20)), workers=5) == [x * x for x in range(20)]


def test_spearman():
    assert spearman([0, 1, 2, 3], [0.1, 0.2, 0.2, 0.9]) == pytest.approx(0.9486832980505138)
    assert np.isnan(spearman([0, 1, 2], [1, 1, 1]))
