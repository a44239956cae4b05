import numpy as np
import pytest
from shapely.geometry import Polygon

from builders import LANE, cruise, cut_in_states, make_scenario
from steeradv.closed_loop import (ClosedLoopConfig, CemConfig, CurriculumSchedule, EgoPolicy, episode_score,
                                  evaluate_ego, improve_ego, load_ego, parametric, run_closed_loop, run_episode,
                                  save_ego, schedule_lambda, schedule_padv)
from steeradv.geometry import box_corners
from steeradv.policy import forward, prepare
from steeradv.steering import rank_candidates, user_scores

EGO0 = parametric((1.0, 0.3, 2.0, 0.0, 2.0))
EPISODE_EGO = EgoPolicy("reactive_pd")


class TestSchedule:
    def test_start_and_end(self):
        sched = CurriculumSchedule(T_total=10, lambda_start=0.2, lambda_end=0.8)
        assert schedule_lambda(0, sched) == 0.2
        assert schedule_lambda(5, sched) == 0.8 and schedule_lambda(50, sched) == 0.8

    def test_quarter_point(self):
        sched = CurriculumSchedule(T_total=40, p_start=0.1, p_end=0.9)
        assert sched.ramp == 20
        assert schedule_padv(10, sched) == pytest.approx(0.5, abs=1e-15)

    def test_explicit_full_ramp(self):
        sched = CurriculumSchedule(T_total=10, T_ramp=10)
        assert schedule_padv(5, sched) == pytest.approx(0.5)

    def test_decreasing_schedule_clamped(self):
        sched = CurriculumSchedule(T_total=4, lambda_start=1.0, lambda_end=0.0)
        vals = [schedule_lambda(t, sched) for t in np.linspace(0, 8, 33)]
        assert all(0.0 <= v <= 1.0 for v in vals) and vals == sorted(vals, reverse=True)

    def test_validation(self):
        with pytest.raises(ValueError):
            CurriculumSchedule(T_total=4, p_end=1.2)
        with pytest.raises(ValueError):
            CurriculumSchedule(T_total=4, T_ramp=6)
        with pytest.raises(ValueError):
            schedule_lambda(-1, CurriculumSchedule(T_total=4))


def overlap_steps(ego_xy, ego_h, ego_size, adv_xy, adv_h, adv_size):
    """Steps (from 1) where the two boxes overlap, via shapely polygons."""
    out = []
    for t in range(1, len(ego_xy)):
        a = Polygon(box_corners(np.array([[*ego_xy[t], ego_h[t], *ego_size]]))[0])
        b = Polygon(box_corners(np.array([[*adv_xy[t], adv_h[t], *adv_size]]))[0])
        if a.intersects(b):
            out.append(t)
    return out


class TestEpisode:
    def test_replay_on_corpus(self, corpus):
        for s in corpus:
            res = run_episode(s, EgoPolicy("replay"))
            assert not res.collided and res.completion == 1.0 and res.events == ()

    def test_identical_path_collides_immediately(self, corpus):
        for s in corpus[:5]:
            ghost = s.logged_future(s.ego)
            res = run_episode(s, EgoPolicy("replay"), ghost)
            assert res.collided and res.collision_step == 1

    def test_reactive_cut_in_matches_polygon_replay(self):
        s = make_scenario(adv_states=cut_in_states(start_gap=8.0, cut_time=0.5))
        adv = s.logged_future(s.adversary)
        res = run_episode(s, EgoPolicy("reactive_pd"), adv)
        ego = res.ego_traj
        sizes = (s.ego.length, s.ego.width), (s.adversary.length, s.adversary.width)
        hits = overlap_steps(ego.xy, ego.heading, sizes[0], adv.xy, adv.heading, sizes[1])
        assert res.collided == bool(hits)
        assert res.collision_step == (hits[0] if hits else None)
        if hits:  # the ego holds its pose after the crash
            assert np.all(ego.xy[hits[0]:] == ego.xy[hits[0]]) and np.all(ego.speed[hits[0]:] == 0)

    def test_reactive_brakes_for_cut_in(self):
        s = make_scenario(adv_states=cut_in_states(start_gap=25.0, cut_time=1.0))
        calm = run_episode(s, EgoPolicy("replay"))
        reactive = run_episode(s, EgoPolicy("reactive_pd"))
        assert calm.collided and not reactive.collided
        assert reactive.ego_traj.speed.min() < s.ego.states[s.current_index, 3]

    def test_idm_follows_slow_leader(self):
        lead = cruise(25.0, -LANE / 2, 5.0)
        s = make_scenario(adv_states=cruise(-60.0, LANE / 2, 10.0), background=[lead])
        res = run_episode(s, EgoPolicy("idm"))
        assert not res.collided and res.ego_traj.speed[-1] < 7.0

    def test_background_crash_is_an_object_event(self):
        s = make_scenario(background=[cruise(20.0, -LANE / 2, 0.0)])  # parked in the ego lane
        res = run_episode(s, EgoPolicy("replay"))
        assert res.crashed_object and res.collided and res.collision_step is None
        assert res.events[0][1] == "object"
        assert len(res.ego_traj) == s.future_steps + 1

    def test_deterministic(self, corpus):
        s = corpus[3]
        a, b = run_episode(s, EPISODE_EGO), run_episode(s, EPISODE_EGO)
        assert a.ego_traj == b.ego_traj and a.events == b.events

    def test_length_checked(self, corpus):
        s = corpus[0]
        t = s.logged_future(s.adversary)
        with pytest.raises(ValueError):
            run_episode(s, EgoPolicy("replay"), type(t)(t.xy[:10], t.heading[:10], t.speed[:10]))


class TestEgoPolicy:
    def test_parametric_validation(self):
        with pytest.raises(ValueError):
            EgoPolicy("parametric", (1.0, 2.0))
        with pytest.raises(ValueError):
            EgoPolicy("parametric", (1.0, 2.0, np.nan, 0.0, 1.0))
        with pytest.raises(ValueError):
            EgoPolicy("td3")

    def test_parametric_clips_to_box(self):
        ego = parametric((100.0, -1.0, 5.0, 0.5, 1.0))
        assert ego.params[0] == 3.0 and ego.params[1] == 0.0

    def test_save_load(self, tmp_path):
        save_ego(tmp_path / "ego.json", EGO0)
        assert load_ego(tmp_path / "ego.json") == EGO0
        save_ego(tmp_path / "r.json", EgoPolicy("idm"))
        assert load_ego(tmp_path / "r.json").kind == "idm"


def _steered(experts, theta_ref, lam=1.0, mu=1.0):
    from steeradv.steering import MixSpec, generate_steered
    spec = MixSpec("weight_interp", lam)
    return lambda s, ego: generate_steered(spec, experts, theta_ref, s, ego, mu, 8)


class TestImproveEgo:
    def test_zero_budget_is_identity(self, corpus, experts, theta_ref):
        out = improve_ego(EGO0, corpus[:3], _steered(experts, theta_ref), 0, np.random.default_rng(0))
        assert out == EGO0

    def test_population_one_is_identity(self, corpus, experts, theta_ref):
        out = improve_ego(EGO0, corpus[:3], _steered(experts, theta_ref), 3, np.random.default_rng(0),
                          CemConfig(population=1))
        assert out == EGO0

    def test_needs_parametric_ego(self, corpus):
        with pytest.raises(ValueError):
            improve_ego(EgoPolicy("idm"), corpus[:1], lambda s, e: None, 1, np.random.default_rng(0))
        with pytest.raises(ValueError):
            improve_ego(EGO0, corpus[:1], lambda s, e: None, -1, np.random.default_rng(0))

    def test_incumbent_guard(self, corpus, experts, theta_ref):
        batch = corpus[:6]
        gen = _steered(experts, theta_ref)
        out = improve_ego(EGO0, batch, gen, 2, np.random.default_rng(4), CemConfig(population=4))
        advs = [gen(s, EGO0.rollout(s)) for s in batch]

        def score(ego):
            return episode_score([run_episode(s, ego, a) for s, a in zip(batch, advs)], 1.0)
        assert score(out) >= score(EGO0)

    def test_seeded(self, corpus, experts, theta_ref):
        gen = _steered(experts, theta_ref)
        runs = [improve_ego(EGO0, corpus[:4], gen, 1, np.random.default_rng(9), CemConfig(population=3))
                for _ in range(2)]
        assert runs[0] == runs[1]


CL_CFG = ClosedLoopConfig(batch_size=4, holdout=4, cem=CemConfig(population=3), cem_budget=1)


class TestClosedLoop:
    def test_benign_schedule_never_generates(self, corpus, experts, theta_ref):
        sched = CurriculumSchedule(T_total=2, p_start=0.0, p_end=0.0)
        res = run_closed_loop(theta_ref, experts, EGO0, corpus, sched, CL_CFG, np.random.default_rng(0))
        assert res.generator_calls == 0
        assert len(res.history) == 2
        assert all(h.n_adversarial == 0 for h in res.history)

    def test_lambda_zero_uses_realism_expert(self, corpus, experts, theta_ref):
        sched = CurriculumSchedule(T_total=2, lambda_start=0.0, lambda_end=0.0, p_start=1.0, p_end=1.0)
        ego = EgoPolicy("reactive_pd")
        seen = []
        res = run_closed_loop(theta_ref, experts, ego, corpus, sched, CL_CFG, np.random.default_rng(1),
                              on_generate=lambda t, s, spec, mu, adv: seen.append((s, mu, adv)))
        assert res.generator_calls == len(seen) == 2 * CL_CFG.batch_size
        real = experts.real
        for s, mu, adv in seen:
            prep = prepare(s, real.config)
            r_mu = user_scores(s, ego.rollout(s), mu, real.config)
            assert adv == prep.trajectories[rank_candidates(forward(real, prep.inputs)[0], r_mu, 8)]

    def test_history_and_csv(self, corpus, experts, theta_ref):
        sched = CurriculumSchedule(T_total=3)
        res = run_closed_loop(theta_ref, experts, EGO0, corpus, sched, CL_CFG, np.random.default_rng(2))
        assert len(res.history) == 3
        assert [h.lam for h in res.history] == [0.5, pytest.approx(0.5 + 0.5 / 1.5), 1.0]
        assert res.history[0].mu == 0.5 and res.history[-1].mu == 1.0
        assert len(res.to_csv().splitlines()) == 1 + 1 + 3
        again = run_closed_loop(theta_ref, experts, EGO0, corpus, sched, CL_CFG, np.random.default_rng(2))
        assert again.to_csv() == res.to_csv()

    def test_holdout_must_fit(self, corpus, experts, theta_ref):
        with pytest.raises(ValueError):
            run_closed_loop(theta_ref, experts, EGO0, corpus[:4], CurriculumSchedule(T_total=1), CL_CFG)

    def test_evaluate_ego_rates(self, corpus, experts, theta_ref):
        m = evaluate_ego(EgoPolicy("replay"), corpus[:4], experts, theta_ref)
        assert m.benign_collision_rate == 0.0 and m.benign_completion == 1.0
        assert m.adv_collision_rate in {k / 4 for k in range(5)}
