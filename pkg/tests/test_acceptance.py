"""One check per acceptance criterion, each printed as a PASS/FAIL line in the terminal summary.

The reference run (default configuration, seed 0) is computed once per session.
"""
import math
from dataclasses import asdict

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import as_tuples, capped_oracle, central_difference, enumerate_pairs, rel_err
from steeradv.cli import main
from steeradv.closed_loop import CurriculumSchedule, schedule_padv
from steeradv.geometry import boxes_hit_polylines, boxes_intersect, kinematic_profile, unwrap_headings
from steeradv.hgpo import (FEASIBILITY_FIRST, WITHIN_FEASIBILITY, HgpoConfig, PreferencePair, build_pairs,
                           hgpo_loss, pairs_from_group)
from steeradv.metrics import wasserstein_1d
from steeradv.pipeline import PipelineConfig, run_reference, write_manifest
from steeradv.policy import (PolicyConfig, PolicyParams, forward, init_params, log_prob, log_prob_gradient,
                             log_softmax, prepare)
from steeradv.rewards import PreferenceWeights, RewardConfig, adv_reward_value, softplus_penalty
from steeradv.steering import extrapolate, interpolate, preference_vector
from steeradv.theory import QuadraticLandscape, expert_optima, optimal_lambda, quadratic_gap, user_optimum

pytestmark = pytest.mark.slow

SMALL_NET = PolicyConfig(hidden=(8, 8))


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


@pytest.fixture(scope="session")
def reference(tmp_path_factory):
    cfg = PipelineConfig()
    res = run_reference(cfg, workers=1)
    out = tmp_path_factory.mktemp("reference")
    res.write(out)
    write_manifest(out / "manifest_pipeline.json", "pipeline", {k: list(v) if isinstance(v, tuple) else v
                                                                 for k, v in asdict(cfg).items()})
    return res, out


def theory_result(res, name):
    return next(r for r in res.theory if r.name == name)


def test_criterion_01_quadratic_gap(reference):
    res, _ = reference
    gap, lam = theory_result(res, "quadratic_gap"), theory_result(res, "lambda_formula")
    n_rows = res.tables["theory_quadratic_gap"].count("\n") - 1
    record(1, gap.passed and lam.passed and n_rows == 500, f"{n_rows} instances; {gap.detail}; {lam.detail}")


def test_criterion_02_general_bound(reference):
    res, _ = reference
    r = theory_result(res, "general_bound")
    n_rows = res.tables["theory_general_bound"].count("\n") - 1
    record(2, r.passed and n_rows == 1000, f"{n_rows} instances; {r.detail}")


def test_criterion_03_mixing_decomposition(reference):
    res, _ = reference
    lin, quad = theory_result(res, "mix_linear"), theory_result(res, "mix_quadratic")
    record(3, lin.passed and quad.passed, f"linear: {lin.detail}; quadratic: {quad.detail}")


def test_criterion_04_gradients(reference):
    res, _ = reference
    corpus = res.corpus
    rng = np.random.default_rng(404)
    worst_lp = worst_loss = 0.0
    for k in range(100):
        p = init_params(rng, SMALL_NET)
        p = p.with_theta(p.theta * rng.uniform(1.0, 4.0))
        s, goal = corpus[k % len(corpus)], int(rng.integers(32))
        num = central_difference(lambda th: log_prob(p.with_theta(th), s, goal), p.theta)
        worst_lp = max(worst_lp, rel_err(log_prob_gradient(p, s, goal), num))

        ref = p.with_theta(p.theta + 0.2 * rng.standard_normal(p.dim))
        scen = [corpus[(k + j) % len(corpus)] for j in range(2)]
        pairs = [PreferencePair(int(w), int(l), FEASIBILITY_FIRST, scen[j % 2].id)
                 for j, (w, l) in enumerate(rng.choice(32, size=(3, 2), replace=False))]
        cfg = HgpoConfig(dpo_beta=float(rng.uniform(0.05, 1.0)))
        _, g = hgpo_loss(p, ref, pairs, scen, cfg)
        num = central_difference(lambda th: hgpo_loss(p.with_theta(th), ref, pairs, scen, cfg)[0], p.theta)
        worst_loss = max(worst_loss, rel_err(g, num))
    ok = worst_lp < 1e-4 and worst_loss < 1e-4
    record(4, ok, f"100 points each; max rel err log_prob {worst_lp:.2e}, HGPO loss {worst_loss:.2e}")


def test_criterion_05_pair_oracle(reference):
    res, _ = reference
    rng = np.random.default_rng(505)
    mismatches = 0
    for k in range(200):
        if k % 4 == 0:  # groups drawn by the trainer on the reference corpus
            s = res.corpus[k % len(res.corpus)]
            cfg = HgpoConfig(group_size=int(rng.integers(4, 33)), max_pairs=int(rng.integers(1, 12)))
            seed = int(rng.integers(2**32))
            pairs = build_pairs(res.experts.adv, s, None, PreferenceWeights(0.9, 0.1), cfg,
                                np.random.default_rng(seed))
            prep = prepare(s, res.experts.adv.config)
            drawn = np.unique(np.random.default_rng(seed).choice(
                32, size=cfg.group_size, p=np.exp(log_softmax(forward(res.experts.adv, prep.inputs)[0]))))
            pref = 0.9 * prep.adversarial()[0] - 0.1 * prep.p_real
            idx, feas, pr = list(drawn), list(prep.feasible[drawn]), list(pref[drawn])
            margin, K = cfg.margin, cfg.max_pairs
        else:
            n = int(rng.integers(1, 16))
            idx = sorted(rng.choice(64, size=n, replace=False).tolist())
            feas = list(rng.random(n) < rng.uniform(0.2, 0.9))
            pr = list(np.round(rng.normal(0, 1, n), int(rng.integers(0, 3))))  # rounding forces ties
            margin, K = float(rng.choice([0.0, 0.1, 0.2, 0.5])), int(rng.integers(1, 20))
            pairs = pairs_from_group(idx, feas, pr, margin, K)
        full = sorted((w, l, r) for w, l, r, _ in enumerate_pairs(idx, feas, pr, margin))
        uncapped = sorted(as_tuples(pairs_from_group(idx, feas, pr, margin, 10**6)))
        if uncapped != full or as_tuples(pairs) != capped_oracle(idx, feas, pr, margin, K):
            mismatches += 1
    record(5, mismatches == 0, f"{mismatches} mismatches over 200 groups (50 trainer-drawn)")


def test_criterion_06_steerability(reference):
    res, _ = reference
    rows = res.sweep.by_mode("weight_interp")
    rho = res.sweep.spearman("weight_interp")
    p = [r.mean_p_real for r in rows]
    inversions = sum(b < a for a, b in zip(p, p[1:]))
    asr = ", ".join(f"{r.attack_success_rate:.3f}" for r in rows)
    record(6, rho >= 0.9 and inversions <= 1,
           f"Spearman {rho:.3f} (ASR {asr}); P_real inversions {inversions}")


def test_criterion_07_feasibility_ablation(reference):
    res, _ = reference
    f = res.feasibility
    ok = f.with_map >= 0.8 and f.with_map - f.without_map >= 0.2
    record(7, ok, f"feasibility HGPO {f.with_map:.3f} vs no-map {f.without_map:.3f}")


def test_criterion_08_sample_efficiency(reference):
    res, _ = reference
    hg, dp = res.loss_curves.epochs_to_target()
    ok = hg is not None and dp is not None and hg < dp
    record(8, ok, f"epochs to DPO's final smoothed loss: HGPO {hg}, DPO {dp}")


def test_criterion_09_mixing_dominance(reference):
    res, _ = reference
    fc = res.fronts
    cells = "; ".join(f"ASR {lvl:.3f}: " + ", ".join(f"{m} {v[i]:.3f}" for m, v in fc.p_real.items())
                      for i, lvl in enumerate(fc.levels))
    record(9, fc.wins >= 3, f"weight interpolation wins {fc.wins}/5 levels [{cells}]")


def test_criterion_10_closed_loop(reference):
    res, _ = reference
    cl = res.closed_loop
    first, last = cl.initial, cl.history[-1].metrics
    ok = last.adv_collision_rate <= first.adv_collision_rate and \
        last.benign_completion >= first.benign_completion - 0.05
    record(10, ok, f"held-out adversarial collision rate {first.adv_collision_rate:.4f} -> "
                   f"{last.adv_collision_rate:.4f}; benign completion {first.benign_completion:.4f} -> "
                   f"{last.benign_completion:.4f}")


LOG1P_EXP_M7 = 0.000911466453774244691702  # log(1 + e^-7), mpmath
LOG1P_EXP_M005 = 0.668459648013286294151886  # log(1 + e^-0.05), mpmath
EXP_M1 = 0.367879441171442321595524


def formula_examples(res):
    """Name -> bool for the closed-form examples, evaluated directly."""
    experts, theta_ref, s = res.experts, res.theta_ref, res.corpus[0]
    cfg = RewardConfig()
    b0 = np.array([0.0, 0.0, 0.0, 4.0, 2.0])
    step = np.column_stack([np.arange(6.0), np.zeros(6)])
    prof = kinematic_profile(step, 0.1)
    turn = kinematic_profile(step, 0.1, 0.08 * np.arange(6.0))
    land = QuadraticLandscape(np.array([1.0, 0.0]), np.zeros(2))
    land2 = QuadraticLandscape(np.array([2.0, 0.0]), np.zeros(2))
    real2 = PolicyParams(np.array([0.0, 2.0]), (1, 1))
    adv2 = PolicyParams(np.array([2.0, 0.0]), (1, 1))
    d_adv = preference_vector(experts.adv, theta_ref, "adv")
    d_real = preference_vector(experts.real, theta_ref, "real")
    lam = 0.3
    direct = interpolate(experts.real, experts.adv, lam).theta
    via = extrapolate(theta_ref, [(d_adv, lam), (d_real, 1 - lam)]).theta
    small = init_params(np.random.default_rng(0), SMALL_NET)
    pair = [PreferencePair(0, 1, FEASIBILITY_FIRST, s.id)]
    gap2 = quadratic_gap(land2, 1.0, 0.9)
    sched = CurriculumSchedule(T_total=40, p_start=0.1, p_end=0.9)
    return {
        "identical boxes intersect": bool(boxes_intersect(b0, b0)[0]),
        "boxes 10 m apart are disjoint": not boxes_intersect(b0, b0 + [10, 0, 0, 0, 0])[0],
        "boxes 3.9 m apart intersect": bool(boxes_intersect(b0, b0 + [3.9, 0, 0, 0, 0])[0]),
        "segment through the centre hits": bool(boxes_hit_polylines(b0, np.array([[-10.0, 0, 10, 0]]))[0]),
        "segment 5 m off misses": not boxes_hit_polylines(b0, np.array([[-10.0, 5, 10, 5]]))[0],
        "1 m per step gives 10 m/s": np.allclose(prof.speeds, 10.0) and np.allclose(prof.long_accels, 0.0),
        "0.08 rad per step gives 0.8 rad/s": np.allclose(turn.ang_vels, 0.8),
        "a_lat = speed * omega": np.allclose(turn.lat_accels, turn.speeds * 0.8),
        "unwrap shifts by 2 pi": np.allclose(unwrap_headings([3.1, -3.1]), [3.1, -3.1 + 2 * math.pi]),
        "S(7, 7) = ln 2": math.isclose(softplus_penalty(7.0, 7.0), math.log(2), rel_tol=1e-12),
        "S(0, 7) = log(1 + e^-7)": math.isclose(softplus_penalty(0.0, 7.0), LOG1P_EXP_M7, rel_tol=1e-12),
        "S(1007, 7) ~ 1000": math.isclose(softplus_penalty(1007.0, 7.0), 1000.0, rel_tol=1e-9),
        "collision at 45 of 90 scores 5": math.isclose(adv_reward_value(45, 90, 0.0, cfg), 5.0, rel_tol=1e-12),
        "near miss at d=0 scores 1": adv_reward_value(None, 90, 0.0, cfg) == 1.0,
        "near miss at d=5 scores e^-1": math.isclose(adv_reward_value(None, 90, 5.0, cfg), EXP_M1, rel_tol=1e-12),
        "loss at the reference is ln 2": math.isclose(hgpo_loss(small, small, pair, [s], HgpoConfig())[0],
                                                      math.log(2), rel_tol=1e-12),
        "single pair at ratio gap 1, beta 0.05": math.isclose(
            single_pair_loss(small, s), LOG1P_EXP_M005, rel_tol=1e-12),
        "WD of identical samples is 0": wasserstein_1d([1.0, 3.0], [3.0, 1.0]) == 0.0,
        "WD {0} vs {1} is 1": wasserstein_1d([0.0], [1.0]) == 1.0,
        "WD {0,1} vs {1,2} is 1": wasserstein_1d([0.0, 1.0], [1.0, 2.0]) == 1.0,
        "interpolate at 0 is the realism expert": np.array_equal(interpolate(experts.real, experts.adv, 0.0).theta,
                                                                 experts.real.theta),
        "interpolate at 1 is the adversarial expert": np.array_equal(
            interpolate(experts.real, experts.adv, 1.0).theta, experts.adv.theta),
        "midpoint of (0,2) and (2,0) is (1,1)": interpolate(real2, adv2, 0.5).theta.tolist() == [1.0, 1.0],
        "zero coefficients return the base": np.array_equal(extrapolate(theta_ref, [(d_adv, 0.0)]).theta,
                                                           theta_ref.theta),
        "unit adversarial vector reaches the expert": np.allclose(
            extrapolate(theta_ref, [(d_adv, 1.0)]).theta, experts.adv.theta, rtol=1e-12, atol=0),
        "interpolation equals the preference-vector sum": bool(np.all(
            np.abs(via - direct) <= 1e-12 * np.maximum(np.abs(direct), 1.0))),
        "equal-curvature expert optimum (0.9, 0)": np.allclose(expert_optima(land, 0.9)[0], [0.9, 0.0],
                                                               rtol=0, atol=1e-15),
        "user optimum at mu=0.5 is the midpoint": user_optimum(
            QuadraticLandscape(np.array([4.0, 2.0]), np.array([0.0, -2.0])), 0.5).tolist() == [2.0, 0.0],
        "lambda(mu=0.7, beta=0.9) = 0.75": math.isclose(optimal_lambda(0.7, 0.9).lam, 0.75, rel_tol=1e-12),
        "no gap for mu inside [1-beta, beta]": quadratic_gap(land, 0.5, 0.9).closed_form == 0.0,
        "gap example 0.02": math.isclose(gap2.closed_form, 0.02, rel_tol=1e-12) and abs(gap2.measured - 0.02) <= 1e-6,
        "no gap at beta = 1": all(quadratic_gap(land, mu, 1.0).closed_form == 0.0 for mu in (0.0, 0.3, 1.0)),
        "ramp midpoint 0.5 at T/4": math.isclose(schedule_padv(10, sched), 0.5, rel_tol=1e-15),
    }


def single_pair_loss(ref, s, winner=4, loser=9):
    """Move the last hidden-to-output weights so the pair's log-ratio gap is exactly 1."""
    z, acts = forward(ref, prepare(s, ref.config).inputs)
    d = acts[-1][winner] - acts[-1][loser]
    theta = ref.theta.copy()
    theta[-1 - len(d):-1] += d / (d @ d)
    pair = [PreferencePair(winner, loser, WITHIN_FEASIBILITY, s.id)]
    return hgpo_loss(ref.with_theta(theta), ref, pair, [s], HgpoConfig(dpo_beta=0.05))[0]


def test_criterion_11_formula_suite(reference):
    res, _ = reference
    results = formula_examples(res)
    failed = [name for name, ok in results.items() if not ok]
    record(11, not failed, f"{len(results) - len(failed)}/{len(results)} examples" +
           (f"; failed: {', '.join(failed)}" if failed else ""))


def test_criterion_12_determinism(reference, tmp_path):
    res, ref_dir = reference
    code = main(["pipeline", "--config", str(ref_dir / "manifest_pipeline.json"), "--workers", "4",
                 "--out", str(tmp_path)])
    a = sorted(p.name for p in ref_dir.glob("*.csv"))
    b = sorted(p.name for p in tmp_path.glob("*.csv"))
    differ = [n for n in a if n in b and (ref_dir / n).read_bytes() != (tmp_path / n).read_bytes()]
    ok = code == 0 and a == b and not differ and len(a) > 0
    record(12, ok, f"{len(a)} CSVs from workers=1 vs a manifest re-run with workers=4; "
                   f"{len(differ)} differ" + (f" ({', '.join(differ)})" if differ else ""))
