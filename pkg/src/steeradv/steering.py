"""Test-time steering between two expert policies.

Weight interpolation and preference-vector extrapolation build a new
parameter vector; the trajectory- and logit-mixing baselines combine the
experts' outputs instead. Every mode proposes ``K`` candidates and returns
the one with the highest user reward ``mu * R_adv - (1 - mu) * P_real``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Trajectory, headings_from_positions
from .metrics import EvalReport, evaluate_generator, parallel_map, spearman
from .policy import PolicyParams, forward, log_softmax, prepare
from .rewards import RewardConfig
from .scenario import Scenario

MODES = ("weight_interp", "weight_extrap", "traj_mix", "logit_mix")
BASES = ("ref", "real", "adv", "interp")


@dataclass(frozen=True, eq=False)
class Experts:
    adv: PolicyParams
    real: PolicyParams

    def __post_init__(self):
        if self.adv.sizes != self.real.sizes:
            raise ValueError("experts have different architectures")


@dataclass(frozen=True, eq=False)
class PreferenceVector:
    delta: np.ndarray
    label: str

    def __post_init__(self):
        if self.label not in ("adv", "real"):
            raise ValueError(f"unknown label {self.label!r}")


def preference_vector(theta_expert: PolicyParams, theta_ref: PolicyParams, label: str) -> PreferenceVector:
    if theta_expert.dim != theta_ref.dim:
        raise ValueError("dimension mismatch")
    return PreferenceVector(theta_expert.theta - theta_ref.theta, label)


@dataclass(frozen=True)
class MixSpec:
    mode: str = "weight_interp"
    lam: float = 0.5
    phi: tuple = ()  # ((label, coefficient), ...) for weight_extrap
    base: str = "ref"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.base not in BASES:
            raise ValueError(f"unknown base {self.base!r}")
        if not math.isfinite(self.lam):
            raise ValueError("lambda must be finite")
        if self.mode != "weight_extrap" and not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"{self.mode} requires lambda in [0, 1], got {self.lam}")
        if self.phi and self.mode != "weight_extrap":
            raise ValueError("extrapolation coefficients only apply to weight_extrap")
        for label, c in self.phi:
            if label not in ("adv", "real") or not math.isfinite(c):
                raise ValueError(f"bad extrapolation term {(label, c)!r}")


def lambda_for_mu(mu: float) -> float:
    """Default linkage between the user preference and the mixing coefficient."""
    return mu


# ---------------------------------------------------------------------------
# weight space


def interpolate(theta_real: PolicyParams, theta_adv: PolicyParams, lam: float) -> PolicyParams:
    if theta_real.dim != theta_adv.dim:
        raise ValueError("dimension mismatch")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda outside [0, 1]; use extrapolate")
    return theta_real.with_theta((1.0 - lam) * theta_real.theta + lam * theta_adv.theta)


def extrapolate(theta_base: PolicyParams, vectors: Sequence[tuple[PreferenceVector, float]]) -> PolicyParams:
    out = theta_base.theta.copy()
    for vec, phi in vectors:
        if vec.delta.shape != out.shape:
            raise ValueError("dimension mismatch")
        out = out + phi * vec.delta
    return theta_base.with_theta(out)


def mixed_params(spec: MixSpec, experts: Experts, theta_ref: PolicyParams) -> PolicyParams:
    if spec.mode == "weight_interp":
        return interpolate(experts.real, experts.adv, spec.lam)
    if spec.mode != "weight_extrap":
        raise ValueError(f"{spec.mode} does not define a single parameter vector")
    base = {
        "ref": theta_ref,
        "real": experts.real,
        "adv": experts.adv,
        "interp": interpolate(experts.real, experts.adv, min(max(spec.lam, 0.0), 1.0)),
    }[spec.base]
    vecs = {"adv": preference_vector(experts.adv, theta_ref, "adv"),
            "real": preference_vector(experts.real, theta_ref, "real")}
    return extrapolate(base, [(vecs[label], c) for label, c in spec.phi])


# ---------------------------------------------------------------------------
# candidate ranking


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    return np.argsort(-scores, kind="stable")[:k]


def user_scores(s: Scenario, ego: Trajectory | None, mu: float, cfg) -> np.ndarray:
    """``R_mu`` for every goal of the scenario's candidate set."""
    prep = prepare(s, cfg)
    adv = prep.adversarial(ego)[0]
    return mu * adv - (1.0 - mu) * prep.p_real


def rank_candidates(scores: np.ndarray, r_mu: np.ndarray, k: int) -> int:
    if k < 1:
        raise ValueError("K_candidates must be >= 1")
    cand = top_k(scores, k)
    return int(cand[int(np.argmax(r_mu[cand]))])


def _ego_key(s: Scenario, ego: Trajectory | None):
    return None if ego is None or ego == s.logged_future(s.ego) else ego


def generate_steered(spec: MixSpec, experts: Experts, theta_ref: PolicyParams, s: Scenario,
                     ego_traj: Trajectory | None, mu: float, K_candidates: int = 8) -> Trajectory:
    """Best of the mixed model's top-``K_candidates`` goals under ``R_mu``."""
    if spec.mode == "traj_mix":
        return mix_trajectories(spec, experts, s, ego_traj, K_candidates)
    if spec.mode == "logit_mix":
        return mix_logits(spec, experts, s, ego_traj, mu, K_candidates)
    theta = mixed_params(spec, experts, theta_ref)
    prep = prepare(s, theta.config)
    logits = forward(theta, prep.inputs)[0]
    r_mu = user_scores(s, _ego_key(s, ego_traj), mu, theta.config)
    return prep.trajectories[rank_candidates(logits, r_mu, K_candidates)]


def mix_trajectories(spec: MixSpec, experts: Experts, s: Scenario, ego_traj: Trajectory | None = None,
                     K_candidates: int = 1) -> Trajectory:
    """Pointwise blend of the two experts' standalone outputs.

    Each expert picks its best top-``K_candidates`` goal under its own end
    of the preference range (``mu = 0`` for the realism expert, ``mu = 1``
    for the adversarial one); positions are mixed with ``lam`` and headings
    are recomputed from the blended path.
    """
    ego = _ego_key(s, ego_traj)
    picks = []
    for theta, mu in ((experts.real, 0.0), (experts.adv, 1.0)):
        prep = prepare(s, theta.config)
        logits = forward(theta, prep.inputs)[0]
        picks.append(prep.trajectories[rank_candidates(logits, user_scores(s, ego, mu, theta.config), K_candidates)])
    return blend(picks[0], picks[1], spec.lam)


def blend(t_real: Trajectory, t_adv: Trajectory, lam: float) -> Trajectory:
    if len(t_real) != len(t_adv):
        raise ValueError("trajectory length mismatch")
    if lam == 0.0:
        return t_real
    if lam == 1.0:
        return t_adv
    xy = (1.0 - lam) * t_real.xy + lam * t_adv.xy
    heading = headings_from_positions(xy, float(t_real.heading[0]))
    step = np.hypot(*np.diff(xy, axis=0).T) / t_real.dt
    speed = np.concatenate([[t_real.speed[0]], step])
    return Trajectory(xy, heading, speed, t_real.dt)


def mix_logits(spec: MixSpec, experts: Experts, s: Scenario, ego_traj: Trajectory | None = None,
               mu: float | None = None, K_candidates: int = 1) -> Trajectory:
    """Decode from ``(1 - lam) * logits_real + lam * logits_adv``.

    With ``K_candidates == 1`` this is the plain argmax (lowest index on ties).
    """
    if experts.real.config.grid != experts.adv.config.grid:
        raise ValueError("experts use different goal grids")
    mu = spec.lam if mu is None else mu
    prep = prepare(s, experts.real.config)
    z_real = forward(experts.real, prep.inputs)[0]
    z_adv = forward(experts.adv, prep.inputs)[0]
    scores = (1.0 - spec.lam) * z_real + spec.lam * z_adv
    r_mu = user_scores(s, _ego_key(s, ego_traj), mu, experts.real.config)
    return prep.trajectories[rank_candidates(scores, r_mu, K_candidates)]


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepRow:
    mode: str
    lam: float
    mean_adv: float
    mean_p_real: float
    attack_success_rate: float
    feasibility_rate: float
    n_scenarios: int


@dataclass(frozen=True, eq=False)
class SweepReport:
    rows: tuple

    def by_mode(self, mode: str) -> list[SweepRow]:
        return [r for r in self.rows if r.mode == mode]

    def spearman(self, mode: str = "weight_interp") -> float:
        rows = self.by_mode(mode)
        return spearman([r.lam for r in rows], [r.attack_success_rate for r in rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "lambda", "mean_adv", "mean_p_real", "attack_success_rate",
                    "feasibility_rate", "n_scenarios"])
        for r in self.rows:
            w.writerow([r.mode, repr(r.lam), repr(r.mean_adv), repr(r.mean_p_real),
                        repr(r.attack_success_rate), repr(r.feasibility_rate), r.n_scenarios])
        return buf.getvalue()


@dataclass(frozen=True)
class SteerConfig:
    K_candidates: int = 8
    reward: RewardConfig = field(default_factory=RewardConfig)


def steered_generator(spec: MixSpec, experts: Experts, theta_ref: PolicyParams, mu: float, k: int):
    def gen(s: Scenario, ego: Trajectory) -> Trajectory:
        return generate_steered(spec, experts, theta_ref, s, ego, mu, k)
    return gen


def pareto_sweep(experts: Experts, theta_ref: PolicyParams, corpus: Sequence[Scenario], ego_policy,
                 lambdas: Sequence[float], modes: Sequence[str] = ("weight_interp",),
                 cfg: SteerConfig | None = None, workers: int | None = 1) -> SweepReport:
    """Corpus metrics for every ``(mode, lambda)`` cell, in grid order."""
    if not corpus:
        raise ValueError("empty corpus")
    cfg = cfg or SteerConfig()
    rows = []
    for mode in modes:
        for lam in lambdas:
            spec = MixSpec(mode, float(lam))
            gen = steered_generator(spec, experts, theta_ref, lambda_for_mu(float(lam)), cfg.K_candidates)
            rep: EvalReport = evaluate_generator(gen, corpus, ego_policy, cfg.reward, workers)
            rows.append(SweepRow(mode, float(lam), rep.mean_adv_reward, rep.mean_p_real,
                                 rep.attack_success_rate, rep.feasibility_rate, rep.n_scenarios))
    return SweepReport(tuple(rows))


# ---------------------------------------------------------------------------
# landscape diagnostics


def expected_reward(theta: PolicyParams, corpus: Sequence[Scenario], w_adv: float, w_real: float) -> float:
    """Corpus mean of ``E_pi[w_adv * R_adv - w_real * P_real]`` against the logged ego."""
    vals = []
    for s in corpus:
        prep = prepare(s, theta.config)
        p = np.exp(log_softmax(forward(theta, prep.inputs)[0]))
        vals.append(p @ (w_adv * prep.adversarial()[0] - w_real * prep.p_real))
    return float(np.mean(vals))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass(frozen=True, eq=False)
class LandscapeReport:
    lambdas: np.ndarray
    reward_adv: np.ndarray  # expected adversarial-expert objective along the segment
    reward_real: np.ndarray
    chord_adv: np.ndarray
    chord_real: np.ndarray
    plane_a: np.ndarray | None
    plane_b: np.ndarray | None
    plane_reward: np.ndarray | None
    pca_labels: tuple
    pca_coords: np.ndarray
    norm_adv: float
    norm_real: float
    cos_adv_real: float
    degenerate: bool

    @property
    def angle_deg(self) -> float:
        return math.degrees(math.acos(self.cos_adv_real))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "reward_adv", "reward_real", "chord_adv", "chord_real"])
        for row in zip(self.lambdas, self.reward_adv, self.reward_real, self.chord_adv, self.chord_real):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def lmc_scan(experts: Experts, theta_ref: PolicyParams, corpus: Sequence[Scenario], lambdas: Sequence[float],
             plane_grid: Sequence[float] | None = None, w_star: float = 0.9, mu: float = 0.5,
             extrapolants: Sequence[float] = (1.5,)) -> LandscapeReport:
    """Rewards along the expert segment, optionally over the (ref, real, adv) plane.

    The plane is parameterised as ``theta_ref + a * delta_real + b * delta_adv``
    and scored with the user objective at ``mu``. A collinear triple skips the
    plane and sets ``degenerate``.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.size == 0:
        raise ValueError("empty lambda grid")
    ra, rr = [], []
    models = []
    for lam in lambdas:
        th = interpolate(experts.real, experts.adv, float(lam))
        models.append(th.theta)
        ra.append(expected_reward(th, corpus, w_star, 1 - w_star))
        rr.append(expected_reward(th, corpus, 1 - w_star, w_star))
    ra, rr = np.array(ra), np.array(rr)
    r_adv_1 = expected_reward(experts.adv, corpus, w_star, 1 - w_star)
    r_adv_0 = expected_reward(experts.real, corpus, w_star, 1 - w_star)
    r_real_1 = expected_reward(experts.adv, corpus, 1 - w_star, w_star)
    r_real_0 = expected_reward(experts.real, corpus, 1 - w_star, w_star)
    chord_a = (1 - lambdas) * r_adv_0 + lambdas * r_adv_1
    chord_r = (1 - lambdas) * r_real_0 + lambdas * r_real_1

    d_adv = experts.adv.theta - theta_ref.theta
    d_real = experts.real.theta - theta_ref.theta
    gram = np.array([[d_real @ d_real, d_real @ d_adv], [d_real @ d_adv, d_adv @ d_adv]])
    degenerate = bool(np.linalg.det(gram) <= 1e-12 * max(np.trace(gram) ** 2, 1e-300))
    pa = pb = pr = None
    if plane_grid is not None and not degenerate:
        g = np.asarray(plane_grid, dtype=float)
        pa, pb = np.meshgrid(g, g, indexing="ij")
        pr = np.array([[expected_reward(theta_ref.with_theta(theta_ref.theta + a * d_real + b * d_adv),
                                        corpus, mu, 1 - mu) for a, b in zip(ra_, rb_)]
                       for ra_, rb_ in zip(pa, pb)])

    labels = ["ref", "adv", "real"] + [f"interp_{lam:g}" for lam in lambdas] + [f"extrap_{p:g}" for p in extrapolants]
    flat = [theta_ref.theta, experts.adv.theta, experts.real.theta, *models]
    flat += [theta_ref.theta + p * d_adv + (1 - p) * d_real for p in extrapolants]
    X = np.stack(flat)
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:2]
    # fix the sign of each component so reruns are byte-identical
    comps = comps * np.where(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)] < 0, -1.0, 1.0)[:, None]
    coords = Xc @ comps.T
    return LandscapeReport(lambdas, ra, rr, chord_a, chord_r, pa, pb, pr, tuple(labels), coords,
                           float(np.linalg.norm(d_adv)), float(np.linalg.norm(d_real)),
                           cosine(d_adv, d_real), degenerate)


def p_real_at(rows: Sequence[SweepRow], level: float) -> float:
    """Lowest P_real where the mode's lambda path crosses the attack-success ``level``.

    Consecutive sweep points are joined by straight segments; ``inf`` if the
    path never reaches the level.
    """
    best = math.inf
    pts = [(r.attack_success_rate, r.mean_p_real) for r in rows]
    if len(pts) == 1 and pts[0][0] == level:
        return pts[0][1]
    for (a0, p0), (a1, p1) in zip(pts[:-1], pts[1:]):
        lo, hi = min(a0, a1), max(a0, a1)
        if not lo <= level <= hi:
            continue
        if a0 == a1:
            best = min(best, p0, p1)
        else:
            best = min(best, p0 + (level - a0) / (a1 - a0) * (p1 - p0))
    return best


@dataclass(frozen=True)
class FrontComparison:
    levels: tuple
    p_real: dict  # mode -> tuple of P_real at each level
    wins: int  # levels where the reference mode is <= every other mode


def compare_fronts(report: SweepReport, reference: str = "weight_interp",
                   others: Sequence[str] = ("traj_mix", "logit_mix"), n_levels: int = 5) -> FrontComparison:
    """Compare P_real at matched attack-success levels.

    Levels are the midpoints of ``n_levels`` equal bins spanning the range of
    success rates every mode reaches, so shared endpoints are never scored.
    """
    modes = (reference, *others)
    ranges = [(min(r.attack_success_rate for r in report.by_mode(m)),
               max(r.attack_success_rate for r in report.by_mode(m))) for m in modes]
    lo, hi = max(a for a, _ in ranges), min(b for _, b in ranges)
    if hi <= lo:
        raise ValueError("modes share no attack-success range")
    levels = tuple(lo + (hi - lo) * (k + 0.5) / n_levels for k in range(n_levels))
    table = {m: tuple(p_real_at(report.by_mode(m), a) for a in levels) for m in modes}
    wins = sum(all(table[reference][i] <= table[m][i] for m in others) for i in range(n_levels))
    return FrontComparison(levels, table, wins)
