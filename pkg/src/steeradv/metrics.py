"""Open-loop evaluation of adversary generators and distributional distances."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .geometry import Trajectory, kinematic_profile
from .rewards import RewardConfig, adv_reward, first_collision_step, map_violations, realism_penalty
from .scenario import Scenario

Generator = Callable[[Scenario, Trajectory], Trajectory]


def wasserstein_1d(a, b) -> float:
    """1-Wasserstein distance between two empirical distributions.

    Integrates the absolute difference of the two quantile functions, which
    for equal sample counts is the mean absolute difference of the sorted
    samples.
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein_1d needs nonempty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # both quantile functions are step functions; integrate over the merged breakpoints
    qs = np.union1d(np.arange(1, a.size) / a.size, np.arange(1, b.size) / b.size)
    edges = np.concatenate([[0.0], qs, [1.0]])
    mid = 0.5 * (edges[:-1] + edges[1:])
    qa = a[np.minimum((mid * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((mid * b.size).astype(int), b.size - 1)]
    return float(np.sum(np.diff(edges) * np.abs(qa - qb)))


def parallel_map(fn, items: Sequence, workers: int | None = 1) -> list:
    """Order-preserving map; ``workers`` never changes the result."""
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# ego interaction used by the two-stage protocol


def ego_rollout(ego_policy, s: Scenario) -> Trajectory:
    """Stage one: the ego's behaviour on the unmodified scenario."""
    if ego_policy is None:
        return s.logged_future(s.ego)
    return ego_policy.rollout(s)


def ego_response(ego_policy, s: Scenario, adv: Trajectory) -> tuple[Trajectory, int | None]:
    """Stage two: the ego re-simulated against ``adv``; returns the ego path and the collision step."""
    if ego_policy is None:
        ego = s.logged_future(s.ego)
        a, e = s.adversary, s.ego
        return ego, first_collision_step(adv, ego, (a.length, a.width), (e.length, e.width))
    return ego_policy.respond(s, adv)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EvalReport:
    attack_success_rate: float
    mean_adv_reward: float
    mean_p_beh: float
    mean_p_kin: float
    crash_obj_rate: float
    cross_line_rate: float
    feasibility_rate: float
    wd_accel: float
    wd_vel: float
    wd_yaw: float
    n_scenarios: int
    n_skipped: int = 0

    @property
    def mean_p_real(self) -> float:
        return self.mean_p_beh + self.mean_p_kin

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=[f.name for f in fields(self)], lineterminator="\n")
        w.writeheader()
        w.writerow({k: _fmt(v) for k, v in asdict(self).items()})
        return buf.getvalue()

    def table(self) -> str:
        head = ("Attack Succ.", "Adv. Reward", "P_beh", "P_kin", "Crash Obj.", "Cross Line",
                "WD acc", "WD vel", "WD yaw")
        vals = (self.attack_success_rate, self.mean_adv_reward, self.mean_p_beh, self.mean_p_kin,
                self.crash_obj_rate, self.cross_line_rate, self.wd_accel, self.wd_vel, self.wd_yaw)
        return " | ".join(f"{h:>12}" for h in head) + "\n" + " | ".join(f"{v:>12.4f}" for v in vals)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def rows_csv(rows: Sequence[dict]) -> str:
    """CSV text for a list of dicts sharing the first row's keys; floats use ``repr``."""
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


@dataclass(frozen=True)
class ScenarioOutcome:
    scenario_id: str
    collided: bool
    adv: float
    p_kin: float
    p_beh: float
    crosses: bool
    hits_object: bool
    profile: tuple


def _profile(traj: Trajectory) -> tuple:
    prof = kinematic_profile(traj.xy, traj.dt, traj.heading)
    return prof.long_accels, prof.speeds, prof.ang_vels


def evaluate_trajectory(s: Scenario, adv: Trajectory, ego_policy=None,
                        cfg: RewardConfig | None = None) -> ScenarioOutcome:
    cfg = cfg or RewardConfig()
    ego, t_coll = ego_response(ego_policy, s, adv)
    a, e = s.adversary, s.ego
    p_kin, p_beh = realism_penalty(adv, cfg)
    crosses, hits = map_violations(adv, s)
    return ScenarioOutcome(s.id, t_coll is not None,
                           adv_reward(adv, ego, ((a.length, a.width), (e.length, e.width)), cfg),
                           p_kin, p_beh, crosses, hits, _profile(adv))


def evaluate_generator(generator: Generator, corpus: Sequence[Scenario], ego_policy=None,
                       cfg: RewardConfig | None = None, workers: int | None = 1) -> EvalReport:
    """Two-stage open-loop evaluation.

    The ego is first rolled out on the unmodified scenario and the generator
    attacks that rollout; the scenario is then re-simulated with the
    generated adversary. A generator exception skips the scenario.
    """
    if not corpus:
        raise ValueError("empty corpus")
    cfg = cfg or RewardConfig()

    def one(s):
        try:
            adv = generator(s, ego_rollout(ego_policy, s))
        except Exception:  # counted as a skip in the report
            return None
        return evaluate_trajectory(s, adv, ego_policy, cfg)

    outcomes = parallel_map(one, list(corpus), workers)
    done = [o for o in outcomes if o is not None]
    skipped = len(outcomes) - len(done)
    if not done:
        raise RuntimeError("generator failed on every scenario")
    n = len(done)
    gen = [np.concatenate([o.profile[k] for o in done]) for k in range(3)]
    log = [np.concatenate([_profile(s.logged_future(s.adversary))[k] for s, o in zip(corpus, outcomes)
                           if o is not None]) for k in range(3)]
    return EvalReport(
        attack_success_rate=sum(o.collided for o in done) / n,
        mean_adv_reward=float(np.mean([o.adv for o in done])),
        mean_p_beh=float(np.mean([o.p_beh for o in done])),
        mean_p_kin=float(np.mean([o.p_kin for o in done])),
        crash_obj_rate=sum(o.hits_object for o in done) / n,
        cross_line_rate=sum(o.crosses for o in done) / n,
        feasibility_rate=sum(not (o.crosses or o.hits_object) for o in done) / n,
        wd_accel=wasserstein_1d(gen[0], log[0]),
        wd_vel=wasserstein_1d(gen[1], log[1]),
        wd_yaw=wasserstein_1d(gen[2], log[2]),
        n_scenarios=n,
        n_skipped=skipped,
    )


def replay_generator(s: Scenario, ego: Trajectory) -> Trajectory:
    """The logged adversary future, ignoring the ego."""
    return s.logged_future(s.adversary)


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties (nan if constant)."""
    from scipy.stats import spearmanr

    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(spearmanr(x, y).statistic)
