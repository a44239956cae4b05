"""Adversarial reward, realism penalties, map feasibility and preference rewards."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Trajectory, boxes_hit_polylines, boxes_intersect, kinematic_profile, off_road, unwrap_headings


@dataclass(frozen=True)
class RewardConfig:
    C_coll: float = 10.0
    C_prox: float = 1.0
    lambda_prox: float = 0.2
    a_max: float = 7.0
    a_lat_max: float = 6.0
    omega_max: float = 0.8
    dpsi_max: float = math.pi
    w_a: float = 1.0
    w_omega: float = 1.0
    w_turn: float = 1.0
    w_stop_turn: float = 1.0
    eps: float = 1e-3
    dt: float = 0.1

    def __post_init__(self):
        for name in ("a_max", "a_lat_max", "omega_max", "dpsi_max", "eps", "dt", "lambda_prox"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class PreferenceWeights:
    w_adv: float
    w_real: float

    def __post_init__(self):
        if not (0.0 <= self.w_adv <= 1.0 and 0.0 <= self.w_real <= 1.0):
            raise ValueError("preference weights must lie in [0, 1]")

    @classmethod
    def expert(cls, w_star: float, adversarial: bool) -> "PreferenceWeights":
        return cls(w_star, 1.0 - w_star) if adversarial else cls(1.0 - w_star, w_star)

    @classmethod
    def user(cls, mu: float) -> "PreferenceWeights":
        return cls(mu, 1.0 - mu)


def softplus_penalty(x, thresh):
    """``log(1 + exp(|x| - thresh))`` without overflow."""
    return np.logaddexp(0.0, np.abs(x) - thresh)


# ---------------------------------------------------------------------------
# adversariality


def first_collision_step(adv: Trajectory, ego: Trajectory, adv_size, ego_size,
                         include_anchor: bool = False) -> int | None:
    """1-based index of the first future step where the two boxes touch.

    Element 0 of each trajectory is the anchor state and is skipped unless
    ``include_anchor`` is set (then the anchor counts as step 0).
    """
    if len(adv) != len(ego):
        raise ValueError("trajectory length mismatch")
    start = 0 if include_anchor else 1
    a = adv.boxes(*adv_size)[start:]
    b = ego.boxes(*ego_size)[start:]
    hits = np.flatnonzero(boxes_intersect(a, b))
    if len(hits) == 0:
        return None
    return int(hits[0]) + start


def adv_reward_value(t_coll: int | None, horizon: int, d_min: float, cfg: RewardConfig) -> float:
    if t_coll is not None and t_coll <= horizon:
        return cfg.C_coll * (1.0 - t_coll / horizon)
    return cfg.C_prox * math.exp(-cfg.lambda_prox * d_min)


def adv_reward(adv: Trajectory, ego: Trajectory, sizes, cfg: RewardConfig | None = None) -> float:
    """Collision-timing reward, or proximity reward if no collision occurs.

    ``sizes`` is ``((adv_length, adv_width), (ego_length, ego_width))``.
    """
    cfg = cfg or RewardConfig()
    if len(adv) != len(ego):
        raise ValueError("trajectory length mismatch")
    horizon = len(adv) - 1
    t_coll = first_collision_step(adv, ego, sizes[0], sizes[1])
    d_min = float(np.min(np.linalg.norm(adv.xy[1:] - ego.xy[1:], axis=1)))
    return adv_reward_value(t_coll, horizon, d_min, cfg)


# ---------------------------------------------------------------------------
# realism


def realism_penalty(traj: Trajectory, cfg: RewardConfig | None = None) -> tuple[float, float]:
    """Kinematic and behavioural penalties ``(p_kin, p_beh)``."""
    cfg = cfg or RewardConfig()
    if len(traj) < 3:
        raise ValueError("trajectory too short for realism penalty")
    prof = kinematic_profile(traj.xy, traj.dt, traj.heading)
    p_kin = float(np.mean(
        cfg.w_a * (softplus_penalty(prof.long_accels, cfg.a_max) + softplus_penalty(prof.lat_accels, cfg.a_lat_max))
        + cfg.w_omega * softplus_penalty(prof.ang_vels, cfg.omega_max)
    ))
    psi = unwrap_headings(traj.heading)
    turn = abs(psi[-1] - psi[0])
    stop_turn = np.mean(np.abs(prof.ang_vels) / (prof.speeds + cfg.eps))
    p_beh = float(cfg.w_turn * softplus_penalty(turn, cfg.dpsi_max) + cfg.w_stop_turn * stop_turn)
    return p_kin, p_beh


# ---------------------------------------------------------------------------
# feasibility


def map_violations(traj: Trajectory, scenario, agent=None, start: int | None = None,
                   skip_anchor: bool = True) -> tuple[bool, bool]:
    """``(crosses_impassable, hits_background)`` for the trajectory's steps.

    A step counts as crossing when its box touches an impassable line or its
    centre lies beyond one (off the road entirely).

    Element ``i`` of ``traj`` is aligned with scenario step ``start + i``
    (default: the current step); element 0 is the anchor and is skipped
    unless ``skip_anchor`` is false. Background vehicles replay their logs.
    """
    agent = agent or scenario.adversary
    start = scenario.current_index if start is None else start
    n_steps = len(scenario.ego.states)
    idx = np.arange(1 if skip_anchor else 0, len(traj))
    idx = idx[start + idx < n_steps]
    boxes = traj.boxes(agent.length, agent.width)[idx]
    edges = scenario.map.segments(impassable=True)
    crosses = bool(boxes_hit_polylines(boxes, edges).any()) or \
        bool(off_road(boxes[:, :2], scenario.map.segments(impassable=False), edges).any())
    hits = False
    for other in scenario.background:
        if other is agent:
            continue
        st = other.states[start + idx]
        ob = np.column_stack([st[:, :3], np.full(len(st), other.length), np.full(len(st), other.width)])
        if boxes_intersect(boxes, ob).any():
            hits = True
            break
    return crosses, hits


def feasibility(traj: Trajectory, scenario, agent=None, start: int | None = None,
                skip_anchor: bool = True) -> int:
    """1 if the trajectory stays on the road and clear of background vehicles."""
    crosses, hits = map_violations(traj, scenario, agent, start, skip_anchor)
    return 0 if (crosses or hits) else 1


# ---------------------------------------------------------------------------
# combined rewards


@dataclass(frozen=True)
class RewardBreakdown:
    adv: float
    p_kin: float
    p_beh: float
    feasible: int

    @property
    def p_real(self) -> float:
        return self.p_kin + self.p_beh

    def pref(self, weights: PreferenceWeights) -> float:
        return weights.w_adv * self.adv - weights.w_real * self.p_real

    def csv_row(self, weights: PreferenceWeights) -> dict:
        return {"adv": self.adv, "p_kin": self.p_kin, "p_beh": self.p_beh,
                "feasible": self.feasible, "pref": self.pref(weights)}


def breakdown(traj: Trajectory, ego: Trajectory, scenario, cfg: RewardConfig | None = None) -> RewardBreakdown:
    cfg = cfg or RewardConfig()
    adv = scenario.adversary
    sizes = ((adv.length, adv.width), (scenario.ego.length, scenario.ego.width))
    p_kin, p_beh = realism_penalty(traj, cfg)
    return RewardBreakdown(adv_reward(traj, ego, sizes, cfg), p_kin, p_beh, feasibility(traj, scenario))


def pref_reward(traj: Trajectory, ego: Trajectory, scenario, weights: PreferenceWeights,
                cfg: RewardConfig | None = None) -> float:
    return breakdown(traj, ego, scenario, cfg).pref(weights)


def user_reward(traj: Trajectory, ego: Trajectory, scenario, mu: float, cfg: RewardConfig | None = None) -> float:
    return pref_reward(traj, ego, scenario, PreferenceWeights.user(mu), cfg)


def total_reward(traj: Trajectory, ego: Trajectory, scenario, weights: PreferenceWeights,
                 w_map: float = 1.0, cfg: RewardConfig | None = None) -> float:
    """Single scalarised score with map compliance as a soft penalty (diagnostic only)."""
    b = breakdown(traj, ego, scenario, cfg)
    return b.pref(weights) - w_map * (1 - b.feasible)
