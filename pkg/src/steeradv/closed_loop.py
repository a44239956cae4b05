"""Closed-loop ego training against a curriculum of steered adversaries.

The ego follows its logged route and only controls speed. Reactive egos
forecast the other agents with a constant turn rate and velocity model;
a forecast overlap ahead makes them brake, one from behind makes them
accelerate. A cross-entropy search tunes the reactive controller's
parameters.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import Trajectory, boxes_intersect, wrap_angle
from .metrics import parallel_map
from .policy import PolicyParams
from .scenario import Scenario
from .steering import Experts, MixSpec, generate_steered

# ---------------------------------------------------------------------------
# curriculum


@dataclass(frozen=True)
class CurriculumSchedule:
    T_total: int
    lambda_start: float = 0.5
    lambda_end: float = 1.0
    p_start: float = 0.1
    p_end: float = 0.9
    T_ramp: float | None = None  # defaults to T_total / 2

    def __post_init__(self):
        for name in ("lambda_start", "lambda_end", "p_start", "p_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.T_total < 0:
            raise ValueError("T_total must be >= 0")
        if self.T_ramp is not None and not 0 <= self.T_ramp <= self.T_total:
            raise ValueError("T_ramp must lie in [0, T_total]")

    @property
    def ramp(self) -> float:
        return self.T_total / 2.0 if self.T_ramp is None else float(self.T_ramp)


def _ramp(t: float, start: float, end: float, ramp: float) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    frac = 1.0 if ramp <= 0 else min(t / ramp, 1.0)
    value = start + (end - start) * frac
    return float(min(max(value, min(start, end)), max(start, end)))


def schedule_lambda(t: float, sched: CurriculumSchedule) -> float:
    return _ramp(t, sched.lambda_start, sched.lambda_end, sched.ramp)


def schedule_padv(t: float, sched: CurriculumSchedule) -> float:
    return _ramp(t, sched.p_start, sched.p_end, sched.ramp)


# ---------------------------------------------------------------------------
# ego policies

PARAM_NAMES = ("speed_gain", "horizon", "brake", "margin", "accel_limit")
PARAM_LOW = np.array([0.1, 0.0, 0.5, 0.0, 0.5])
PARAM_HIGH = np.array([3.0, 4.0, 9.0, 3.0, 4.0])
DEFAULT_REACTIVE = (1.0, 2.0, 6.0, 0.5, 2.0)
EGO_KINDS = ("replay", "idm", "reactive_pd", "parametric")


@dataclass(frozen=True, eq=False)
class EgoPolicy:
    """Speed controller along the logged ego route.

    ``params`` (parametric kind only) are ``PARAM_NAMES`` in order; the
    reactive kind uses ``DEFAULT_REACTIVE``.
    """

    kind: str = "replay"
    params: tuple | None = None
    idm_headway: float = 1.5
    idm_min_gap: float = 2.0

    def __post_init__(self):
        if self.kind not in EGO_KINDS:
            raise ValueError(f"unknown ego kind {self.kind!r}")
        if self.kind == "parametric":
            if self.params is None or len(self.params) != len(PARAM_NAMES):
                raise ValueError(f"parametric ego needs {len(PARAM_NAMES)} parameters")
            if not all(math.isfinite(p) for p in self.params):
                raise ValueError("ego parameters must be finite")

    @property
    def gains(self) -> np.ndarray:
        return np.array(self.params if self.kind == "parametric" else DEFAULT_REACTIVE, dtype=float)

    def __eq__(self, other):
        if not isinstance(other, EgoPolicy):
            return NotImplemented
        return (self.kind, self.params, self.idm_headway, self.idm_min_gap) == \
            (other.kind, other.params, other.idm_headway, other.idm_min_gap)

    def __hash__(self):
        return hash((self.kind, self.params))

    # protocol used by the open-loop evaluator
    def rollout(self, s: Scenario) -> Trajectory:
        return run_episode(s, self).ego_traj

    def respond(self, s: Scenario, adv: Trajectory):
        res = run_episode(s, self, adv)
        return res.ego_traj, res.collision_step


def parametric(params) -> EgoPolicy:
    p = np.clip(np.asarray(params, dtype=float), PARAM_LOW, PARAM_HIGH)
    return EgoPolicy("parametric", tuple(float(v) for v in p))


@dataclass(frozen=True, eq=False)
class EpisodeResult:
    """Outcome of one simulated episode.

    ``collision_step`` is the first ego-adversary overlap; ``events`` lists
    every crash as ``(step, "adversary" | "object")``.
    """

    collided: bool
    collision_step: int | None
    completion: float
    ego_traj: Trajectory
    crashed_object: bool
    events: tuple = ()

    @property
    def cost(self) -> float:
        return float(len(self.events))


def _arc_lengths(xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative length over the non-degenerate segments, and their mask."""
    seg = np.hypot(*np.diff(xy, axis=0).T)
    keep = seg > 1e-9
    return np.concatenate([[0.0], np.cumsum(seg[keep])]), keep


class _Route:
    """Arc-length parameterisation of the logged ego path, extended straight ahead."""

    def __init__(self, xy: np.ndarray, heading_end: float):
        self.cum, keep = _arc_lengths(xy)
        self.xy = xy[np.concatenate([[True], keep])]
        self.length = float(self.cum[-1])
        self.end_heading = heading_end
        self.end_dir = np.array([math.cos(heading_end), math.sin(heading_end)])

    def at(self, s) -> tuple[np.ndarray, np.ndarray]:
        """Positions ``(n, 2)`` and headings ``(n,)`` at arc lengths ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if len(self.cum) < 2:
            return np.repeat(self.xy[:1], len(s), axis=0) + np.outer(s, self.end_dir), \
                np.full(len(s), self.end_heading)
        i = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.cum) - 2)
        d = self.xy[i + 1] - self.xy[i]
        f = (s - self.cum[i]) / (self.cum[i + 1] - self.cum[i])
        p = self.xy[i] + f[:, None] * d
        h = np.arctan2(d[:, 1], d[:, 0])
        beyond = s >= self.length
        if beyond.any():
            p[beyond] = self.xy[-1] + np.outer(s[beyond] - self.length, self.end_dir)
            h[beyond] = self.end_heading
        return p, h


def _ctrv(state_prev: np.ndarray, state_now: np.ndarray, dt: float, steps: int) -> np.ndarray:
    """``(steps, 3)`` forecast poses from two observed ``[x, y, heading]`` states."""
    v = float(np.hypot(*(state_now[:2] - state_prev[:2]))) / dt
    w = float(wrap_angle(state_now[2] - state_prev[2])) / dt
    k = np.arange(1, steps + 1) * dt
    h = state_now[2] + w * k
    if abs(w) < 1e-6:
        x = state_now[0] + v * k * math.cos(state_now[2])
        y = state_now[1] + v * k * math.sin(state_now[2])
    else:
        x = state_now[0] + v / w * (np.sin(h) - math.sin(state_now[2]))
        y = state_now[1] - v / w * (np.cos(h) - math.cos(state_now[2]))
    return np.column_stack([x, y, h])


def _idm(v, gap, dv, v_des, headway, s0, a_max=1.5, b=2.0):
    s_star = s0 + max(0.0, v * headway + v * dv / (2.0 * math.sqrt(a_max * b)))
    free = 1.0 - (v / max(v_des, 0.1)) ** 4
    inter = (s_star / max(gap, 0.1)) ** 2 if math.isfinite(gap) else 0.0
    return a_max * (free - inter)


@dataclass(frozen=True)
class _Agent:
    xy: np.ndarray
    heading: np.ndarray
    length: float
    width: float
    prev: np.ndarray  # [x, y, heading] one step before the anchor
    is_adversary: bool

    def observed(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        now = np.array([self.xy[t, 0], self.xy[t, 1], self.heading[t]])
        before = self.prev if t == 0 else np.array([self.xy[t - 1, 0], self.xy[t - 1, 1], self.heading[t - 1]])
        return before, now


def run_episode(s: Scenario, ego: EgoPolicy, adversary: Trajectory | None = None) -> EpisodeResult:
    """Simulate the ego against a fixed adversary trajectory (logged when ``None``).

    Background agents replay their logs. The first crash of any kind ends
    the episode; the ego then holds its pose so the returned trajectory
    always has ``future_steps + 1`` states.
    """
    t0, n, dt = s.current_index, s.future_steps, s.dt
    adv = adversary if adversary is not None else s.logged_future(s.adversary)
    if len(adv) != n + 1:
        raise ValueError("adversary trajectory length does not match the scenario horizon")
    log = s.ego.states[t0:]
    e_size = (s.ego.length, s.ego.width)
    others = [_Agent(adv.xy, adv.heading, s.adversary.length, s.adversary.width,
                     s.adversary.states[t0 - 1, :3], True)]
    others += [_Agent(b.states[t0:, :2], b.states[t0:, 2], b.length, b.width, b.states[t0 - 1, :3], False)
               for b in s.background]

    route = _Route(log[:, :2], float(log[-1, 2]))
    if ego.kind == "replay":
        xy, heading, speed = log[:, :2].copy(), log[:, 2].copy(), log[:, 3].copy()
    else:
        xy, heading, speed = np.zeros((n + 1, 2)), np.zeros(n + 1), np.zeros(n + 1)
        xy[0], heading[0], speed[0] = log[0, :2], log[0, 2], log[0, 3]
    k_v, horizon, brake, margin, a_lim = ego.gains
    h_steps = int(round(horizon / dt))
    pos, v = 0.0, float(log[0, 3])
    events = []
    for t in range(n):
        if ego.kind != "replay":
            if ego.kind == "idm":
                acc = _lead_idm(route, pos, v, float(log[0, 3]), others, t, e_size, ego, dt)
            else:
                acc = k_v * (float(log[t + 1, 3]) - v)
                threat = _threat(route, pos, v, others, t, e_size, h_steps, margin, dt) if h_steps > 0 else 0
                # slow down for threats ahead, speed away from threats behind
                if threat > 0:
                    acc = -brake
                elif threat < 0:
                    acc = a_lim
                acc = float(np.clip(acc, -brake, a_lim))
            v = max(0.0, v + acc * dt)
            pos += v * dt
            p, hd = route.at(pos)
            xy[t + 1], heading[t + 1], speed[t + 1] = p[0], hd[0], v
        box = np.array([[*xy[t + 1], heading[t + 1], *e_size]])
        obs = np.array([[*o.xy[t + 1], o.heading[t + 1], o.length, o.width] for o in others])
        hit = boxes_intersect(np.repeat(box, len(obs), axis=0), obs)
        events += [(t + 1, "adversary" if o.is_adversary else "object") for o, h in zip(others, hit) if h]
        if events:
            xy[t + 2:], heading[t + 2:], speed[t + 1:] = xy[t + 1], heading[t + 1], 0.0
            break
    travelled = float(_arc_lengths(xy)[0][-1])  # same summation as the route, so a replay scores exactly 1
    completion = 1.0 if route.length <= 0 else min(travelled / route.length, 1.0)
    adv_steps = [k for k, kind in events if kind == "adversary"]
    return EpisodeResult(bool(events), adv_steps[0] if adv_steps else None, completion,
                         Trajectory(xy, np.unwrap(heading), speed, dt),
                         any(kind == "object" for _, kind in events), tuple(events))


def _threat(route, pos, v, others, t, e_size, steps, margin, dt) -> int:
    """+1 for a forecast overlap ahead of the ego, -1 for one behind, 0 for none.

    The side is taken from the earliest overlapping forecast step across
    all agents.
    """
    p, h = route.at(pos + v * dt * np.arange(1, steps + 1))
    eb = np.column_stack([p, h, np.full(steps, e_size[0] + 2 * margin), np.full(steps, e_size[1] + 2 * margin)])
    first, side = steps, 0
    for other in others:
        fc = _ctrv(*other.observed(t), dt, steps)
        ob = np.column_stack([fc, np.full(steps, other.length), np.full(steps, other.width)])
        hit = np.flatnonzero(boxes_intersect(eb, ob))
        if len(hit) and hit[0] < first:
            k = hit[0]
            first = k
            ahead = (fc[k, 0] - p[k, 0]) * math.cos(h[k]) + (fc[k, 1] - p[k, 1]) * math.sin(h[k])
            side = 1 if ahead >= 0 else -1
    return side


def _lead_idm(route, pos, v, v_des, others, t, e_size, ego: EgoPolicy, dt: float) -> float:
    p, hd = route.at(pos)
    p, hd = p[0], float(hd[0])
    fwd = np.array([math.cos(hd), math.sin(hd)])
    left = np.array([-fwd[1], fwd[0]])
    gap, dv = math.inf, 0.0
    for other in others:
        before, now = other.observed(t)
        rel = now[:2] - p
        ahead = float(rel @ fwd)
        if ahead <= 0 or abs(float(rel @ left)) > 0.5 * (e_size[1] + other.width) + 0.5:
            continue
        g = ahead - 0.5 * (e_size[0] + other.length)
        if g < gap:
            gap, dv = g, v - float(np.hypot(*(now[:2] - before[:2]))) / dt
    return float(np.clip(_idm(v, gap, dv, v_des, ego.idm_headway, ego.idm_min_gap), -8.0, 1.5))


def save_ego(path, ego: EgoPolicy) -> None:
    with open(path, "w") as fh:
        json.dump({"schema_version": 1, "kind": ego.kind, "param_names": list(PARAM_NAMES),
                   "params": list(ego.params) if ego.params is not None else None}, fh, indent=2)


def load_ego(path) -> EgoPolicy:
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("schema_version") != 1:
        raise ValueError(f"unsupported ego checkpoint version {blob.get('schema_version')!r}")
    if blob["kind"] == "parametric" and blob.get("param_names") != list(PARAM_NAMES):
        raise ValueError("ego checkpoint parameter names do not match this build")
    params = tuple(blob["params"]) if blob["params"] is not None else None
    return EgoPolicy(blob["kind"], params)


# ---------------------------------------------------------------------------
# ego improvement


AdversarySource = Callable[[Scenario, Trajectory], "Trajectory | None"]


@dataclass(frozen=True)
class CemConfig:
    population: int = 8
    elite_fraction: float = 0.25
    init_std: float = 0.15
    min_std: float = 0.02
    collision_penalty: float = 1.0


def episode_score(results: Sequence[EpisodeResult], penalty: float) -> float:
    return float(np.mean([r.completion - penalty * r.cost for r in results]))


def improve_ego(theta_ego, corpus: Sequence[Scenario], generator: AdversarySource, budget: int,
                rng: np.random.Generator, cfg: CemConfig | None = None, workers: int | None = 1) -> EgoPolicy:
    """Cross-entropy search over the reactive controller's parameters.

    The adversaries are generated once against the incumbent's benign
    rollout and held fixed. Every generation contains the current mean, and
    a candidate replaces the incumbent only if it scores strictly higher on
    this batch.
    """
    cfg = cfg or CemConfig()
    incumbent = theta_ego if isinstance(theta_ego, EgoPolicy) else parametric(theta_ego)
    if incumbent.kind != "parametric":
        raise ValueError("improve_ego needs a parametric ego")
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if budget == 0 or cfg.population <= 1 or not corpus:
        return incumbent
    advs = [generator(s, incumbent.rollout(s)) for s in corpus]

    def score(policy: EgoPolicy) -> float:
        res = parallel_map(lambda pair: run_episode(pair[0], policy, pair[1]), list(zip(corpus, advs)), workers)
        return episode_score(res, cfg.collision_penalty)

    span = PARAM_HIGH - PARAM_LOW
    mean = (np.array(incumbent.params) - PARAM_LOW) / span
    std = np.full_like(mean, cfg.init_std)
    best, best_score = incumbent, score(incumbent)
    n_elite = max(1, int(round(cfg.population * cfg.elite_fraction)))
    for _ in range(budget):
        draws = mean + std * rng.standard_normal((cfg.population - 1, len(mean)))
        pop = np.vstack([mean, np.clip(draws, 0.0, 1.0)])
        policies = [parametric(PARAM_LOW + u * span) for u in pop]
        scores = np.array([score(p) for p in policies])
        order = np.argsort(-scores, kind="stable")
        if scores[order[0]] > best_score:
            best, best_score = policies[order[0]], float(scores[order[0]])
        elite = pop[order[:n_elite]]
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), cfg.min_std)
    return best


# ---------------------------------------------------------------------------
# closed loop


@dataclass(frozen=True)
class ClosedLoopConfig:
    batch_size: int = 16
    holdout: int = 16
    cem: CemConfig = field(default_factory=CemConfig)
    cem_budget: int = 2
    K_candidates: int = 8
    mu_start: float = 0.5
    mu_end: float = 1.0
    workers: int = 1


@dataclass(frozen=True)
class LoopMetrics:
    adv_collision_rate: float
    adv_completion: float
    benign_collision_rate: float
    benign_completion: float


@dataclass(frozen=True)
class TrainState:
    iteration: int
    lam: float
    p_adv: float
    mu: float
    n_adversarial: int
    ego_params: tuple
    metrics: LoopMetrics


@dataclass(frozen=True, eq=False)
class ClosedLoopResult:
    initial: LoopMetrics
    history: tuple
    final_ego: EgoPolicy
    generator_calls: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "lambda", "p_adv", "mu", "n_adversarial", "adv_collision_rate",
                    "adv_completion", "benign_collision_rate", "benign_completion", *PARAM_NAMES])
        m = self.initial
        w.writerow(["initial", "", "", "", "", repr(m.adv_collision_rate), repr(m.adv_completion),
                    repr(m.benign_collision_rate), repr(m.benign_completion), *[""] * len(PARAM_NAMES)])
        for h in self.history:
            m = h.metrics
            w.writerow([h.iteration, repr(h.lam), repr(h.p_adv), repr(h.mu), h.n_adversarial,
                        repr(m.adv_collision_rate), repr(m.adv_completion), repr(m.benign_collision_rate),
                        repr(m.benign_completion), *[repr(p) for p in h.ego_params]])
        return buf.getvalue()


def evaluate_ego(ego: EgoPolicy, scenarios: Sequence[Scenario], experts: Experts, theta_ref: PolicyParams,
                 K: int = 8, workers: int | None = 1) -> LoopMetrics:
    """Held-out metrics: fully adversarial (lambda = mu = 1) and benign episodes."""
    spec = MixSpec("weight_interp", 1.0)

    def one(s):
        adv = generate_steered(spec, experts, theta_ref, s, ego.rollout(s), 1.0, K)
        return run_episode(s, ego, adv), run_episode(s, ego)

    res = parallel_map(one, list(scenarios), workers)
    adv, ben = [r[0] for r in res], [r[1] for r in res]
    return LoopMetrics(
        adv_collision_rate=sum(r.collided for r in adv) / len(adv),
        adv_completion=float(np.mean([r.completion for r in adv])),
        benign_collision_rate=sum(r.collided for r in ben) / len(ben),
        benign_completion=float(np.mean([r.completion for r in ben])),
    )


def run_closed_loop(theta_ref: PolicyParams, experts: Experts, ego0: EgoPolicy, corpus: Sequence[Scenario],
                    sched: CurriculumSchedule, cfg: ClosedLoopConfig | None = None,
                    rng: np.random.Generator | None = None, on_generate=None) -> ClosedLoopResult:
    """Alternate steered adversary generation and ego improvement.

    The last ``cfg.holdout`` scenarios are held out for evaluation; each
    iteration draws a training batch, turns each scenario adversarial with
    probability ``p_adv`` and improves the ego on the batch. ``on_generate``
    is called as ``on_generate(iteration, scenario, mix_spec, mu, adversary)``
    for every training-time generation.
    """
    cfg = cfg or ClosedLoopConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(corpus) <= cfg.holdout:
        raise ValueError("corpus too small for the requested hold-out split")
    train, held = list(corpus[:-cfg.holdout]), list(corpus[-cfg.holdout:])
    ego = ego0
    calls = 0
    initial = evaluate_ego(ego, held, experts, theta_ref, cfg.K_candidates, cfg.workers)
    history = []
    for t in range(sched.T_total):
        lam, p = schedule_lambda(t, sched), schedule_padv(t, sched)
        mu = _ramp(t, cfg.mu_start, cfg.mu_end, sched.ramp)
        idx = rng.choice(len(train), size=min(cfg.batch_size, len(train)), replace=False)
        batch = [train[i] for i in sorted(idx)]
        adversarial = {s.id: bool(rng.random() < p) for s in batch}
        spec = MixSpec("weight_interp", lam)

        def gen(s, ego_traj, spec=spec, mu=mu):
            nonlocal calls
            if not adversarial[s.id]:
                return None
            calls += 1
            adv = generate_steered(spec, experts, theta_ref, s, ego_traj, mu, cfg.K_candidates)
            if on_generate is not None:
                on_generate(t, s, spec, mu, adv)
            return adv

        if ego.kind == "parametric":
            ego = improve_ego(ego, batch, gen, cfg.cem_budget, rng, cfg.cem, cfg.workers)
        else:
            for s in batch:
                gen(s, ego.rollout(s))
        metrics = evaluate_ego(ego, held, experts, theta_ref, cfg.K_candidates, cfg.workers)
        history.append(TrainState(t, lam, p, mu, sum(adversarial.values()),
                                  tuple(ego.params or ()), metrics))
    return ClosedLoopResult(initial, tuple(history), ego, calls)
