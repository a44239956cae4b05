"""Goal-conditioned categorical trajectory policy.

A small tanh MLP scores a fixed fan of goal points in the adversary's body
frame. Each goal is decoded into one deterministic trajectory, so the policy
is an exact categorical distribution over ``M`` candidate trajectories and
log-probabilities (and their gradients) are available in closed form.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose2, Trajectory, from_frame, point_segment_distance, to_frame
from .optim import Adam
from .rewards import RewardConfig, adv_reward_value, first_collision_step, map_violations, realism_penalty
from .scenario import FeatureConfig, Scenario, context_features

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GoalGridConfig:
    speed_scales: tuple = (0.3, 1.0, 1.7, 2.4)
    bearings: tuple = (-0.07, -0.02, 0.02, 0.07)
    offsets: tuple = (-1.5, 1.5)
    ramp_time: float = 0.3
    min_ref_speed: float = 3.0

    @property
    def size(self) -> int:
        return len(self.speed_scales) * len(self.bearings) * len(self.offsets)


@dataclass(frozen=True)
class PolicyConfig:
    grid: GoalGridConfig = field(default_factory=GoalGridConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    hidden: tuple = (32, 32)
    goal_feature_dim: int = 8

    @property
    def input_dim(self) -> int:
        return self.features.dim + self.goal_feature_dim


# ---------------------------------------------------------------------------
# goals and decoding


def goal_grid(s: Scenario, cfg: GoalGridConfig | None = None) -> np.ndarray:
    """``(M, 2)`` goals in the adversary body frame, speed-major order."""
    cfg = cfg or GoalGridConfig()
    v0 = float(s.adversary.states[s.current_index, 3])
    base = max(v0, cfg.min_ref_speed) * s.future_steps * s.dt
    goals = []
    for scale in cfg.speed_scales:
        d = scale * base
        for b in cfg.bearings:
            c, sn = np.cos(b), np.sin(b)
            for o in cfg.offsets:
                goals.append((c * d - sn * o, sn * d + c * o))
    return np.array(goals)


def _hermite(p0, p1, m0, m1, u):
    u = u[:, None]
    h00 = 2 * u**3 - 3 * u**2 + 1
    h10 = u**3 - 2 * u**2 + u
    h01 = -2 * u**3 + 3 * u**2
    h11 = u**3 - u**2
    return h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1


def _hermite_tangent(p0, p1, m0, m1, u):
    u = u[:, None]
    d00 = 6 * u**2 - 6 * u
    d10 = 3 * u**2 - 4 * u + 1
    d01 = -6 * u**2 + 6 * u
    d11 = 3 * u**2 - 2 * u
    return d00 * p0 + d10 * m0 + d01 * p1 + d11 * m1


def _distance_profile(arc: float, v0: float, horizon: float, ramp: float, t: np.ndarray):
    """Travelled distance and speed at times ``t`` ending exactly at ``arc``."""
    ramp = min(ramp, horizon)
    v_c = (arc - v0 * ramp / 2.0) / (horizon - ramp / 2.0)
    if v_c >= 0.0:
        acc = (v_c - v0) / ramp if ramp > 0 else 0.0
        in_ramp = t <= ramp
        dist = np.where(in_ramp, v0 * t + 0.5 * acc * t**2,
                        v0 * ramp + 0.5 * acc * ramp**2 + v_c * (t - ramp))
        speed = np.where(in_ramp, v0 + acc * t, v_c)
        return dist, speed
    # cannot keep moving: brake uniformly and stop exactly at the goal
    if arc <= 0.0 or v0 <= 0.0:
        return np.zeros_like(t), np.zeros_like(t)
    dec = v0 * v0 / (2.0 * arc)
    t_stop = 2.0 * arc / v0
    moving = t < t_stop
    dist = np.where(moving, v0 * t - 0.5 * dec * t**2, arc)
    speed = np.where(moving, v0 - dec * t, 0.0)
    return dist, speed


def decode_trajectory(s: Scenario, goal, cfg: GoalGridConfig | None = None, samples: int = 512) -> Trajectory:
    """Cubic-Hermite path from the adversary's current pose to ``goal``.

    ``goal`` is in the adversary body frame. The start tangent follows the
    current heading, the end tangent the goal bearing; both have the chord's
    length. The returned trajectory has ``future_steps + 1`` states with the
    current state first.
    """
    cfg = cfg or GoalGridConfig()
    x0, y0, h0, v0 = (float(v) for v in s.adversary.states[s.current_index])
    p0 = np.array([x0, y0])
    g = from_frame(np.asarray(goal, dtype=float), Pose2(x0, y0, h0))
    n = s.future_steps
    t = np.arange(1, n + 1) * s.dt
    chord = g - p0
    length = float(np.hypot(*chord))
    if length < 1e-9:
        xy = np.vstack([p0, np.repeat(p0[None], n, axis=0)])
        return Trajectory(xy, np.full(n + 1, h0), np.concatenate([[v0], np.zeros(n)]), s.dt)
    m0 = length * np.array([np.cos(h0), np.sin(h0)])
    m1 = chord
    u = np.linspace(0.0, 1.0, samples)
    pts = _hermite(p0, g, m0, m1, u)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    dist, speed = _distance_profile(cum[-1], v0, n * s.dt, cfg.ramp_time, t)
    uq = np.interp(dist, cum, u)
    xy = _hermite(p0, g, m0, m1, uq)
    tan = _hermite_tangent(p0, g, m0, m1, uq)
    heading = np.unwrap(np.concatenate([[h0], np.arctan2(tan[:, 1], tan[:, 0])]))
    return Trajectory(np.vstack([p0, xy]), heading, np.concatenate([[v0], speed]), s.dt)


# ---------------------------------------------------------------------------
# per-goal features and prepared scenarios


def _signed_road_clearance(s: Scenario, xy: np.ndarray) -> np.ndarray:
    """Distance to the nearest impassable line, negative when off the road."""
    edges = s.map.segments(impassable=True)
    centers = s.map.segments(kind="centerline")
    d_edge = point_segment_distance(xy, edges).min(axis=1)
    on_road = point_segment_distance(xy, centers).min(axis=1) <= s.map.lane_width / 2.0
    return np.where(on_road, d_edge, -d_edge)


def goal_features(s: Scenario, goals: np.ndarray, trajs: list[Trajectory], cfg: GoalGridConfig) -> np.ndarray:
    t0 = s.current_index
    adv, ego = s.adversary, s.ego
    frame = adv.pose(t0)
    w = s.map.lane_width
    base = max(float(adv.states[t0, 3]), cfg.min_ref_speed) * s.future_steps * s.dt
    n_scales = len(cfg.speed_scales)
    per_scale = len(goals) // n_scales
    scale = np.repeat(np.asarray(cfg.speed_scales, dtype=float), per_scale)

    ends = np.array([tr.xy[-1] for tr in trajs])
    centers = s.map.segments(kind="centerline")
    lane_off = point_segment_distance(ends, centers).min(axis=1) / w
    end_clear = _signed_road_clearance(s, ends) / w

    # ego forecast at constant velocity from its last two logged states
    e0, e1 = ego.states[t0 - 1, :2], ego.states[t0, :2]
    vel = (e1 - e0) / s.dt
    times = np.arange(0, s.future_steps + 1) * s.dt
    ego_fc = e1[None] + times[:, None] * vel[None]
    path_xy = np.stack([tr.xy for tr in trajs])
    dist = np.linalg.norm(path_xy - ego_fc[None], axis=-1)
    min_d = dist.min(axis=1)
    t_min = dist.argmin(axis=1) / s.future_steps

    clear = np.array([_signed_road_clearance(s, tr.xy[1::8]).min() for tr in trajs])
    clear = clear - 0.5 * adv.width
    local = goals / np.array([base, 10.0])
    return np.column_stack([
        local[:, 0], local[:, 1], scale, lane_off, end_clear,
        np.minimum(clear / w, 2.0), np.minimum(min_d / 20.0, 3.0), t_min,
    ])


@dataclass(eq=False)
class PreparedScenario:
    """Everything about a scenario that does not depend on the parameters."""

    scenario: Scenario
    goals: np.ndarray
    trajectories: list
    inputs: np.ndarray
    p_kin: np.ndarray
    p_beh: np.ndarray
    feasible: np.ndarray
    crosses: np.ndarray
    hits_object: np.ndarray
    reward_cfg: RewardConfig

    @property
    def p_real(self) -> np.ndarray:
        return self.p_kin + self.p_beh

    def adversarial(self, ego: Trajectory | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Per-goal ``(adv_reward, first_collision_step or 0)`` against ``ego``.

        Defaults to the logged ego future; that result is cached.
        """
        logged = ego is None
        if logged and "_logged" in self.__dict__:
            return self.__dict__["_logged"]
        s = self.scenario
        ego = ego if ego is not None else s.logged_future(s.ego)
        a, e = s.adversary, s.ego
        sizes = ((a.length, a.width), (e.length, e.width))
        out = np.empty(len(self.trajectories))
        tc = np.zeros(len(self.trajectories), dtype=int)
        for i, tr in enumerate(self.trajectories):
            t_coll = first_collision_step(tr, ego, *sizes)
            d_min = float(np.min(np.linalg.norm(tr.xy[1:] - ego.xy[1:], axis=1)))
            out[i] = adv_reward_value(t_coll, len(tr) - 1, d_min, self.reward_cfg)
            tc[i] = t_coll or 0
        if logged:
            self.__dict__["_logged"] = (out, tc)
        return out, tc


_PREPARED: dict = {}


def prepare(s: Scenario, cfg: PolicyConfig | None = None, reward_cfg: RewardConfig | None = None) -> PreparedScenario:
    cfg = cfg or PolicyConfig()
    reward_cfg = reward_cfg or RewardConfig()
    key = (id(s), cfg, reward_cfg)
    hit = _PREPARED.get(key)
    if hit is not None and hit.scenario is s:
        return hit
    goals = goal_grid(s, cfg.grid)
    trajs = [decode_trajectory(s, g, cfg.grid) for g in goals]
    ctx = context_features(s, cfg.features)
    gf = goal_features(s, goals, trajs, cfg.grid)
    inputs = np.hstack([np.repeat(ctx[None], len(goals), axis=0), gf])
    pens = np.array([realism_penalty(tr, reward_cfg) for tr in trajs])
    viol = np.array([map_violations(tr, s) for tr in trajs], dtype=bool)
    prep = PreparedScenario(s, goals, trajs, inputs, pens[:, 0], pens[:, 1],
                            (~viol.any(axis=1)).astype(int), viol[:, 0], viol[:, 1], reward_cfg)
    _PREPARED[key] = prep
    return prep


def clear_prepared_cache() -> None:
    _PREPARED.clear()


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Flat parameter vector plus the layer sizes it unpacks into."""

    theta: np.ndarray
    sizes: tuple
    config: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        if th.ndim != 1 or len(th) != n_params(self.sizes):
            raise ValueError(f"expected {n_params(self.sizes)} parameters, got {th.shape}")
        if not np.all(np.isfinite(th)):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "theta", th)

    @property
    def dim(self) -> int:
        return len(self.theta)

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return self.sizes == other.sizes and np.array_equal(self.theta, other.theta)

    def with_theta(self, theta) -> "PolicyParams":
        return PolicyParams(np.array(theta, dtype=float), self.sizes, self.config)


def n_params(sizes) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def _unpack(theta, sizes):
    out, i = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = theta[i:i + a * b].reshape(a, b)
        i += a * b
        out.append((w, theta[i:i + b]))
        i += b
    return out


def init_params(rng: np.random.Generator, cfg: PolicyConfig | None = None) -> PolicyParams:
    cfg = cfg or PolicyConfig()
    sizes = (cfg.input_dim, *cfg.hidden, 1)
    parts = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = 1.0 / np.sqrt(a) * (0.1 if k == len(sizes) - 2 else 1.0)
        parts += [rng.normal(0.0, scale, size=a * b), np.zeros(b)]
    return PolicyParams(np.concatenate(parts), sizes, cfg)


def params_get(p: PolicyParams) -> np.ndarray:
    return p.theta.copy()


def params_set(p: PolicyParams, vec) -> PolicyParams:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != p.theta.shape:
        raise ValueError(f"expected vector of length {p.dim}, got {vec.shape}")
    return p.with_theta(vec.copy())


def forward(p: PolicyParams, inputs: np.ndarray):
    """Logits for ``inputs`` of shape ``(..., input_dim)`` and a backprop cache."""
    if inputs.shape[-1] != p.sizes[0]:
        raise ValueError(f"feature dimension {inputs.shape[-1]} != {p.sizes[0]}")
    layers = _unpack(p.theta, p.sizes)
    acts = [inputs]
    h = inputs
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        acts.append(h)
    w, b = layers[-1]
    return (h @ w + b)[..., 0], acts


def backward(p: PolicyParams, acts, g_logits: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(g_logits * logits)`` with respect to the flat parameters."""
    layers = _unpack(p.theta, p.sizes)
    grads = []
    delta = g_logits[..., None]
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        a = acts[k]
        grads.append((a.reshape(-1, a.shape[-1]).T @ delta.reshape(-1, delta.shape[-1]),
                      delta.reshape(-1, delta.shape[-1]).sum(axis=0)))
        if k:
            delta = (delta @ w.T) * (1.0 - a * a)
    flat = []
    for gw, gb in reversed(grads):
        flat += [gw.ravel(), gb]
    return np.concatenate(flat)


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    return z - (m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True)))


def score_goals(theta: PolicyParams, s: Scenario) -> np.ndarray:
    prep = prepare(s, theta.config)
    return forward(theta, prep.inputs)[0]


@dataclass(frozen=True, eq=False)
class CandidateSet:
    trajectories: list
    logits: np.ndarray
    log_probs: np.ndarray


def candidates(theta: PolicyParams, s: Scenario) -> CandidateSet:
    prep = prepare(s, theta.config)
    z = forward(theta, prep.inputs)[0]
    return CandidateSet(prep.trajectories, z, log_softmax(z))


def sample_indices(log_probs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    p = np.exp(log_probs - np.max(log_probs))
    p /= p.sum()
    return rng.choice(len(p), size=n, p=p)


def sample(theta: PolicyParams, s: Scenario, n: int, rng: np.random.Generator) -> list[Trajectory]:
    cs = candidates(theta, s)
    return [cs.trajectories[i] for i in sample_indices(cs.log_probs, n, rng)]


def log_prob(theta: PolicyParams, s: Scenario, goal_index: int) -> float:
    z = score_goals(theta, s)
    if not 0 <= goal_index < len(z):
        raise IndexError(f"goal index {goal_index} out of range")
    return float(log_softmax(z)[goal_index])


def log_prob_gradient(theta: PolicyParams, s: Scenario, goal_index: int) -> np.ndarray:
    prep = prepare(s, theta.config)
    z, acts = forward(theta, prep.inputs)
    if not 0 <= goal_index < len(z):
        raise IndexError(f"goal index {goal_index} out of range")
    g = -np.exp(log_softmax(z))
    g[goal_index] += 1.0
    return backward(theta, acts, g)


# ---------------------------------------------------------------------------
# imitation pretraining


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 600
    learning_rate: float = 1e-3
    weight_decay: float = 0.0


def imitation_targets(corpus: list[Scenario], cfg: PolicyConfig) -> np.ndarray:
    """Index of the goal nearest to each logged adversary endpoint."""
    out = []
    for s in corpus:
        adv = s.adversary
        end = to_frame(adv.states[-1, :2], adv.pose(s.current_index))
        goals = goal_grid(s, cfg.grid)
        out.append(int(np.argmin(np.linalg.norm(goals - end, axis=1))))
    return np.array(out)


def pretrain_imitation(corpus: list[Scenario], config: PretrainConfig | None = None,
                       rng: np.random.Generator | None = None, policy_cfg: PolicyConfig | None = None,
                       history: list | None = None) -> PolicyParams:
    """Maximum-likelihood fit of the nearest-goal labels (full batch, Adam)."""
    if not corpus:
        raise ValueError("empty corpus")
    config = config or PretrainConfig()
    policy_cfg = policy_cfg or PolicyConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    params = init_params(rng, policy_cfg)
    X = np.stack([prepare(s, policy_cfg).inputs for s in corpus])
    y = imitation_targets(corpus, policy_cfg)
    onehot = np.eye(X.shape[1])[y]
    opt = Adam(params.dim, config.learning_rate, weight_decay=config.weight_decay)
    theta = params.theta.copy()
    for _ in range(config.steps):
        p = params.with_theta(theta)
        z, acts = forward(p, X)
        lp = log_softmax(z)
        loss = -np.mean(np.sum(onehot * lp, axis=1))
        if history is not None:
            history.append(float(loss))
        g = -(onehot - np.exp(lp)) / len(corpus)
        theta = opt.step(theta, backward(p, acts, g))
    return params.with_theta(theta)


def imitation_accuracy(theta: PolicyParams, corpus: list[Scenario]) -> tuple[float, float]:
    """``(top-1 accuracy, mean target log-likelihood)`` on ``corpus``."""
    y = imitation_targets(corpus, theta.config)
    X = np.stack([prepare(s, theta.config).inputs for s in corpus])
    lp = log_softmax(forward(theta, X)[0])
    return float(np.mean(lp.argmax(axis=1) == y)), float(np.mean(lp[np.arange(len(y)), y]))


# ---------------------------------------------------------------------------
# checkpoints


def _config_to_dict(cfg: PolicyConfig) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d))


def save_checkpoint(p: PolicyParams, path) -> None:
    doc = {
        "schema_version": CHECKPOINT_VERSION,
        "sizes": list(p.sizes),
        "config": _config_to_dict(p.config),
        "theta": p.theta.tolist(),
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def _config_from_dict(d: dict) -> PolicyConfig:
    grid = GoalGridConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["grid"].items()})
    feats = FeatureConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["features"].items()})
    return PolicyConfig(grid, feats, tuple(d["hidden"]), d["goal_feature_dim"])


def load_checkpoint(path, expect: PolicyConfig | None = None) -> PolicyParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint schema {doc.get('schema_version')!r}")
    cfg = _config_from_dict(doc["config"])
    if expect is not None and cfg != expect:
        raise ValueError(f"{path}: checkpoint metadata does not match the requested configuration")
    sizes = tuple(doc["sizes"])
    if sizes != (cfg.input_dim, *cfg.hidden, 1):
        raise ValueError(f"{path}: layer sizes {sizes} inconsistent with configuration")
    return PolicyParams(np.array(doc["theta"], dtype=float), sizes, cfg)
