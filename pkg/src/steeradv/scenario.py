"""Scenario data model, file I/O, synthetic corpus and context features."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Polyline, Pose2, Trajectory, to_frame, wrap_angle

SCHEMA_VERSION = 1
ROLES = ("ego", "adversary", "background")


class ScenarioFormatError(ValueError):
    """Raised when a scenario file cannot be parsed or violates the schema."""


@dataclass(frozen=True, eq=False)
class AgentRecord:
    """Logged states ``[x, y, heading, speed]`` for every scenario step."""

    id: int
    role: str
    length: float
    width: float
    states: np.ndarray

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not (self.length > 0 and self.width > 0):
            raise ValueError("agent size must be positive")
        st = np.asarray(self.states, dtype=float)
        if st.ndim != 2 or st.shape[1] != 4:
            raise ValueError("states must be (n, 4)")
        object.__setattr__(self, "states", st)

    def __eq__(self, other):
        if not isinstance(other, AgentRecord):
            return NotImplemented
        return (
            (self.id, self.role, self.length, self.width)
            == (other.id, other.role, other.length, other.width)
            and np.array_equal(self.states, other.states)
        )

    def pose(self, t: int) -> Pose2:
        x, y, h, _ = self.states[t]
        return Pose2(float(x), float(y), float(h))

    def trajectory(self, start: int, stop: int | None = None, dt: float = 0.1) -> Trajectory:
        st = self.states[start:stop]
        return Trajectory(st[:, :2], st[:, 2], st[:, 3], dt)


@dataclass(frozen=True, eq=False)
class MapModel:
    polylines: tuple
    lane_width: float

    def __eq__(self, other):
        if not isinstance(other, MapModel):
            return NotImplemented
        return self.lane_width == other.lane_width and list(self.polylines) == list(other.polylines)

    def segments(self, impassable: bool | None = None, kind: str | None = None) -> np.ndarray:
        parts = [
            p.segments
            for p in self.polylines
            if (impassable is None or p.impassable == impassable) and (kind is None or p.kind == kind)
        ]
        return np.vstack(parts) if parts else np.zeros((0, 4))


@dataclass(frozen=True, eq=False)
class Scenario:
    id: str
    map: MapModel
    agents: tuple
    dt: float = 0.1
    history_steps: int = 10
    future_steps: int = 80

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        roles = [a.role for a in self.agents]
        if roles.count("ego") != 1:
            raise ValueError("missing ego" if "ego" not in roles else "more than one ego")
        if roles.count("adversary") != 1:
            raise ValueError("missing adversary" if "adversary" not in roles else "more than one adversary")
        n = self.history_steps + self.future_steps + 1
        for a in self.agents:
            if len(a.states) != n:
                raise ValueError(f"agent {a.id} has {len(a.states)} states, expected {n}")

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            (self.id, self.dt, self.history_steps, self.future_steps)
            == (other.id, other.dt, other.history_steps, other.future_steps)
            and self.map == other.map
            and list(self.agents) == list(other.agents)
        )

    @property
    def current_index(self) -> int:
        return self.history_steps

    @property
    def ego(self) -> AgentRecord:
        return next(a for a in self.agents if a.role == "ego")

    @property
    def adversary(self) -> AgentRecord:
        return next(a for a in self.agents if a.role == "adversary")

    @property
    def background(self) -> list[AgentRecord]:
        return [a for a in self.agents if a.role == "background"]

    def logged_future(self, agent: AgentRecord) -> Trajectory:
        """Anchor state plus the logged future of ``agent``."""
        return agent.trajectory(self.current_index, None, self.dt)

    def transformed(self, angle: float, shift=(0.0, 0.0)) -> "Scenario":
        """Copy of the scenario under a global rotation then translation."""
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        shift = np.asarray(shift, dtype=float)

        def move(xy):
            return xy @ rot.T + shift

        lines = tuple(Polyline(move(p.points), p.impassable, p.kind) for p in self.map.polylines)
        agents = []
        for a in self.agents:
            st = a.states.copy()
            st[:, :2] = move(st[:, :2])
            st[:, 2] = st[:, 2] + angle
            agents.append(AgentRecord(a.id, a.role, a.length, a.width, st))
        return Scenario(self.id, MapModel(lines, self.map.lane_width), tuple(agents),
                        self.dt, self.history_steps, self.future_steps)


# ---------------------------------------------------------------------------
# file I/O


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "id": s.id,
        "dt": s.dt,
        "history_steps": s.history_steps,
        "future_steps": s.future_steps,
        "map": {
            "lane_width": s.map.lane_width,
            "polylines": [
                {"kind": p.kind, "impassable": p.impassable, "points": p.points.tolist()}
                for p in s.map.polylines
            ],
        },
        "agents": [
            {"id": a.id, "role": a.role, "size": [a.length, a.width], "states": a.states.tolist()}
            for a in s.agents
        ],
    }


def scenario_from_dict(d: dict) -> Scenario:
    if not isinstance(d, dict):
        raise ScenarioFormatError("scenario document must be an object")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioFormatError(f"schema_version {version!r} does not match {SCHEMA_VERSION}")
    try:
        m = d["map"]
        lines = []
        for i, p in enumerate(m["polylines"]):
            try:
                lines.append(Polyline(np.array(p["points"], dtype=float), bool(p["impassable"]), str(p["kind"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ScenarioFormatError(f"map.polylines[{i}]: {exc}") from exc
        agents = []
        for i, a in enumerate(d["agents"]):
            try:
                length, width = a["size"]
                agents.append(AgentRecord(int(a["id"]), str(a["role"]), float(length), float(width),
                                          np.array(a["states"], dtype=float)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ScenarioFormatError(f"agents[{i}]: {exc}") from exc
        roles = [a.role for a in agents]
        for role in ("ego", "adversary"):
            if role not in roles:
                raise ScenarioFormatError(f"missing {role}")
        return Scenario(str(d["id"]), MapModel(tuple(lines), float(m["lane_width"])), tuple(agents),
                        float(d["dt"]), int(d["history_steps"]), int(d["future_steps"]))
    except KeyError as exc:
        raise ScenarioFormatError(f"missing field {exc.args[0]!r}") from exc
    except ScenarioFormatError:
        raise
    except (TypeError, ValueError) as exc:
        raise ScenarioFormatError(str(exc)) from exc


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=1) + "\n")


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(doc)


def save_corpus(corpus: list[Scenario], directory, seed: int | None = None, config=None) -> Path:
    """Write one JSON file per scenario plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(corpus):
        name = f"{s.id}.json"
        save_scenario(s, directory / name)
        entries.append({"id": s.id, "file": name, "seed": seed, "index": i})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "config": asdict(config) if config is not None else None,
        "scenarios": entries,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_corpus(directory) -> list[Scenario]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return [load_scenario(directory / e["file"]) for e in manifest["scenarios"]]


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class CorpusConfig:
    lanes: tuple = (2, 4)
    lane_width: float = 3.6
    arc_probability: float = 0.4
    radius_range: tuple = (1500.0, 4000.0)
    ego_speed_range: tuple = (9.0, 14.0)
    vehicle_length_range: tuple = (4.3, 5.0)
    vehicle_width_range: tuple = (1.8, 2.0)
    max_background: int = 3
    dt: float = 0.1
    history_steps: int = 10
    future_steps: int = 80
    polyline_spacing: float = 5.0
    lateral_noise: float = 0.03
    randomize_frame: bool = True
    # (layout, probability, min gap, max gap): adversary offset along the road
    # relative to the ego at the first history step
    layouts: tuple = (
        ("adjacent_behind", 0.45, -40.0, -18.0),
        ("adjacent_ahead", 0.2, 16.0, 32.0),
        ("same_behind", 0.2, -45.0, -28.0),
        ("same_ahead", 0.15, 30.0, 45.0),
    )

    def __post_init__(self):
        if min(self.lanes) < 1:
            raise ValueError("lane count must be positive")
        if not np.isclose(sum(p for _, p, _, _ in self.layouts), 1.0):
            raise ValueError("layout probabilities must sum to 1")


class _Road:
    """Straight or constant-curvature road in Frenet-like (s, d) coordinates."""

    def __init__(self, curvature: float):
        self.k = curvature

    def heading(self, s):
        return self.k * np.asarray(s, dtype=float)

    def point(self, s, d):
        s = np.asarray(s, dtype=float)
        d = np.asarray(d, dtype=float)
        if abs(self.k) < 1e-12:
            x, y = s, np.zeros_like(s)
        else:
            x = np.sin(self.k * s) / self.k
            y = (1.0 - np.cos(self.k * s)) / self.k
        phi = self.heading(s)
        return np.stack([x - d * np.sin(phi), y + d * np.cos(phi)], axis=-1)


def _idm_accel(v, gap, dv, v_des, headway=1.4, s0=2.0, a_max=1.5, b=2.0):
    s_star = s0 + max(0.0, v * headway + v * dv / (2.0 * math.sqrt(a_max * b)))
    free = 1.0 - (v / max(v_des, 0.1)) ** 4
    inter = (s_star / max(gap, 0.1)) ** 2 if gap < np.inf else 0.0
    return float(np.clip(a_max * (free - inter), -6.0, a_max))


def _simulate(road, lanes_d, agents, n_steps, dt, rng, noise):
    """Roll IDM + lane keeping for moving agents; returns per-agent states."""
    n = len(agents)
    s = np.array([a["s"] for a in agents], dtype=float)
    v = np.array([a["v"] for a in agents], dtype=float)
    e = np.array([a.get("e", 0.0) for a in agents], dtype=float)
    out = np.zeros((n, n_steps + 1, 4))
    prev_d = None
    for t in range(n_steps + 1):
        d = np.array([lanes_d[a["lane"]] for a in agents]) + e
        xy = road.point(s, d)
        if prev_d is None:
            dd = np.zeros(n)
        else:
            dd = (d - prev_d) / dt
        hd = road.heading(s) + np.arctan2(dd, np.maximum(v, 0.5))
        out[:, t, :2] = xy
        out[:, t, 2] = hd
        out[:, t, 3] = v
        prev_d = d
        if t == n_steps:
            break
        acc = np.zeros(n)
        for i, a in enumerate(agents):
            if a["static"]:
                continue
            gap, dv = np.inf, 0.0
            for j, b in enumerate(agents):
                if j == i or b["lane"] != a["lane"] or s[j] <= s[i]:
                    continue
                g = s[j] - s[i] - 0.5 * (a["length"] + b["length"])
                if g < gap:
                    gap, dv = g, v[i] - v[j]
            acc[i] = _idm_accel(v[i], gap, dv, a["v_des"])
        moving = np.array([not a["static"] for a in agents])
        v = np.where(moving, np.maximum(v + acc * dt, 0.0), 0.0)
        s = s + v * dt
        e = np.where(moving, e * (1.0 - dt / 1.5) + noise * rng.standard_normal(n) * math.sqrt(dt), e)
        e = np.clip(e, -0.25, 0.25)
    # first heading sample uses the forward difference of the lateral offset
    out[:, 0, 2] = out[:, 1, 2]
    return out


def _build_scenario(rng: np.random.Generator, cfg: CorpusConfig, sid: str) -> Scenario | None:
    n_lanes = int(rng.integers(cfg.lanes[0], cfg.lanes[1] + 1))
    w = cfg.lane_width
    if rng.random() < cfg.arc_probability:
        radius = rng.uniform(*cfg.radius_range)
        k = rng.choice([-1.0, 1.0]) / radius
    else:
        k = 0.0
    road = _Road(k)
    half = n_lanes * w / 2.0
    lanes_d = [-half + (i + 0.5) * w for i in range(n_lanes)]

    ego_lane = int(rng.integers(n_lanes))
    k_layout = int(rng.choice(len(cfg.layouts), p=[p for _, p, _, _ in cfg.layouts]))
    layout, _, gap_lo, gap_hi = cfg.layouts[k_layout]
    if n_lanes == 1:
        layout = "same_behind" if layout.startswith("adjacent") else layout
    if layout.startswith("adjacent"):
        options = [ln for ln in (ego_lane - 1, ego_lane + 1) if 0 <= ln < n_lanes]
        adv_lane = int(rng.choice(options))
    else:
        adv_lane = ego_lane
    v_ego = rng.uniform(*cfg.ego_speed_range)
    s_ego = 60.0
    s_adv = s_ego + rng.uniform(gap_lo, gap_hi)
    v_adv = float(np.clip(v_ego + rng.uniform(-1.0, 1.0), 6.0, 16.0))

    def size():
        return float(rng.uniform(*cfg.vehicle_length_range)), float(rng.uniform(*cfg.vehicle_width_range))

    agents = []
    for role, lane, s0, v0 in (("ego", ego_lane, s_ego, v_ego), ("adversary", adv_lane, s_adv, v_adv)):
        length, width = size()
        agents.append({
            "role": role, "lane": lane, "s": s0, "v": v0, "v_des": v0 + rng.uniform(-0.5, 0.5),
            "length": length, "width": width, "static": False,
            "e": float(np.clip(rng.normal(0.0, 0.08), -0.2, 0.2)),
        })
    horizon = cfg.history_steps + cfg.future_steps
    reach = max(s_ego, s_adv) + 17.0 * horizon * cfg.dt
    free_lanes = [ln for ln in range(n_lanes) if ln not in (ego_lane, adv_lane)]
    for _ in range(int(rng.integers(cfg.max_background + 1))):
        length, width = size()
        if free_lanes and rng.random() < 0.7:
            lane = int(rng.choice(free_lanes))
            s0 = min(s_ego, s_adv) + rng.uniform(-10.0, 120.0)
        else:
            lane = int(rng.choice([ego_lane, adv_lane]))
            s0 = reach + rng.uniform(10.0, 60.0)
        agents.append({"role": "background", "lane": lane, "s": s0, "v": 0.0, "v_des": 0.0,
                       "length": length, "width": width, "static": True, "e": 0.0})

    # roll back the history by starting earlier: simulate from t=0 with the
    # placed states as the start of the history window
    states = _simulate(road, lanes_d, agents, horizon, cfg.dt, rng, cfg.lateral_noise)

    s_max = max(reach + 80.0, float(np.max([a["s"] for a in agents])) + 40.0)
    s_grid = np.arange(-40.0, s_max + cfg.polyline_spacing, cfg.polyline_spacing)
    lines = [
        Polyline(road.point(s_grid, np.full_like(s_grid, -half)), True, "boundary"),
        Polyline(road.point(s_grid, np.full_like(s_grid, half)), True, "boundary"),
    ]
    for d in lanes_d:
        lines.append(Polyline(road.point(s_grid, np.full_like(s_grid, d)), False, "centerline"))

    records = [
        AgentRecord(i, a["role"], a["length"], a["width"], states[i]) for i, a in enumerate(agents)
    ]
    sc = Scenario(sid, MapModel(tuple(lines), w), tuple(records), cfg.dt, cfg.history_steps, cfg.future_steps)
    if cfg.randomize_frame:
        sc = sc.transformed(rng.uniform(-math.pi, math.pi), rng.uniform(-300.0, 300.0, size=2))
    return sc if _logs_valid(sc) else None


def _logs_valid(sc: Scenario) -> bool:
    from .rewards import feasibility, first_collision_step

    full = 0
    ego_traj = sc.ego.trajectory(full, None, sc.dt)
    adv_traj = sc.adversary.trajectory(full, None, sc.dt)
    if first_collision_step(adv_traj, ego_traj, (sc.adversary.length, sc.adversary.width),
                            (sc.ego.length, sc.ego.width), include_anchor=True) is not None:
        return False
    for agent in (sc.ego, sc.adversary):
        if not feasibility(agent.trajectory(full, None, sc.dt), sc, agent=agent, start=0, skip_anchor=False):
            return False
    return True


def generate_corpus(seed: int, n: int, config: CorpusConfig | None = None) -> list[Scenario]:
    """Deterministic synthetic corpus; invalid draws are re-sampled."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = config or CorpusConfig()
    children = np.random.SeedSequence(seed).spawn(n)
    corpus = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        sid = f"s{seed}-{i:04d}"
        for _ in range(100):
            sc = _build_scenario(rng, cfg, sid)
            if sc is not None:
                corpus.append(sc)
                break
        else:
            raise RuntimeError(f"could not build a valid scenario for {sid}")
    return corpus


# ---------------------------------------------------------------------------
# context features


@dataclass(frozen=True)
class FeatureConfig:
    history: int = 10
    pos_scale: float = 20.0
    speed_scale: float = 10.0
    per_step: int = 5
    agents: tuple = field(default=("adversary", "ego"))

    @property
    def dim(self) -> int:
        return self.history * self.per_step * len(self.agents)


def context_features(s: Scenario, cfg: FeatureConfig | None = None) -> np.ndarray:
    """Adversary and ego history in the adversary's current body frame.

    Per step and agent: ``x, y`` (scaled), ``cos``/``sin`` of relative
    heading and scaled speed. Length is ``history * 5 * 2``.
    """
    cfg = cfg or FeatureConfig()
    t0 = s.current_index
    if t0 + 1 < cfg.history:
        raise ValueError("insufficient history")
    frame = s.adversary.pose(t0)
    parts = []
    for role in cfg.agents:
        agent = s.adversary if role == "adversary" else s.ego
        st = agent.states[t0 + 1 - cfg.history: t0 + 1]
        xy = to_frame(st[:, :2], frame) / cfg.pos_scale
        dh = wrap_angle(st[:, 2] - frame.heading)
        parts.append(np.column_stack([xy, np.cos(dh), np.sin(dh), st[:, 3] / cfg.speed_scale]))
    return np.concatenate(parts, axis=0).ravel()
