"""Hierarchical group-based preference optimisation of opposing experts.

Each step samples a group of goals per scenario from the current policy,
turns it into preference pairs (feasible beats infeasible first, then
reward margin among feasible ones) and takes an Adam step on the logistic
pairwise loss measured against a frozen reference policy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .geometry import Trajectory
from .optim import Adam
from .policy import PolicyParams, backward, forward, log_softmax, prepare, sample_indices
from .rewards import PreferenceWeights
from .scenario import Scenario

FEASIBILITY_FIRST = "feasibility_first"
WITHIN_FEASIBILITY = "within_feasibility"


@dataclass(frozen=True)
class HgpoConfig:
    group_size: int = 32
    max_pairs: int = 8
    margin: float = 0.2
    dpo_beta: float = 0.05
    epochs: int = 200
    learning_rate: float = 1e-5
    w_star: float = 0.9
    seed: int = 0
    batch_size: int = 16
    variant: str = "hgpo"
    map_constraint: bool = True

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.max_pairs < 1:
            raise ValueError("max_pairs must be >= 1")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not self.dpo_beta > 0:
            raise ValueError("dpo_beta must be positive")
        if not 0.5 <= self.w_star <= 1.0:
            raise ValueError("w_star must lie in [0.5, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.variant not in ("hgpo", "dpo"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class PreferencePair:
    winner: int
    loser: int
    rule: str
    scenario_id: str

    def __post_init__(self):
        if self.winner == self.loser:
            raise ValueError("winner and loser must differ")
        if self.rule not in (FEASIBILITY_FIRST, WITHIN_FEASIBILITY):
            raise ValueError(f"unknown rule {self.rule!r}")


EgoSource = Callable[[Scenario], Trajectory]


def logged_ego(s: Scenario) -> Trajectory:
    return s.logged_future(s.ego)


# ---------------------------------------------------------------------------
# pairs


def pairs_from_group(indices, feasible, pref, margin: float, max_pairs: int,
                     scenario_id: str = "") -> list[PreferencePair]:
    """Preference pairs for a group of distinct goal indices.

    Rule-1 pairs (feasible winner, infeasible loser) come first, then
    rule-2 pairs (both feasible, reward gap above ``margin``). Within each
    rule pairs are ordered by descending reward gap, ties by
    ``(winner, loser)``; the list is cut at ``max_pairs``.
    """
    indices = [int(i) for i in indices]
    feas = {i: bool(f) for i, f in zip(indices, feasible)}
    val = {i: float(r) for i, r in zip(indices, pref)}
    r1, r2 = [], []
    for w in indices:
        if not feas[w]:
            continue
        for l in indices:
            if l == w:
                continue
            gap = val[w] - val[l]
            if not feas[l]:
                r1.append((-gap, w, l))
            elif gap > margin:
                r2.append((-gap, w, l))
    ordered = [(FEASIBILITY_FIRST, p) for p in sorted(r1)] + [(WITHIN_FEASIBILITY, p) for p in sorted(r2)]
    return [PreferencePair(w, l, rule, scenario_id) for rule, (_, w, l) in ordered[:max_pairs]]


def dpo_pair(indices, feasible, pref, margin: float, scenario_id: str = "") -> list[PreferencePair]:
    """The single most-preferred versus least-preferred pair of the group."""
    key = {int(i): (bool(f), float(r)) for i, f, r in zip(indices, feasible, pref)}
    if len(key) < 2:
        return []
    best = max(sorted(key), key=lambda i: key[i])
    worst = min(sorted(key), key=lambda i: key[i])
    (fb, rb), (fw, rw) = key[best], key[worst]
    if fb and not fw:
        return [PreferencePair(best, worst, FEASIBILITY_FIRST, scenario_id)]
    if fb and fw and rb - rw > margin:
        return [PreferencePair(best, worst, WITHIN_FEASIBILITY, scenario_id)]
    return []


@dataclass(frozen=True, eq=False)
class GroupStats:
    indices: np.ndarray
    feasible: np.ndarray
    adv: np.ndarray
    p_real: np.ndarray


def _group_labels(theta: PolicyParams, s: Scenario, ego: Trajectory | None, weights: PreferenceWeights,
                  cfg: HgpoConfig, rng: np.random.Generator):
    prep = prepare(s, theta.config)
    logits = forward(theta, prep.inputs)[0]
    drawn = sample_indices(log_softmax(logits), cfg.group_size, rng)
    adv = prep.adversarial(ego)[0]
    feas = prep.feasible if cfg.map_constraint else np.ones_like(prep.feasible)
    pref = weights.w_adv * adv - weights.w_real * prep.p_real
    uniq = np.unique(drawn)
    stats = GroupStats(drawn, prep.feasible[drawn], adv[drawn], prep.p_real[drawn])
    return uniq, feas[uniq], pref[uniq], stats


def build_pairs(theta: PolicyParams, s: Scenario, ego_traj: Trajectory | None, weights: PreferenceWeights,
                cfg: HgpoConfig, rng: np.random.Generator) -> list[PreferencePair]:
    """Sample ``group_size`` goals and turn the distinct ones into pairs.

    ``ego_traj=None`` attacks the logged ego future.
    """
    uniq, feas, pref, _ = _group_labels(theta, s, ego_traj, weights, cfg, rng)
    if cfg.variant == "dpo":
        return dpo_pair(uniq, feas, pref, cfg.margin, s.id)
    return pairs_from_group(uniq, feas, pref, cfg.margin, cfg.max_pairs, s.id)


# ---------------------------------------------------------------------------
# loss


def hgpo_loss(theta: PolicyParams, theta_ref: PolicyParams, pairs: Sequence[PreferencePair],
              scenarios: Mapping[str, Scenario] | Sequence[Scenario], cfg: HgpoConfig):
    """Mean pairwise logistic loss and its gradient with respect to ``theta``."""
    if not pairs:
        raise ValueError("empty pair list")
    if theta.dim != theta_ref.dim:
        raise ValueError("theta and theta_ref differ in dimension")
    if not isinstance(scenarios, Mapping):
        scenarios = {s.id: s for s in scenarios}
    ids = sorted({p.scenario_id for p in pairs})
    row = {sid: k for k, sid in enumerate(ids)}
    X = np.stack([prepare(scenarios[sid], theta.config).inputs for sid in ids])
    z, acts = forward(theta, X)
    z_ref = forward(theta_ref, X)[0]
    r = z - z_ref  # log-ratio up to a per-scenario constant that cancels in pairs
    k = np.array([row[p.scenario_id] for p in pairs])
    w = np.array([p.winner for p in pairs])
    l = np.array([p.loser for p in pairs])
    u = cfg.dpo_beta * (r[k, w] - r[k, l])
    loss = float(np.mean(np.logaddexp(0.0, -u)))
    coef = -cfg.dpo_beta * np.exp(-np.logaddexp(0.0, u)) / len(pairs)  # -beta * sigmoid(-u) / n
    g = np.zeros_like(z)
    np.add.at(g, (k, w), coef)
    np.add.at(g, (k, l), -coef)
    return loss, backward(theta, acts, g)


# ---------------------------------------------------------------------------
# training


def train_expert(theta_ref: PolicyParams, corpus: Sequence[Scenario], ego_policy: EgoSource | None,
                 weights: PreferenceWeights, cfg: HgpoConfig, rng: np.random.Generator,
                 history: list | None = None) -> PolicyParams:
    """Fine-tune a copy of ``theta_ref`` toward ``weights``.

    Groups are re-sampled from the latest parameters at every step. When
    ``history`` is given, one row per epoch is appended with the mean loss
    and the sampled-group feasibility rate, adversarial reward and P_real.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if cfg.epochs == 0:
        return theta_ref
    source = ego_policy or logged_ego
    egos = {s.id: (None if source is logged_ego else source(s)) for s in corpus}
    by_id = {s.id: s for s in corpus}
    if len(by_id) != len(corpus):
        raise ValueError("scenario ids must be unique")
    opt = Adam(theta_ref.dim, cfg.learning_rate)
    theta = theta_ref
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(corpus))
        losses, feas, adv, real = [], [], [], []
        for start in range(0, len(order), cfg.batch_size):
            pairs = []
            for i in order[start:start + cfg.batch_size]:
                s = corpus[i]
                uniq, f, pref, st = _group_labels(theta, s, egos[s.id], weights, cfg, rng)
                if cfg.variant == "dpo":
                    pairs += dpo_pair(uniq, f, pref, cfg.margin, s.id)
                else:
                    pairs += pairs_from_group(uniq, f, pref, cfg.margin, cfg.max_pairs, s.id)
                feas.append(st.feasible)
                adv.append(st.adv)
                real.append(st.p_real)
            if not pairs:
                continue
            loss, grad = hgpo_loss(theta, theta_ref, pairs, by_id, cfg)
            losses.append(loss)
            theta = theta.with_theta(opt.step(theta.theta, grad))
        if history is not None:
            history.append({
                "epoch": epoch,
                "loss": float(np.mean(losses)) if losses else float("nan"),
                "feasibility_rate": float(np.mean(np.concatenate(feas))),
                "mean_adv": float(np.mean(np.concatenate(adv))),
                "mean_p_real": float(np.mean(np.concatenate(real))),
            })
    return theta


def train_both_experts(theta_ref: PolicyParams, corpus: Sequence[Scenario], ego_policy: EgoSource | None,
                       cfg: HgpoConfig, rng: np.random.Generator, histories: tuple | None = None):
    """``(theta_adv, theta_real)`` trained from the same reference.

    Both runs draw from generators seeded identically from ``rng`` so that
    the only difference between them is the reward weighting.
    """
    seed = int(rng.integers(2**63))
    h_adv, h_real = histories if histories is not None else (None, None)
    theta_adv = train_expert(theta_ref, corpus, ego_policy, PreferenceWeights.expert(cfg.w_star, True), cfg,
                             np.random.default_rng(seed), h_adv)
    theta_real = train_expert(theta_ref, corpus, ego_policy, PreferenceWeights.expert(cfg.w_star, False), cfg,
                              np.random.default_rng(seed), h_real)
    return theta_adv, theta_real


def smoothed(values, alpha: float = 0.1) -> np.ndarray:
    """Exponential moving average with smoothing factor ``alpha``.

    NaN entries (epochs without any pair) carry the previous average forward;
    leading NaNs stay NaN.
    """
    out = np.full(len(values), np.nan)
    acc = np.nan
    for i, v in enumerate(values):
        if not np.isnan(v):
            acc = v if np.isnan(acc) else alpha * v + (1 - alpha) * acc
        out[i] = acc
    return out


def epochs_to_reach(losses, target: float) -> int | None:
    """First epoch (1-based count) whose loss is at or below ``target``."""
    hit = np.flatnonzero(np.asarray(losses) <= target)
    return int(hit[0]) + 1 if len(hit) else None


def group_feasibility(theta: PolicyParams, corpus: Sequence[Scenario], group_size: int,
                      rng: np.random.Generator) -> float:
    """Map-feasible fraction of ``group_size`` goals sampled per scenario."""
    hits = []
    for s in corpus:
        prep = prepare(s, theta.config)
        drawn = sample_indices(log_softmax(forward(theta, prep.inputs)[0]), group_size, rng)
        hits.append(prep.feasible[drawn])
    return float(np.mean(np.concatenate(hits)))
