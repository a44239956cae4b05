"""The seeded reference run: corpus, pretraining, experts, sweeps, closed loop.

Every stage draws its randomness from ``derive_seed(seed, stage)`` so a
single integer reproduces the whole run, and the worker count only changes
how evaluation work is scheduled.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import closed_loop as cl
from .hgpo import HgpoConfig, group_feasibility, smoothed, train_expert
from .metrics import EvalReport, evaluate_generator, replay_generator, rows_csv
from .policy import PolicyParams, PretrainConfig, imitation_accuracy, pretrain_imitation
from .rewards import PreferenceWeights
from .scenario import Scenario, generate_corpus
from .steering import (Experts, FrontComparison, LandscapeReport, MixSpec, SteerConfig, SweepReport,
                       compare_fronts, lmc_scan, pareto_sweep, steered_generator)
from .theory import CheckResult, run_checks


def derive_seed(seed: int, name: str) -> int:
    """Per-stage seed: the first 8 bytes of ``sha256(f"{seed}:{name}")``, little endian."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    n_scenarios: int = 64
    pretrain_steps: int = 600
    pretrain_lr: float = 1e-3
    epochs: int = 200
    finetune_lr: float = 1e-3
    group_size: int = 32
    max_pairs: int = 8
    margin: float = 0.2
    dpo_beta: float = 0.05
    batch_size: int = 16
    w_star: float = 0.9
    K_candidates: int = 8
    lambdas: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    modes: tuple = ("weight_interp", "traj_mix", "logit_mix")
    lmc_lambdas: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    plane_grid: tuple = (-0.5, 0.0, 0.5, 1.0, 1.5)
    ablations: bool = True
    closed_loop_iterations: int = 6
    closed_loop_batch: int = 8
    closed_loop_holdout: int = 16
    cem_population: int = 6
    cem_budget: int = 2
    ego0: tuple = (1.0, 0.3, 2.0, 0.0, 2.0)
    theory: bool = True
    theory_gap_trials: int = 500
    theory_bound_trials: int = 1000

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def hgpo(self, **overrides) -> HgpoConfig:
        return HgpoConfig(group_size=self.group_size, max_pairs=self.max_pairs, margin=self.margin,
                          dpo_beta=self.dpo_beta, epochs=self.epochs, learning_rate=self.finetune_lr,
                          w_star=self.w_star, seed=self.seed, batch_size=self.batch_size, **overrides)


def build_corpus(cfg: PipelineConfig) -> list[Scenario]:
    return generate_corpus(derive_seed(cfg.seed, "corpus") % 2**32, cfg.n_scenarios)


def pretrain(corpus: Sequence[Scenario], cfg: PipelineConfig, history: list | None = None) -> PolicyParams:
    return pretrain_imitation(list(corpus), PretrainConfig(cfg.pretrain_steps, cfg.pretrain_lr),
                              rng=np.random.default_rng(derive_seed(cfg.seed, "pretrain")), history=history)


def finetune(theta_ref: PolicyParams, corpus: Sequence[Scenario], cfg: PipelineConfig, expert: str,
             variant: str = "hgpo", map_constraint: bool = True) -> tuple[PolicyParams, list]:
    """One expert run; every variant shares the fine-tuning seed so runs are matched."""
    if expert not in ("adv", "real"):
        raise ValueError(f"expert must be 'adv' or 'real', got {expert!r}")
    history: list = []
    hcfg = cfg.hgpo(variant=variant, map_constraint=map_constraint)
    theta = train_expert(theta_ref, corpus, None, PreferenceWeights.expert(cfg.w_star, expert == "adv"), hcfg,
                         np.random.default_rng(derive_seed(cfg.seed, "finetune")), history)
    return theta, history


@dataclass(frozen=True)
class FeasibilityAblation:
    with_map: float
    without_map: float


@dataclass(frozen=True)
class LossCurves:
    hgpo: tuple
    dpo: tuple

    def epochs_to_target(self, alpha: float = 0.1) -> tuple[int | None, int | None]:
        """Epochs each smoothed curve needs to reach the DPO run's final smoothed loss."""
        sh, sd = smoothed(np.array(self.hgpo), alpha), smoothed(np.array(self.dpo), alpha)
        target = sd[-1]

        def first(curve):
            hit = np.flatnonzero(curve <= target)
            return int(hit[0]) + 1 if len(hit) else None

        return first(sh), first(sd)


@dataclass(eq=False)
class PipelineResult:
    config: PipelineConfig
    corpus: list
    theta_ref: PolicyParams | None = None
    imitation: tuple | None = None
    experts: Experts | None = None
    histories: dict = field(default_factory=dict)
    feasibility: FeasibilityAblation | None = None
    loss_curves: LossCurves | None = None
    sweep: SweepReport | None = None
    fronts: FrontComparison | None = None
    landscape: LandscapeReport | None = None
    evaluations: dict = field(default_factory=dict)
    closed_loop: cl.ClosedLoopResult | None = None
    theory: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)

    def write(self, out) -> list[Path]:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, text in sorted(self.tables.items()):
            p = out / f"{name}.csv"
            p.write_text(text)
            paths.append(p)
        return paths


def front_rows(fc: FrontComparison) -> list[dict]:
    return [{"level": lvl, **{m: v[i] for m, v in fc.p_real.items()}} for i, lvl in enumerate(fc.levels)]


def eval_row(name: str, rep: EvalReport) -> dict:
    return {"generator": name, **asdict(rep)}


def run_reference(cfg: PipelineConfig | None = None, workers: int | None = 1) -> PipelineResult:
    """Run every stage and collect the CSV tables (not written to disk)."""
    cfg = cfg or PipelineConfig()
    corpus = build_corpus(cfg)
    res = PipelineResult(cfg, corpus)
    t = res.tables

    pre_hist: list = []
    ref = pretrain(corpus, cfg, pre_hist)
    res.theta_ref = ref
    res.imitation = imitation_accuracy(ref, corpus)
    t["pretrain_history"] = rows_csv([{"step": i, "loss": v} for i, v in enumerate(pre_hist)])

    theta_adv, h_adv = finetune(ref, corpus, cfg, "adv")
    theta_real, h_real = finetune(ref, corpus, cfg, "real")
    experts = Experts(theta_adv, theta_real)
    res.experts = experts
    res.histories.update(adv=h_adv, real=h_real)
    t["finetune_adv"], t["finetune_real"] = rows_csv(h_adv), rows_csv(h_real)

    if cfg.ablations:
        theta_nomap, h_nomap = finetune(ref, corpus, cfg, "adv", map_constraint=False)
        _, h_dpo = finetune(ref, corpus, cfg, "adv", variant="dpo")
        res.histories.update(no_map=h_nomap, dpo=h_dpo)
        t["finetune_adv_nomap"], t["finetune_adv_dpo"] = rows_csv(h_nomap), rows_csv(h_dpo)
        feas_seed = derive_seed(cfg.seed, "feasibility")
        res.feasibility = FeasibilityAblation(
            group_feasibility(theta_adv, corpus, cfg.group_size, np.random.default_rng(feas_seed)),
            group_feasibility(theta_nomap, corpus, cfg.group_size, np.random.default_rng(feas_seed)))
        res.loss_curves = LossCurves(tuple(r["loss"] for r in h_adv), tuple(r["loss"] for r in h_dpo))
        hg, dp = res.loss_curves.epochs_to_target()
        t["ablations"] = rows_csv([{"feasibility_hgpo": res.feasibility.with_map,
                                    "feasibility_no_map": res.feasibility.without_map,
                                    "hgpo_epochs_to_dpo_final": -1 if hg is None else hg,
                                    "dpo_epochs_to_dpo_final": -1 if dp is None else dp}])

    steer = SteerConfig(K_candidates=cfg.K_candidates)
    res.sweep = pareto_sweep(experts, ref, corpus, None, cfg.lambdas, cfg.modes, steer, workers)
    t["sweep"] = res.sweep.to_csv()
    if {"traj_mix", "logit_mix"} <= set(cfg.modes) and "weight_interp" in cfg.modes:
        res.fronts = compare_fronts(res.sweep)
        t["fronts"] = rows_csv(front_rows(res.fronts))

    res.landscape = lmc_scan(experts, ref, corpus, cfg.lmc_lambdas, cfg.plane_grid, cfg.w_star)
    t["landscape"] = res.landscape.to_csv()
    t["landscape_pca"] = rows_csv([{"model": lbl, "pc1": float(x), "pc2": float(y)}
                                   for lbl, (x, y) in zip(res.landscape.pca_labels, res.landscape.pca_coords)])
    if res.landscape.plane_reward is not None:
        t["landscape_plane"] = rows_csv([
            {"a_real": float(a), "b_adv": float(b), "reward": float(r)}
            for a, b, r in zip(res.landscape.plane_a.ravel(), res.landscape.plane_b.ravel(),
                               res.landscape.plane_reward.ravel())])

    egos = {"replay": None, "idm": cl.EgoPolicy("idm"), "reactive_pd": cl.EgoPolicy("reactive_pd")}
    full_adv = steered_generator(MixSpec("weight_interp", 1.0), experts, ref, 1.0, cfg.K_candidates)
    rows = []
    for ego_name, ego in egos.items():
        for gen_name, gen in (("replay", replay_generator), ("steered_lambda_1", full_adv)):
            rep = evaluate_generator(gen, corpus, ego, steer.reward, workers)
            res.evaluations[(gen_name, ego_name)] = rep
            rows.append({"ego": ego_name, **eval_row(gen_name, rep)})
    t["evaluation"] = rows_csv(rows)

    if cfg.closed_loop_iterations > 0:
        holdout = generate_corpus(derive_seed(cfg.seed, "holdout") % 2**32, cfg.closed_loop_holdout)
        sched = cl.CurriculumSchedule(cfg.closed_loop_iterations)
        loop_cfg = cl.ClosedLoopConfig(batch_size=cfg.closed_loop_batch, holdout=cfg.closed_loop_holdout,
                                       cem=cl.CemConfig(population=cfg.cem_population), cem_budget=cfg.cem_budget,
                                       K_candidates=cfg.K_candidates, workers=workers)
        res.closed_loop = cl.run_closed_loop(ref, experts, cl.parametric(cfg.ego0), list(corpus) + holdout, sched,
                                             loop_cfg, np.random.default_rng(derive_seed(cfg.seed, "closed_loop")))
        t["closed_loop"] = res.closed_loop.to_csv()

    if cfg.theory:
        res.theory, tables = run_checks(seed=derive_seed(cfg.seed, "theory"), trials_gap=cfg.theory_gap_trials,
                                        trials_bound=cfg.theory_bound_trials)
        t.update({f"theory_{k}": v for k, v in tables.items()})
        t["theory_summary"] = rows_csv([{"check": r.name, "passed": r.passed, "detail": r.detail}
                                        for r in res.theory])
    return res


def write_manifest(path, subcommand: str, config: dict, extra: dict | None = None) -> None:
    doc = {"schema_version": 1, "subcommand": subcommand, "config": config, **(extra or {})}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_config_file(path) -> dict:
    """A plain JSON object, or a manifest whose ``config`` entry is used."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: configuration must be a JSON object")
    return doc["config"] if "config" in doc and "schema_version" in doc else doc


__all__ = ["PipelineConfig", "PipelineResult", "derive_seed", "run_reference", "build_corpus", "pretrain",
           "finetune", "write_manifest", "read_config_file", "CheckResult"]
