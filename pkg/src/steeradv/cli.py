"""Command-line entry point: ``steeradv <subcommand> [options]``.

Configuration is layered: built-in defaults, then ``--config FILE`` (a JSON
object, or a manifest written by an earlier run), then ``--set key=value``
and the explicit flags. Each run writes ``manifest_<subcommand>.json`` into
the output directory with the fully resolved configuration, so
``steeradv <subcommand> --config that-manifest`` repeats it.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import closed_loop as cl
from . import pipeline as pl
from . import plots
from .metrics import evaluate_generator, replay_generator, rows_csv
from .policy import load_checkpoint, save_checkpoint
from .rewards import breakdown
from .scenario import generate_corpus, load_corpus, save_corpus
from .steering import (MODES, Experts, MixSpec, SteerConfig, compare_fronts, generate_steered, lmc_scan,
                       pareto_sweep, steered_generator)
from .theory import CHECKS, format_table, run_checks

OUT_ENV = "STEERADV_OUT"
PIPELINE_KEYS = {f.name for f in fields(pl.PipelineConfig)}


class UsageError(Exception):
    """Bad arguments or configuration; exits with status 2."""


# ---------------------------------------------------------------------------
# configuration


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve(args: argparse.Namespace, command_keys: tuple) -> dict:
    """Merge defaults < config file < ``--set`` < explicit flags into one dict."""
    cfg = {**asdict(pl.PipelineConfig()), **COMMON_DEFAULTS,
           **{k: COMMAND_DEFAULTS[k] for k in command_keys}}
    if args.config:
        try:
            doc = pl.read_config_file(args.config)
        except (OSError, ValueError) as exc:
            raise ValueError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(doc) - set(cfg) - set(COMMAND_DEFAULTS)
        if unknown:
            raise ValueError(f"config {args.config}: unknown keys {sorted(unknown)}")
        cfg.update({k: v for k, v in doc.items() if k in cfg})
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep or key not in PIPELINE_KEYS:
            raise UsageError(f"--set expects key=value with a known key, got {item!r}")
        cfg[key] = _parse_value(value)
    for key in ("seed", "workers", *command_keys):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["workers"] is None:
        cfg["workers"] = os.cpu_count() or 1
    if args.out is not None:
        cfg["out"] = str(args.out)
    elif cfg["out"] is None:
        cfg["out"] = os.environ.get(OUT_ENV, "runs")
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}


def pipeline_config(cfg: dict) -> pl.PipelineConfig:
    try:
        return pl.PipelineConfig.from_dict({k: v for k, v in cfg.items() if k in PIPELINE_KEYS})
    except TypeError as exc:
        raise ValueError(f"malformed configuration: {exc}") from exc


COMMON_DEFAULTS = {"workers": None, "out": None}
COMMAND_DEFAULTS = {
    "corpus_dir": None, "ref": None, "adv": None, "real": None, "expert": "both", "variant": "hgpo",
    "no_map_constraint": False, "mode": "weight_interp", "lam": 0.5, "mu": None, "scenario": None,
    "phi": [], "base": "ref", "generator": "steered", "ego": "replay", "checks": list(CHECKS),
    "report": None, "kind": None, "landscape": False,
}


def _out(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(cfg: dict, sub: str, outputs: list) -> None:
    out = _out(cfg)
    pl.write_manifest(out / f"manifest_{sub}.json", sub, cfg,
                      {"outputs": sorted(str(Path(p).relative_to(out)) for p in outputs)})
    for p in outputs:
        print(p)


def _corpus(cfg):
    if cfg.get("corpus_dir"):
        path = Path(cfg["corpus_dir"])
        if not (path / "manifest.json").exists():
            raise FileNotFoundError(f"no corpus manifest in {path}")
        return load_corpus(path)
    return pl.build_corpus(pipeline_config(cfg))


def _checkpoint(cfg, key: str, default_name: str):
    path = Path(cfg.get(key) or Path(cfg["out"]) / default_name)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path} (pass --{key})")
    return load_checkpoint(path)


def _experts(cfg):
    ref = _checkpoint(cfg, "ref", "ref.json")
    experts = Experts(_checkpoint(cfg, "adv", "theta_adv.json"), _checkpoint(cfg, "real", "theta_real.json"))
    if experts.adv.sizes != ref.sizes or experts.adv.config != ref.config:
        raise ValueError("expert and reference checkpoints are incompatible")
    return ref, experts


def _write(out: Path, name: str, text: str) -> Path:
    p = out / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_corpus(cfg) -> list:
    pc = pipeline_config(cfg)
    corpus = pl.build_corpus(pc)
    return [save_corpus(corpus, _out(cfg) / "corpus", seed=pl.derive_seed(pc.seed, "corpus") % 2**32)]


def cmd_pretrain(cfg) -> list:
    out, pc = _out(cfg), pipeline_config(cfg)
    history: list = []
    ref = pl.pretrain(_corpus(cfg), pc, history)
    save_checkpoint(ref, out / "ref.json")
    return [out / "ref.json", _write(out, "pretrain_history.csv",
                                     rows_csv([{"step": i, "loss": v} for i, v in enumerate(history)]))]


def cmd_finetune(cfg) -> list:
    out, pc = _out(cfg), pipeline_config(cfg)
    corpus = _corpus(cfg)
    ref = _checkpoint(cfg, "ref", "ref.json")
    labels = ("adv", "real") if cfg["expert"] == "both" else (cfg["expert"],)
    suffix = "" if cfg["variant"] == "hgpo" and not cfg["no_map_constraint"] else \
        f"_{cfg['variant']}" + ("_nomap" if cfg["no_map_constraint"] else "")
    outputs = []
    for label in labels:
        theta, history = pl.finetune(ref, corpus, pc, label, cfg["variant"], not cfg["no_map_constraint"])
        save_checkpoint(theta, out / f"theta_{label}{suffix}.json")
        outputs += [out / f"theta_{label}{suffix}.json",
                    _write(out, f"finetune_{label}{suffix}.csv", rows_csv(history))]
    return outputs


def _phi(items) -> tuple:
    terms = []
    for item in items:
        label, sep, value = str(item).partition("=")
        if not sep:
            raise UsageError(f"--phi expects label=coefficient, got {item!r}")
        terms.append((label, float(value)))
    return tuple(terms)


def cmd_generate(cfg) -> list:
    try:
        spec = MixSpec(cfg["mode"], float(cfg["lam"]), _phi(cfg["phi"]), cfg["base"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    mu = float(cfg["mu"]) if cfg["mu"] is not None else float(np.clip(spec.lam, 0.0, 1.0))
    if not 0.0 <= mu <= 1.0:
        raise UsageError("mu must lie in [0, 1]")
    out, pc = _out(cfg), pipeline_config(cfg)
    ref, experts = _experts(cfg)
    corpus = _corpus(cfg)
    chosen = [s for s in corpus if cfg["scenario"] in (None, s.id)]
    if not chosen:
        raise UsageError(f"scenario {cfg['scenario']!r} not in corpus")
    traj_rows, summary = [], []
    for s in chosen:
        traj = generate_steered(spec, experts, ref, s, None, mu, pc.K_candidates)
        traj_rows += [{"scenario": s.id, "step": k, "x": float(x), "y": float(y), "heading": float(h),
                       "speed": float(v)} for k, ((x, y), h, v) in enumerate(zip(traj.xy, traj.heading, traj.speed))]
        br = breakdown(traj, s.logged_future(s.ego), s)
        summary.append({"scenario": s.id, "adv": br.adv, "p_kin": br.p_kin, "p_beh": br.p_beh,
                        "feasible": br.feasible})
    tag = f"{spec.mode}_{spec.lam:g}"
    return [_write(out, f"generated_{tag}.csv", rows_csv(traj_rows)),
            _write(out, f"generated_{tag}_summary.csv", rows_csv(summary))]


def cmd_sweep(cfg) -> list:
    out, pc = _out(cfg), pipeline_config(cfg)
    ref, experts = _experts(cfg)
    corpus = _corpus(cfg)
    bad = set(pc.modes) - (set(MODES) - {"weight_extrap"})
    if bad:
        raise UsageError(f"modes {sorted(bad)} cannot be swept over lambda in [0, 1]")
    if any(not 0.0 <= lam <= 1.0 for lam in pc.lambdas):
        raise UsageError("sweep lambdas must lie in [0, 1]")
    rep = pareto_sweep(experts, ref, corpus, None, pc.lambdas, pc.modes, SteerConfig(pc.K_candidates), cfg["workers"])
    outputs = [_write(out, "sweep.csv", rep.to_csv())]
    if "weight_interp" in pc.modes and len(pc.modes) > 1:
        fc = compare_fronts(rep, others=tuple(m for m in pc.modes if m != "weight_interp"))
        outputs.append(_write(out, "fronts.csv", rows_csv(pl.front_rows(fc))))
    if cfg["landscape"]:
        lr = lmc_scan(experts, ref, corpus, pc.lmc_lambdas, pc.plane_grid, pc.w_star)
        outputs.append(_write(out, "landscape.csv", lr.to_csv()))
        outputs.append(_write(out, "landscape_pca.csv", rows_csv(
            [{"model": m, "pc1": float(x), "pc2": float(y)} for m, (x, y) in zip(lr.pca_labels, lr.pca_coords)])))
        outputs.append(_write(out, "landscape_summary.csv", rows_csv([{
            "norm_adv": lr.norm_adv, "norm_real": lr.norm_real, "cosine": lr.cos_adv_real,
            "angle_deg": lr.angle_deg, "degenerate": lr.degenerate}])))
    return outputs


EGOS = {"replay": lambda: None, "idm": lambda: cl.EgoPolicy("idm"), "reactive_pd": lambda: cl.EgoPolicy("reactive_pd")}


def cmd_evaluate(cfg) -> list:
    out, pc = _out(cfg), pipeline_config(cfg)
    if cfg["ego"] not in EGOS:
        raise UsageError(f"unknown ego {cfg['ego']!r}; choose from {sorted(EGOS)}")
    corpus = _corpus(cfg)
    if cfg["generator"] == "replay":
        gen = replay_generator
    elif cfg["generator"] == "steered":
        try:
            spec = MixSpec(cfg["mode"], float(cfg["lam"]), _phi(cfg["phi"]), cfg["base"])
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        ref, experts = _experts(cfg)
        mu = float(cfg["mu"]) if cfg["mu"] is not None else float(np.clip(spec.lam, 0.0, 1.0))
        gen = steered_generator(spec, experts, ref, mu, pc.K_candidates)
    else:
        raise UsageError(f"unknown generator {cfg['generator']!r}")
    rep = evaluate_generator(gen, corpus, EGOS[cfg["ego"]](), SteerConfig().reward, cfg["workers"])
    print(rep.table())
    return [_write(out, f"evaluation_{cfg['generator']}_{cfg['ego']}.csv", rep.to_csv())]


def cmd_theory(cfg) -> list:
    out, pc = _out(cfg), pipeline_config(cfg)
    unknown = set(cfg["checks"]) - set(CHECKS)
    if unknown:
        raise UsageError(f"unknown checks {sorted(unknown)}; choose from {list(CHECKS)}")
    results, tables = run_checks(tuple(cfg["checks"]), seed=pl.derive_seed(pc.seed, "theory"),
                                 trials_gap=pc.theory_gap_trials, trials_bound=pc.theory_bound_trials)
    print(format_table(results))
    outputs = [_write(out, f"theory_{k}.csv", v) for k, v in sorted(tables.items())]
    outputs.append(_write(out, "theory_summary.csv", rows_csv(
        [{"check": r.name, "passed": r.passed, "detail": r.detail} for r in results])))
    cfg["_failed"] = [r.name for r in results if not r.passed]
    return outputs


def cmd_closedloop(cfg) -> list:
    out, pc = _out(cfg), pipeline_config(cfg)
    ref, experts = _experts(cfg)
    corpus = _corpus(cfg) + generate_corpus(pl.derive_seed(pc.seed, "holdout") % 2**32, pc.closed_loop_holdout)
    loop_cfg = cl.ClosedLoopConfig(batch_size=pc.closed_loop_batch, holdout=pc.closed_loop_holdout,
                                   cem=cl.CemConfig(population=pc.cem_population), cem_budget=pc.cem_budget,
                                   K_candidates=pc.K_candidates, workers=cfg["workers"])
    res = cl.run_closed_loop(ref, experts, cl.parametric(pc.ego0), corpus, cl.CurriculumSchedule(pc.closed_loop_iterations),
                             loop_cfg, np.random.default_rng(pl.derive_seed(pc.seed, "closed_loop")))
    cl.save_ego(out / "ego.json", res.final_ego)
    return [_write(out, "closed_loop.csv", res.to_csv()), out / "ego.json"]


def cmd_plot(cfg) -> list:
    if not cfg["report"]:
        raise UsageError("plot needs --report PATH")
    report = Path(cfg["report"])
    if not report.exists():
        raise FileNotFoundError(f"missing report {report}")
    try:
        return [plots.plot_report(report, _out(cfg), cfg["kind"])]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_pipeline(cfg) -> list:
    out = _out(cfg)
    res = pl.run_reference(pipeline_config(cfg), cfg["workers"])
    outputs = res.write(out)
    save_checkpoint(res.theta_ref, out / "ref.json")
    save_checkpoint(res.experts.adv, out / "theta_adv.json")
    save_checkpoint(res.experts.real, out / "theta_real.json")
    outputs += [out / "ref.json", out / "theta_adv.json", out / "theta_real.json"]
    for p in list(outputs):
        if p.suffix == ".csv" and (p.stem in plots.PLOTTERS or p.stem.startswith("finetune")):
            outputs.append(plots.plot_report(p, out))
    if res.theory:
        print(format_table(res.theory))
    return outputs


COMMANDS = {
    "corpus": (cmd_corpus, ()),
    "pretrain": (cmd_pretrain, ("corpus_dir",)),
    "finetune": (cmd_finetune, ("corpus_dir", "ref", "expert", "variant", "no_map_constraint")),
    "generate": (cmd_generate, ("corpus_dir", "ref", "adv", "real", "mode", "lam", "mu", "scenario", "phi", "base")),
    "sweep": (cmd_sweep, ("corpus_dir", "ref", "adv", "real", "landscape")),
    "evaluate": (cmd_evaluate, ("corpus_dir", "ref", "adv", "real", "generator", "ego", "mode", "lam", "mu",
                                "phi", "base")),
    "theory": (cmd_theory, ("checks",)),
    "closedloop": (cmd_closedloop, ("corpus_dir", "ref", "adv", "real")),
    "plot": (cmd_plot, ("report", "kind")),
    "pipeline": (cmd_pipeline, ()),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    common.add_argument("--workers", type=int, default=None, help="evaluation threads (default: all cores)")
    common.add_argument("--out", type=Path, default=None, help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--config", type=Path, default=None, help="JSON config or an earlier run's manifest")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a pipeline setting")

    parser = argparse.ArgumentParser(prog="steeradv", description="Steerable adversarial scenario generation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text)

    add("corpus", "generate and save the synthetic corpus")
    p = add("pretrain", "imitation-pretrain the reference policy")
    p.add_argument("--corpus-dir", dest="corpus_dir", default=None)
    p = add("finetune", "train preference experts from the reference policy")
    p.add_argument("--corpus-dir", dest="corpus_dir", default=None)
    p.add_argument("--ref", default=None)
    p.add_argument("--expert", choices=("adv", "real", "both"), default=None)
    p.add_argument("--variant", choices=("hgpo", "dpo"), default=None)
    p.add_argument("--no-map-constraint", dest="no_map_constraint", action="store_const", const=True, default=None)
    for name, text in (("generate", "generate steered adversaries"), ("evaluate", "open-loop evaluation")):
        p = add(name, text)
        p.add_argument("--corpus-dir", dest="corpus_dir", default=None)
        for ck in ("ref", "adv", "real"):
            p.add_argument(f"--{ck}", default=None)
        p.add_argument("--mode", choices=MODES, default=None)
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--mu", type=float, default=None)
        p.add_argument("--phi", action="append", default=None, metavar="LABEL=COEF")
        p.add_argument("--base", choices=("ref", "real", "adv", "interp"), default=None)
        if name == "generate":
            p.add_argument("--scenario", default=None)
        else:
            p.add_argument("--generator", choices=("replay", "steered"), default=None)
            p.add_argument("--ego", default=None)
    p = add("sweep", "Pareto sweep over mixing modes and lambdas")
    p.add_argument("--corpus-dir", dest="corpus_dir", default=None)
    for ck in ("ref", "adv", "real"):
        p.add_argument(f"--{ck}", default=None)
    p.add_argument("--landscape", action="store_const", const=True, default=None)
    p = add("theory", "numerical theory checks")
    p.add_argument("--checks", nargs="+", default=None)
    p = add("closedloop", "closed-loop ego training with the curriculum")
    p.add_argument("--corpus-dir", dest="corpus_dir", default=None)
    for ck in ("ref", "adv", "real"):
        p.add_argument(f"--{ck}", default=None)
    p = add("plot", "SVG figure from a CSV report")
    p.add_argument("--report", default=None)
    p.add_argument("--kind", choices=sorted(plots.PLOTTERS), default=None)
    add("pipeline", "the full reference run")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    fn, keys = COMMANDS[args.command]
    try:
        cfg = resolve(args, keys)
        outputs = fn(cfg)
        failed = cfg.pop("_failed", [])
        _finish(cfg, args.command, outputs)
    except UsageError as exc:
        parser.error(str(exc))
    except (FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"steeradv {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
