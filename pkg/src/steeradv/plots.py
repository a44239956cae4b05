"""SVG figures drawn from the CSV reports.

Each function takes the path of a CSV written by the pipeline, so every
figure can be regenerated from disk. Output is byte-stable: the SVG date
stamp is dropped and element ids use a fixed hash salt.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "steeradv"


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v):
    return float(v) if v not in ("", None) else float("nan")


def _save(fig, out) -> Path:
    out = Path(out)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out


def pareto_front(sweep_csv, out) -> Path:
    """Attack success rate against the realism score (mean -P_real), one line per mode."""
    rows = read_rows(sweep_csv)
    fig, ax = plt.subplots(figsize=(5, 4))
    for mode in dict.fromkeys(r["mode"] for r in rows):
        sel = [r for r in rows if r["mode"] == mode]
        ax.plot([_num(r["attack_success_rate"]) for r in sel], [-_num(r["mean_p_real"]) for r in sel],
                marker="o", label=mode)
    ax.set_xlabel("attack success rate")
    ax.set_ylabel("realism score (-mean P_real)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out)


def reward_curve(landscape_csv, out) -> Path:
    rows = read_rows(landscape_csv)
    lam = [_num(r["lambda"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    for key, style in (("reward_adv", "-"), ("chord_adv", "--"), ("reward_real", "-"), ("chord_real", "--")):
        ax.plot(lam, [_num(r[key]) for r in rows], style, label=key)
    ax.set_xlabel("lambda")
    ax.set_ylabel("expected reward")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out)


def landscape_plane(plane_csv, out) -> Path:
    rows = read_rows(plane_csv)
    a = sorted({_num(r["a_real"]) for r in rows})
    b = sorted({_num(r["b_adv"]) for r in rows})
    grid = {(_num(r["a_real"]), _num(r["b_adv"])): _num(r["reward"]) for r in rows}
    z = [[grid[(x, y)] for x in a] for y in b]
    fig, ax = plt.subplots(figsize=(5, 4))
    mesh = ax.pcolormesh(a, b, z, shading="nearest")
    fig.colorbar(mesh, ax=ax, label="user reward")
    ax.plot([0, 1, 0], [0, 0, 1], "wo")
    for (x, y), name in (((0, 0), "ref"), ((1, 0), "real"), ((0, 1), "adv")):
        ax.annotate(name, (x, y), color="white", xytext=(4, 4), textcoords="offset points")
    ax.set_xlabel("coefficient on the realism vector")
    ax.set_ylabel("coefficient on the adversarial vector")
    fig.tight_layout()
    return _save(fig, out)


def pca_scatter(pca_csv, out) -> Path:
    rows = read_rows(pca_csv)
    fig, ax = plt.subplots(figsize=(5, 4))
    xs, ys = [_num(r["pc1"]) for r in rows], [_num(r["pc2"]) for r in rows]
    ax.scatter(xs, ys)
    for r, x, y in zip(rows, xs, ys):
        ax.annotate(r["model"], (x, y), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    fig.tight_layout()
    return _save(fig, out)


def closed_loop_curves(history_csv, out) -> Path:
    rows = [r for r in read_rows(history_csv) if r["iteration"] != "initial"]
    it = [int(r["iteration"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(it, [_num(r["adv_collision_rate"]) for r in rows], marker="o", label="collision rate (adversarial)")
    ax.plot(it, [_num(r["benign_completion"]) for r in rows], marker="s", label="completion (benign)")
    ax.plot(it, [_num(r["p_adv"]) for r in rows], ":", label="p_adv")
    ax.set_xlabel("iteration")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out)


def training_curve(history_csv, out, column: str = "loss") -> Path:
    rows = read_rows(history_csv)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([int(r["epoch"]) for r in rows], [_num(r[column]) for r in rows])
    ax.set_xlabel("epoch")
    ax.set_ylabel(column)
    fig.tight_layout()
    return _save(fig, out)


PLOTTERS = {
    "sweep": pareto_front,
    "landscape": reward_curve,
    "landscape_plane": landscape_plane,
    "landscape_pca": pca_scatter,
    "closed_loop": closed_loop_curves,
    "finetune": training_curve,
}


def plot_report(csv_path, out_dir=None, kind: str | None = None) -> Path:
    """Pick the plotter from ``kind`` or the file stem and write ``<stem>.svg``."""
    csv_path = Path(csv_path)
    stem = csv_path.stem
    if kind is None:
        kind = stem if stem in PLOTTERS else ("finetune" if stem.startswith("finetune") else None)
    if kind not in PLOTTERS:
        raise ValueError(f"no plot for report {csv_path.name!r}; choose one of {sorted(PLOTTERS)}")
    out = Path(out_dir) if out_dir is not None else csv_path.parent
    out.mkdir(parents=True, exist_ok=True)
    return PLOTTERS[kind](csv_path, out / f"{stem}.svg")
