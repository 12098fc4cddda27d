"""Report files: JSON (the contract), CSV rows, a text table and static PNG plots."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trainer import EvalReport  # noqa: E402

LEVELS = ("1", "2", "3")


def _png_meta(meta: Mapping | None = None) -> dict:
    # no Software tag: fixed metadata keeps PNG bytes reproducible
    out = {"Software": None}
    if meta:
        out["Description"] = " ".join(f"{k}={v}" for k, v in sorted(meta.items()))
    return out


def _header(meta: Mapping) -> str:
    return "# " + " ".join(f"{k}={v}" for k, v in sorted(meta.items()))


def write_json(path: Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def comparison_table(reports: Mapping[str, EvalReport]) -> str:
    head = f"{'model':<16}{'PDMS':>8}{'L1':>8}{'L2':>8}{'L3':>8}{'think':>8}{'think L1':>10}{'think L3':>10}{'tokens':>8}"
    lines = [head, "-" * len(head)]
    for name, rep in reports.items():
        s = rep.summary
        lvl = s["pdms_by_level"]
        think = s["think_rate_by_level"]

        def f(v, w=8):
            return f"{v:>{w}.4f}" if v is not None else f"{'-':>{w}}"

        lines.append(f"{name:<16}{f(s['pdms'])}" + "".join(f(lvl.get(l)) for l in LEVELS)
                     + f(s["think_rate"]) + f(think.get("1"), 10) + f(think.get("3"), 10)
                     + f"{s['token_cost']:>8.2f}")
    return "\n".join(lines)


def write_rows_csv(path: Path, reports: Mapping[str, EvalReport], meta: Mapping = ()) -> None:
    """Per-scene rows; a leading ``#`` line carries the run metadata."""
    rows = [{"model": name, **row} for name, rep in reports.items() for row in rep.rows]
    columns = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write(_header(meta) + "\n")
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def _grouped_bars(ax, reports: Mapping[str, EvalReport], key: str, ylabel: str):
    names = list(reports)
    width = 0.8 / max(len(names), 1)
    for i, name in enumerate(names):
        vals = [reports[name].summary[key].get(l) or 0.0 for l in LEVELS]
        xs = [j + (i - (len(names) - 1) / 2) * width for j in range(len(LEVELS))]
        ax.bar(xs, vals, width, label=name)
    ax.set_xticks(range(len(LEVELS)), [f"Level {l}" for l in LEVELS])
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)


def plot_think_ratio(path: Path, reports: Mapping[str, EvalReport], meta: Mapping = ()) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    _grouped_bars(ax, reports, "think_rate_by_level", "think ratio")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, metadata=_png_meta(meta))
    plt.close(fig)


def plot_pdms_by_level(path: Path, reports: Mapping[str, EvalReport], meta: Mapping = ()) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    _grouped_bars(ax, reports, "pdms_by_level", "mean PDMS")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, metadata=_png_meta(meta))
    plt.close(fig)


def write_eval_bundle(out: Path, reports: Mapping[str, EvalReport], meta: dict, plots: bool = True) -> list[Path]:
    """Write report.json, rows.csv, report.txt and (optionally) two PNGs; return the paths."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {**meta, "models": {name: rep.to_json() for name, rep in reports.items()}}
    paths = [out / "report.json", out / "rows.csv", out / "report.txt"]
    write_json(paths[0], payload)
    write_rows_csv(paths[1], reports, meta)
    paths[2].write_text(f"{_header(meta)}\n{comparison_table(reports)}\n")
    if plots:
        paths += [out / "think_ratio.png", out / "pdms_by_level.png"]
        plot_think_ratio(paths[3], reports, meta)
        plot_pdms_by_level(paths[4], reports, meta)
    return paths


def plot_scene(path: Path, scene, trajectories: Mapping[str, object] = (), meta: Mapping = ()) -> None:
    """Top-down view of a scene with optional ego-frame trajectories overlaid."""
    from .core import to_world
    from .geometry import rect_corners

    cfg = scene.config
    fig, ax = plt.subplots(figsize=(6, 6))
    corridor = scene.corridor
    for edge in (corridor.left_boundary, corridor.right_boundary):
        ax.plot(edge[:, 0], edge[:, 1], color="0.4", lw=1)
    ax.plot(corridor.centerline[:, 0], corridor.centerline[:, 1], color="0.7", lw=0.8, ls="--")
    ego = rect_corners(scene.ego.position, scene.ego.heading, cfg.ego_length, cfg.ego_width)
    ax.fill(ego[:, 0], ego[:, 1], color="tab:blue", alpha=0.6, label="ego")
    crit = scene.critical
    flagged = {crit.cipo1, *crit.cipo2, *crit.motion_interaction}
    for agent in scene.agents:
        c = rect_corners(agent.position, agent.heading, agent.length, agent.width)
        ax.fill(c[:, 0], c[:, 1], color="tab:red" if agent.id in flagged else "0.5", alpha=0.6)
        ax.plot(agent.future_track[:, 0], agent.future_track[:, 1], color="0.5", lw=0.6)
        ax.annotate(str(agent.id), agent.position, fontsize=7)
    for name, traj in dict(trajectories).items():
        pts = to_world(traj.waypoints, scene.ego.position, scene.ego.heading)
        ax.plot(pts[:, 0], pts[:, 1], marker=".", lw=1.2, label=name)
    ax.set_aspect("equal")
    ax.set_xlim(-15, 90)
    ax.set_ylim(-50, 50)
    ax.legend(fontsize=8, loc="upper left")
    ax.set_title(f"seed {scene.seed}  level {int(scene.complexity)}  {scene.command.value}")
    fig.tight_layout()
    fig.savefig(path, metadata=_png_meta(meta))
    plt.close(fig)
