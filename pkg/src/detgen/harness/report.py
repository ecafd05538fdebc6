"""Offline report bundle: CSV tables plus small hand-written SVG figures."""
import csv
import json
import shutil
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..errors import ConfigError
from ..rewardcore import REWARD_DIMS
from .runs import load_checkpoint, read_jsonl, verify_manifest

PALETTE = ("#1b6ca8", "#d1495b", "#edae49", "#00798c", "#66a182", "#8d6a9f")


def heat_color(v):
    """Blue (0) to red (1); the red channel carries the value in 1/255 steps."""
    v = min(max(float(v), 0.0), 1.0)
    return f"rgb({round(255 * v)},64,{round(255 * (1 - v))})"


def color_value(fill):
    return int(fill[4:].split(",")[0]) / 255.0


def svg_heatmap(entries, rates, title="win rate (row beats column)"):
    n = len(entries)
    cell, pad = 56, 90
    w = pad + n * cell + 20
    h = pad + n * cell + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">',
           f'<text x="{pad}" y="18" font-size="13">{escape(title)}</text>']
    for j, e in enumerate(entries):
        out.append(f'<text x="{pad + j * cell + cell / 2}" y="{pad - 8}" text-anchor="middle">{escape(e)}</text>')
    for i, a in enumerate(entries):
        y = pad + i * cell
        out.append(f'<text x="{pad - 6}" y="{y + cell / 2 + 4}" text-anchor="end">{escape(a)}</text>')
        for j in range(n):
            x = pad + j * cell
            v = rates[i][j]
            if v is None or np.isnan(v):
                out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="#eeeeee" data-row="{i}" data-col="{j}"/>')
                continue
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{heat_color(v)}" '
                       f'data-row="{i}" data-col="{j}" data-value="{v!r}"/>')
            out.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" fill="white">{v:.2f}</text>')
    out.append("</svg>")
    return "\n".join(out)


def _scale(values, lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return a + (np.asarray(values, dtype=float) - lo) / span * (b - a)


def svg_lines(series, title, xlabel="step"):
    """``series``: name -> (xs, ys)."""
    w, h, m = 520, 300, 48
    xs_all = np.concatenate([np.asarray(x, float) for x, _ in series.values()]) if series else np.zeros(1)
    ys_all = np.concatenate([np.asarray(y, float) for _, y in series.values()]) if series else np.zeros(1)
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = float(ys_all.min()), float(ys_all.max())
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">',
           f'<text x="{m}" y="18" font-size="13">{escape(title)}</text>',
           f'<line x1="{m}" y1="{h - m}" x2="{w - 10}" y2="{h - m}" stroke="black"/>',
           f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>',
           f'<text x="{w / 2}" y="{h - 12}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="{m - 4}" y="{h - m}" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{m - 4}" y="{m + 4}" text-anchor="end">{y1:.3g}</text>']
    for k, (name, (xs, ys)) in enumerate(series.items()):
        px = _scale(xs, x0, x1, m, w - 10)
        py = _scale(ys, y0, y1, h - m, m)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        c = PALETTE[k % len(PALETTE)]
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{w - 150}" y="{m + 14 * k}" fill="{c}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out)


def svg_scatter(groups, title):
    """``groups``: name -> (n, 2) array."""
    w = h = 420
    m = 30
    pts = np.concatenate(list(groups.values()))
    lo, hi = float(pts.min()), float(pts.max())
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">',
           f'<text x="{m}" y="18" font-size="13">{escape(title)}</text>']
    for k, (name, x) in enumerate(groups.items()):
        c = PALETTE[k % len(PALETTE)]
        px = _scale(x[:, 0], lo, hi, m, w - m)
        py = _scale(x[:, 1], lo, hi, h - m, m)
        out.extend(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="1.6" fill="{c}" fill-opacity="0.6"/>' for a, b in zip(px, py))
        out.append(f'<text x="{w - 120}" y="{m + 14 * k}" fill="{c}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out)


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    entries = rows[0][1:]
    rates = [[float(v) if v else float("nan") for v in r[1:]] for r in rows[1:]]
    return entries, rates


def curves_rows(records):
    rows = []
    for r in records:
        row = {"stage": r["stage"], "step": r["step"]}
        row.update({f"reward_{k}": r["mean_reward"][k] for k in REWARD_DIMS})
        for k in ("mean_advantage_abs", "clip_fraction", "mean_kl", "loss"):
            row[k] = r[k]
        rows.append(row)
    return rows


def _write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _scatter_groups(run, n_per_class=40):
    from ..flowgen import sample_ode_batch
    from ..numkit import Rng
    from ..synthworld import sample_real_batch, user_prompt_tokens

    groups = {}
    gen = run / "generator.json"
    if not gen.exists():
        return groups
    flow = load_checkpoint(gen, "flow_model")
    world = flow.world
    rng = Rng(0).child("report_scatter")
    groups["real"] = sample_real_batch(world, n_per_class * world.num_classes, rng.child("real")).x
    k = np.repeat(np.arange(world.num_classes), n_per_class)
    x_T = rng.child("x_T").normal(size=(len(k), world.dim))
    tokens = user_prompt_tokens(world, k)
    groups["before GRPO"] = sample_ode_batch(flow, tokens, x_T)
    if (run / "generator_stage2.json").exists():
        groups["after GRPO"] = sample_ode_batch(load_checkpoint(run / "generator_stage2.json", "flow_model"), tokens, x_T)
    return groups


def build_report(run_dirs, out_dir):
    """Write the bundle for ``run_dirs`` into ``out_dir``; returns the summary dict."""
    run_dirs = [Path(p) for p in run_dirs]
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    for p in run_dirs:
        problems = verify_manifest(p)
        if problems:
            raise ConfigError(f"run {p} failed manifest verification: {problems[0]}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"runs": [], "gaps": [], "files": []}
    names = {}
    for p in run_dirs:
        name = p.name or "run"
        names[name] = names.get(name, 0) + 1
        if names[name] > 1:
            name = f"{name}_{names[name]}"
        summary["runs"].append({"name": name, "path": str(p)})

        for stage in ("stage1", "stage2"):
            mp = p / f"metrics_{stage}.jsonl"
            if not mp.exists():
                summary["gaps"].append(f"{name}: no {stage} metrics")
                continue
            recs = read_jsonl(mp)
            if not recs:
                summary["gaps"].append(f"{name}: empty {stage} metrics")
                continue
            rows = curves_rows(recs)
            _write_csv(out / f"{name}_curves_{stage}.csv", rows)
            steps = [r["step"] for r in rows]
            fused = {f"reward {k}": (steps, [r[f"reward_{k}"] for r in rows]) for k in REWARD_DIMS}
            (out / f"{name}_rewards_{stage}.svg").write_text(svg_lines(fused, f"{name} {stage} mean rewards"))
            (out / f"{name}_loss_{stage}.svg").write_text(svg_lines({"loss": (steps, [r["loss"] for r in rows])}, f"{name} {stage} loss"))
            summary["files"] += [f"{name}_curves_{stage}.csv", f"{name}_rewards_{stage}.svg", f"{name}_loss_{stage}.svg"]

        bench = p / "bench"
        if (bench / "winmatrix.csv").exists():
            entries, rates = read_matrix_csv(bench / "winmatrix.csv")
            shutil.copyfile(bench / "winmatrix.csv", out / f"{name}_winrates.csv")
            (out / f"{name}_winmatrix.svg").write_text(svg_heatmap(entries, rates))
            summary["files"] += [f"{name}_winrates.csv", f"{name}_winmatrix.svg"]
            for extra in ("detector_scores.csv", "leaderboard.csv"):
                if (bench / extra).exists():
                    shutil.copyfile(bench / extra, out / f"{name}_{extra}")
                    summary["files"].append(f"{name}_{extra}")
        else:
            summary["gaps"].append(f"{name}: no arena results")

        groups = _scatter_groups(p)
        if groups:
            (out / f"{name}_scatter.svg").write_text(svg_scatter(groups, f"{name}: real vs generated"))
            summary["files"].append(f"{name}_scatter.svg")
        else:
            summary["gaps"].append(f"{name}: no generator checkpoint for scatter")

        for ab in ("reward_swap.csv", "stage_wise.csv"):
            if (p / "ablate" / ab).exists():
                shutil.copyfile(p / "ablate" / ab, out / f"{name}_{ab}")
                summary["files"].append(f"{name}_{ab}")
    with open(out / "report.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
