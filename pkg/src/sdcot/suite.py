"""The comparison suite: base, joint, every incremental mode, sequential rounds and a replay sweep.

Sub-runs form a small dependency graph per seed. Each one trains in its own
directory, evaluates its inference model and returns a summary row; a
consolidation step then writes the table, plot series and suite manifest.
Independent sub-runs may execute in parallel worker processes.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, RunManifest
from .data import filter_split
from .runs import make_dataset, run_eval, run_train, split_index_text

TABLE_ROWS = ("base", "joint", "freeze_add", "finetune", "sdcot_no_both", "sdcot_no_con", "sdcot_no_dis", "sdcot")
INCREMENTAL_ROWS = TABLE_ROWS[2:]
REPLAY_MODES = ("finetune", "sdcot")
SEQUENTIAL_MODE = "sdcot"
log = logging.getLogger(__name__)

RESULT_COLUMNS = ("seed", "row", "mode", "round", "replay_ratio", "n_exemplars",
                  "mAP_base", "mAP_novel", "mAP_all", "retention")


@dataclass
class Task:
    name: str
    mode: str
    deps: tuple = ()
    round_index: int = 0
    replay_ratio: float = 0.0
    base: str | None = None       # task whose checkpoint seeds this run
    novel_eval: tuple = ()        # novel classes to score
    row: str = ""


def seed_tasks(cfg: ExperimentConfig):
    """Task list for one seed, in a valid topological order."""
    novel = tuple(cfg.novel_classes)
    tasks = [Task("base", "base", novel_eval=novel, row="base"),
             Task("joint", "joint", novel_eval=novel, row="joint")]
    for m in INCREMENTAL_ROWS:
        tasks.append(Task(m, m, ("base",), base="base", novel_eval=novel, row=m))
    seen = ()
    prev = "base"
    for r, rnd in enumerate(cfg.sequential_rounds, 1):
        seen = seen + tuple(rnd)
        name = f"sequential_r{r}"
        tasks.append(Task(name, SEQUENTIAL_MODE, (prev,), round_index=r, base=prev, novel_eval=seen,
                          row="sequential" if r == len(cfg.sequential_rounds) else name))
        prev = name
    for ratio in cfg.replay_ratios:
        if ratio <= 0:
            continue
        for m in REPLAY_MODES:
            tasks.append(Task(f"replay_{m}_{ratio:g}", m, ("base",), replay_ratio=ratio, base="base",
                              novel_eval=novel, row="replay"))
    return tasks


def _execute(cfg_text, seed_dir, task: Task):
    cfg = ExperimentConfig.from_text(cfg_text)
    train, val = make_dataset(cfg)
    out = Path(seed_dir) / task.name
    base_ckpt = str(Path(seed_dir) / task.base / "checkpoint.ckpt") if task.base else None
    t0 = time.perf_counter()
    info = run_train(cfg, train, val, task.mode, out, base_ckpt=base_ckpt, round_index=task.round_index,
                     replay_ratio=task.replay_ratio, run_id=f"seed{cfg.seed}/{task.name}")
    report, eval_s = run_eval(cfg, val, info["checkpoint"], out / "report.csv",
                              base_classes=cfg.base_classes, novel_classes=task.novel_eval)
    man = RunManifest.read(out / "manifest.json")
    man.outputs += [str(out / "report.csv"), str(out / "report.txt")]
    man.timings["eval"] = eval_s
    man.write(out / "manifest.json")
    s = report.summary()
    return {
        "task": task.name, "seed": cfg.seed, "row": task.row, "mode": task.mode, "round": task.round_index,
        "replay_ratio": task.replay_ratio, "n_exemplars": info["n_exemplars"],
        "mAP_base": s["mAP_base"], "mAP_novel": s["mAP_novel"], "mAP_all": s["mAP_all"],
        "ap": report.ap, "seconds": time.perf_counter() - t0, "deps": list(task.deps),
    }


@dataclass
class SuiteResult:
    rows: list
    out_dir: Path
    wall_seconds: float
    workers: int
    config_hash: str
    files: dict = field(default_factory=dict)

    def by_seed(self):
        out = {}
        for r in self.rows:
            out.setdefault(r["seed"], {})[r["task"]] = r
        return out


def projected_makespan(rows, workers):
    """Wall time of greedy list scheduling of the measured sub-run durations on ``workers`` slots."""
    pending = {(r["seed"], r["task"]): r for r in rows}
    finish = {}
    slots = [0.0] * workers
    while pending:
        ready = [k for k, r in pending.items() if all((k[0], d) in finish for d in r["deps"])]
        ready.sort(key=lambda k: max([finish[(k[0], d)] for d in pending[k]["deps"]] or [0.0]))
        k = ready[0]
        r = pending.pop(k)
        avail = max([finish[(k[0], d)] for d in r["deps"]] or [0.0])
        i = int(np.argmin(slots))
        start = max(slots[i], avail)
        finish[k] = start + r["seconds"]
        slots[i] = finish[k]
    return max(finish.values()) if finish else 0.0


def run_suite(cfg: ExperimentConfig, seeds, out_dir, workers=1, epochs=None, base_epochs=None):
    """Run every sub-run for each seed and write the consolidated outputs.

    ``epochs``/``base_epochs`` override the incremental and base epoch counts
    (used for smoke runs).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if base_epochs is not None:
        cfg = cfg.with_overrides({"base_epochs": base_epochs,
                                  "base_milestones": tuple(int(base_epochs * f) for f in (2 / 3, 5 / 6))})
    if epochs is not None:
        cfg = cfg.with_overrides({"inc_epochs": epochs})
    t0 = time.perf_counter()
    jobs = {}
    for seed in seeds:
        scfg = cfg.with_overrides({"seed": seed})
        sdir = out / f"seed{seed}"
        sdir.mkdir(parents=True, exist_ok=True)
        (sdir / "config.cfg").write_text(scfg.to_text())
        train, val = make_dataset(scfg)
        (sdir / "splits.txt").write_text(split_index_text(scfg, train, val))
        for t in seed_tasks(scfg):
            jobs[(seed, t.name)] = (scfg.to_text(), str(sdir), t)
    rows = _run_graph(jobs, workers)
    wall = time.perf_counter() - t0
    result = SuiteResult(rows, out, wall, workers, cfg.hash())
    _consolidate(cfg, result)
    return result


def _log_row(r):
    log.info("seed %s %-22s base %.3f novel %.3f all %.3f (%.0f s)", r["seed"], r["task"],
             r["mAP_base"], r["mAP_novel"] if r["mAP_novel"] == r["mAP_novel"] else -1, r["mAP_all"], r["seconds"])


def _run_graph(jobs, workers):
    done, rows = set(), []
    pending = dict(jobs)
    if workers <= 1:
        while pending:
            key = next(k for k, (_, _, t) in pending.items() if all((k[0], d) in done for d in t.deps))
            text, sdir, t = pending.pop(key)
            rows.append(_execute(text, sdir, t))
            done.add(key)
            _log_row(rows[-1])
        return rows
    with ProcessPoolExecutor(max_workers=workers) as pool:
        running = {}
        while pending or running:
            for key in [k for k, (_, _, t) in pending.items() if all((k[0], d) in done for d in t.deps)]:
                text, sdir, t = pending.pop(key)
                running[pool.submit(_execute, text, sdir, t)] = key
            finished, _ = wait(list(running), return_when=FIRST_COMPLETED)
            for fut in finished:
                key = running.pop(fut)
                rows.append(fut.result())
                done.add(key)
                _log_row(rows[-1])
    order = {k: i for i, k in enumerate(jobs)}
    rows.sort(key=lambda r: order[(r["seed"], r["task"])])
    return rows


# --- consolidation --------------------------------------------------------
def _f(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"


def _add_retention(rows):
    base = {r["seed"]: r["mAP_base"] for r in rows if r["task"] == "base"}
    for r in rows:
        b = base.get(r["seed"])
        r["retention"] = r["mAP_base"] / b if b else float("nan")


def _csv(header_hash, columns, records):
    buf = io.StringIO()
    buf.write(f"# config_hash={header_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for rec in records:
        w.writerow([_f(rec[c]) if isinstance(rec[c], float) else rec[c] for c in columns])
    return buf.getvalue()


def _consolidate(cfg, result: SuiteResult):
    rows = result.rows
    _add_retention(rows)
    out = result.out_dir
    h = result.config_hash
    results_csv = out / "suite_results.csv"
    results_csv.write_text(_csv(h, RESULT_COLUMNS, rows))

    # comparison table: mean and std over seeds for each table row
    table = []
    seeds = sorted({r["seed"] for r in rows})
    for name in TABLE_ROWS + ("sequential",):
        sel = [r for r in rows if r["task"] == name or (name == "sequential" and r["row"] == "sequential")]
        if not sel:
            continue
        rec = {"row": name, "n_seeds": len(sel)}
        for k in ("mAP_base", "mAP_novel", "mAP_all", "retention"):
            vals = np.array([r[k] for r in sel], dtype=float)
            rec[f"{k}_mean"] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
            rec[f"{k}_std"] = float(np.nanstd(vals)) if np.isfinite(vals).any() else float("nan")
        table.append(rec)
    cols = ("row", "n_seeds") + tuple(f"{k}_{s}" for k in ("mAP_base", "mAP_novel", "mAP_all", "retention")
                                      for s in ("mean", "std"))
    table_csv = out / "comparison_table.csv"
    table_csv.write_text(_csv(h, cols, table))

    # replay sweep series (ratio 0 taken from the main runs)
    series = []
    for seed in seeds:
        scfg = cfg.with_overrides({"seed": seed})
        n_base = len(filter_split(make_dataset(scfg)[0], [scfg.catalog().index(c) for c in scfg.base_classes]))
        for m in REPLAY_MODES:
            for ratio in cfg.replay_ratios:
                task = m if ratio <= 0 else f"replay_{m}_{ratio:g}"
                r = next((x for x in rows if x["seed"] == seed and x["task"] == task), None)
                if r is None:
                    continue
                series.append({"seed": seed, "mode": m, "replay_ratio": float(ratio),
                               "n_exemplars": r["n_exemplars"], "n_base_scenes": n_base,
                               "label": f"{ratio * 100:g}% ({r['n_exemplars']})",
                               "mAP_base": r["mAP_base"], "mAP_novel": r["mAP_novel"], "mAP_all": r["mAP_all"]})
    replay_csv = out / "replay_series.csv"
    replay_csv.write_text(_csv(h, ("seed", "mode", "replay_ratio", "label", "n_exemplars", "n_base_scenes",
                                   "mAP_base", "mAP_novel", "mAP_all"), series))

    # per-class AP for every sub-run, long format
    per_class = [{"seed": r["seed"], "task": r["task"], "class": c, "ap": v}
                 for r in rows for c, v in r["ap"].items()]
    ap_csv = out / "per_class_ap.csv"
    ap_csv.write_text(_csv(h, ("seed", "task", "class", "ap"),
                           [{**p, "ap": "" if p["ap"] is None else float(p["ap"])} for p in per_class]))

    # training curves of every sub-run, long format (plot-ready)
    curves = io.StringIO()
    curves.write(f"# config_hash={h}\n")
    first = True
    for r in rows:
        log = (out / f"seed{r['seed']}" / r["task"] / "log.csv").read_text().splitlines()
        body = [ln for ln in log if not ln.startswith("#")]
        if first:
            curves.write("seed,task," + body[0] + "\n")
            first = False
        for ln in body[1:]:
            curves.write(f"{r['seed']},{r['task']},{ln}\n")
    curves_csv = out / "training_curves.csv"
    curves_csv.write_text(curves.getvalue())

    result.files = {"results": results_csv, "table": table_csv, "replay": replay_csv,
                    "per_class": ap_csv, "curves": curves_csv}
    man = RunManifest(f"suite/{'-'.join(map(str, seeds))}", h, "suite")
    man.outputs = [str(p) for p in result.files.values()]
    man.timings = {
        "wall": result.wall_seconds,
        "serial_sum": float(sum(r["seconds"] for r in rows)),
        "projected_4_workers": projected_makespan(rows, 4),
        **{f"seed{r['seed']}/{r['task']}": r["seconds"] for r in rows},
    }
    sub = {}
    for r in rows:
        p = out / f"seed{r['seed']}" / r["task"] / "manifest.json"
        sub[f"seed{r['seed']}/{r['task']}"] = json.loads(p.read_text())
    doc = json.loads(man.to_json())
    doc["workers"] = result.workers
    doc["cpu_count"] = os.cpu_count()
    doc["sub_runs"] = sub
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    result.files["manifest"] = out / "manifest.json"


def format_table(result: SuiteResult):
    """Human-readable Base/Novel/All summary over seeds."""
    text = result.files["table"].read_text().splitlines()
    reader = csv.DictReader([ln for ln in text if not ln.startswith("#")])
    lines = [f"{'method':<16} {'Base':>12} {'Novel':>12} {'All':>12} {'Retention':>10}"]
    for rec in reader:
        cell = lambda k: "--" if not rec[f"{k}_mean"] else f"{100 * float(rec[k + '_mean']):5.1f}±{100 * float(rec[k + '_std'] or 0):4.1f}"  # noqa: E501,E731
        ret = "--" if not rec["retention_mean"] else f"{float(rec['retention_mean']):.2f}"
        lines.append(f"{rec['row']:<16} {cell('mAP_base'):>12} {cell('mAP_novel'):>12} {cell('mAP_all'):>12} {ret:>10}")
    return "\n".join(lines)
