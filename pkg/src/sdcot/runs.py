"""Single experiment steps shared by the command line and the suite runner.

Each step reads its inputs, writes its artifacts into one directory and
returns a small summary dict. Every artifact carries the config hash.
"""
from __future__ import annotations

import csv
import io
import math
import time
from pathlib import Path

from .config import ExperimentConfig, RunManifest
from .cotraining import MODES, items_for, train_base, train_incremental
from .data import (
    filter_split,
    generate_dataset,
    read_scene,
    sample_exemplars,
    write_scene,
)
from .detector import load_checkpoint, save_checkpoint
from .evaluation import evaluate
from .numerics import RngStream

SPLITS_HEADER = "# SDCOT-SPLITS v1"
LOG_COLUMNS = ("epoch", "lr", "total", "sup", "dis", "con", "w_dis", "w_con",
               "vote", "objectness", "box", "semantic", "n_pseudo")


class ArgumentError(ValueError):
    """Bad combination of run inputs."""


# --- datasets -------------------------------------------------------------
def make_dataset(cfg: ExperimentConfig):
    """In-memory (train, val) scenes for ``cfg.seed``."""
    return generate_dataset(cfg.catalog(), cfg.n_train, cfg.n_val, cfg.seed, cfg.scene_params())


def split_index_text(cfg, train, val):
    """Scene ids per split: the base set, the batch novel set, each sequential round, val."""
    cat = cfg.catalog()
    ids = lambda scenes: " ".join(s.scene_id for s in scenes)  # noqa: E731
    lines = [f"{SPLITS_HEADER} config_hash={cfg.hash()}"]
    lines.append(f"base [{','.join(cfg.base_classes)}]: {ids(filter_split(train, [cat.index(c) for c in cfg.base_classes]))}")
    lines.append(f"novel [{','.join(cfg.novel_classes)}]: {ids(filter_split(train, [cat.index(c) for c in cfg.novel_classes]))}")
    for r, rnd in enumerate(cfg.sequential_rounds, 1):
        lines.append(f"round{r} [{','.join(rnd)}]: {ids(filter_split(train, [cat.index(c) for c in rnd]))}")
    lines.append(f"val: {ids(val)}")
    return "\n".join(lines) + "\n"


def cmd_gen_data(cfg: ExperimentConfig, out_dir):
    out = Path(out_dir)
    t0 = time.perf_counter()
    train, val = make_dataset(cfg)
    scene_dir = out / "scenes"
    scene_dir.mkdir(parents=True, exist_ok=True)
    names = cfg.catalog().names
    for s in train + val:
        write_scene(scene_dir / f"{s.scene_id}.scene", s, names)
    (out / "splits.txt").write_text(split_index_text(cfg, train, val))
    (out / "config.cfg").write_text(cfg.to_text())
    man = RunManifest(f"gen-data/seed{cfg.seed}", cfg.hash(), "gen-data")
    man.outputs = [str(scene_dir), str(out / "splits.txt"), str(out / "config.cfg")]
    man.timings["generate"] = time.perf_counter() - t0
    man.write(out / "manifest.json")
    return {"n_train": len(train), "n_val": len(val), "dir": str(out)}


def load_dataset(data_dir, cfg: ExperimentConfig):
    """Scenes written by :func:`cmd_gen_data`, in split-index order."""
    data_dir = Path(data_dir)
    index = data_dir / "splits.txt"
    if not index.exists():
        raise FileNotFoundError(f"{index} not found (run gen-data first)")
    names = cfg.catalog().names
    scene_dir = data_dir / "scenes"
    train_ids = sorted(p.stem for p in scene_dir.glob("train_*.scene"))
    val_ids = sorted(p.stem for p in scene_dir.glob("val_*.scene"))
    if not train_ids or not val_ids:
        raise FileNotFoundError(f"no scene files under {scene_dir}")
    train = [read_scene(scene_dir / f"{i}.scene", names) for i in train_ids]
    val = [read_scene(scene_dir / f"{i}.scene", names) for i in val_ids]
    return train, val


# --- training -------------------------------------------------------------
def _log_csv(rows, config_hash):
    out = io.StringIO()
    out.write(f"# config_hash={config_hash}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r.get("epoch", 0)] + [f"{float(r.get(k, 0.0)):.9g}" for k in LOG_COLUMNS[1:]])
    return out.getvalue()


def _mean_size(cfg):
    return cfg.catalog().mean_size()


def run_train(cfg: ExperimentConfig, train, val, mode, out_dir, base_ckpt=None, round_index=0,
              replay_ratio=None, epochs=None, run_id=None, inputs=()):
    """Train one model and write ``checkpoint.ckpt``, ``log.csv``, ``manifest.json``.

    ``round_index`` 0 adds every novel class at once; ``r >= 1`` adds
    sequential round ``r`` on top of ``base_ckpt`` (the previous round for
    ``r >= 2``).
    """
    if mode not in MODES:
        raise ArgumentError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    cat = cfg.catalog()
    names = cat.names
    tcfg = cfg.train_config()
    replay_ratio = cfg.replay_ratio if replay_ratio is None else replay_ratio
    meta = {"config_hash": cfg.hash(), "mode": mode, "seed": cfg.seed, "round": round_index,
            "replay_ratio": replay_ratio}
    log_rows = []
    n_exemplars = 0

    if mode in ("base", "joint"):
        classes = list(cfg.base_classes) + (list(cfg.novel_classes) if mode == "joint" else [])
        scenes = filter_split(train, [cat.index(c) for c in classes])
        items = items_for(scenes, classes, names)
        model, log_rows = train_base(cfg.detector_config(len(classes)), items, classes, _mean_size(cfg), tcfg,
                                     RngStream(cfg.seed, f"train/{mode}"), epochs=epochs)
        meta.update(base_classes=list(cfg.base_classes),
                    novel_classes=list(cfg.novel_classes) if mode == "joint" else [])
        models, inference = {"student": model}, "student"
    else:
        if base_ckpt is None:
            raise ArgumentError(f"mode {mode!r} needs a base checkpoint")
        if not Path(base_ckpt).exists():
            raise ArgumentError(f"base checkpoint {base_ckpt} does not exist")
        prev_models, _, prev_meta = load_checkpoint(base_ckpt)
        base = prev_models["student"]
        if round_index == 0:
            novel = list(cfg.novel_classes)
        elif 1 <= round_index <= len(cfg.sequential_rounds):
            novel = list(cfg.sequential_rounds[round_index - 1])
        else:
            raise ArgumentError(f"round must lie in 0..{len(cfg.sequential_rounds)}")
        clash = set(novel) & set(base.class_names)
        if clash:
            raise ArgumentError(f"classes {sorted(clash)} are already known to the base checkpoint")
        classes = list(base.class_names) + novel
        items = items_for(filter_split(train, [cat.index(c) for c in novel]), classes, names)
        if replay_ratio > 0:
            base_ids = [cat.index(c) for c in cfg.base_classes]
            d_base = filter_split(train, base_ids)
            ex = sample_exemplars(d_base, replay_ratio, RngStream(cfg.seed, f"replay/{replay_ratio!r}"), base_ids)
            n_exemplars = len(ex)
            items = items + items_for(ex, classes, names, replay=True)
        res = train_incremental(base, items, novel, mode, tcfg, RngStream(cfg.seed, f"train/incremental/{round_index}"),
                                epochs=epochs)
        log_rows = res.log
        models, inference = res.models(), res.inference_key
        meta.update(base_classes=list(prev_meta.get("base_classes", cfg.base_classes)),
                    novel_classes=list(prev_meta.get("novel_classes", [])) + novel)
    meta["n_exemplars"] = n_exemplars
    ckpt = out / "checkpoint.ckpt"
    save_checkpoint(ckpt, models, inference, meta)
    (out / "log.csv").write_text(_log_csv(log_rows, cfg.hash()))
    (out / "config.cfg").write_text(cfg.to_text())
    man = RunManifest(run_id or f"train/{mode}", cfg.hash(), f"train --mode {mode}")
    for p in inputs:
        man.add_input(p)
    if base_ckpt is not None:
        man.add_input(base_ckpt)
    man.outputs = [str(ckpt), str(out / "log.csv"), str(out / "config.cfg")]
    man.timings["train"] = time.perf_counter() - t0
    man.write(out / "manifest.json")
    return {"checkpoint": str(ckpt), "n_exemplars": n_exemplars, "seconds": man.timings["train"]}


# --- evaluation -----------------------------------------------------------
def model_for_eval(ckpt_path):
    models, inference, meta = load_checkpoint(ckpt_path)
    return models[inference], meta


def run_eval(cfg: ExperimentConfig, val, ckpt_path, out_csv, base_classes=None, novel_classes=None):
    """Evaluate a checkpoint's inference model; writes the CSV and a text table next to it."""
    ckpt_path = Path(ckpt_path)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint {ckpt_path} not found")
    model, meta = model_for_eval(ckpt_path)
    base_classes = list(meta.get("base_classes", cfg.base_classes)) if base_classes is None else list(base_classes)
    novel_classes = list(meta.get("novel_classes", [])) if novel_classes is None else list(novel_classes)
    names = cfg.catalog().names
    for c in base_classes + novel_classes:
        if c not in names:
            raise ArgumentError(f"unknown class {c!r} in partition")
    if set(base_classes) & set(novel_classes):
        raise ArgumentError("base and novel partitions overlap")
    t0 = time.perf_counter()
    report = evaluate(model, val, names, base_classes, novel_classes, cfg.eval_seed,
                      cfg.eval_iou, cfg.eval_nms_iou, cfg.score_floor)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    out_csv.write_text(report.to_csv(cfg.hash()))
    out_csv.with_suffix(".txt").write_text(report.table() + "\n")
    return report, time.perf_counter() - t0


def exemplar_count(n_base_scenes, ratio):
    return 0 if ratio <= 0 else min(n_base_scenes, math.ceil(ratio * n_base_scenes))


__all__ = [
    "ArgumentError", "cmd_gen_data", "exemplar_count", "load_dataset", "make_dataset", "run_eval",
    "run_train", "split_index_text"
]
