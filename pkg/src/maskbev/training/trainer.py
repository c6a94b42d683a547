"""Training loop: per-scene forward/backward, batch accumulation, AdamW, per-epoch logging and checkpoints."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import backward, checkpoint, no_grad
from ..config import RunConfig
from ..evaluation import evaluate, observe
from ..model import MaskBEV
from ..scenes import GridSpec, load_scene, read_manifest
from .losses import total_loss
from .optim import AdamW, clip_grad_norm, warmup_cosine

CSV_HEADER = ["epoch", "step", "l_total", "l_cls", "l_box", "l_seg", "miou", "ap@1", "ap@2"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: MaskBEV
    rows: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    seconds: float = 0.0


def load_split(root, split: str, limit: int | None = None):
    manifest = read_manifest(root)
    ids = manifest.split(split)
    if limit is not None:
        ids = ids[:limit]
    return manifest, [load_scene(root, i) for i in ids]


def check_grid(manifest, grid: GridSpec) -> None:
    data_grid = GridSpec.from_json(manifest.generator["grid"])
    if data_grid != grid:
        raise ValueError(f"dataset grid {data_grid} does not match config grid {grid}")


def probe_loss(model: MaskBEV, scenes, cfg: RunConfig) -> dict:
    """Mean loss components over a fixed set of scenes, without recording a tape."""
    acc = np.zeros(4)
    with no_grad():
        for scene in scenes:
            row = total_loss(model(observe(scene, cfg.encoder.noise_sigma)), scene, cfg.loss).as_row()
            acc += [row["l_total"], row["l_cls"], row["l_box"], row["l_seg"]]
    acc /= max(len(scenes), 1)
    return dict(zip(["l_total", "l_cls", "l_box", "l_seg"], acc.tolist()))


def _dump_nan(out_dir: Path | None, epoch: int, step: int, seeds: list[int], parts: dict) -> str:
    info = {"epoch": epoch, "step": step, "scene_seeds": seeds, "losses": parts}
    text = json.dumps(info, indent=1)
    if out_dir is not None:
        (out_dir / "nan_dump.json").write_text(text)
    return text


def train(dataset, cfg: RunConfig, seed: int | None = None, out_dir=None, log=print,
          evaluate_every: int = 1) -> TrainResult:
    """Train from scratch; deterministic for a fixed (dataset, cfg, seed)."""
    t0 = time.time()
    seed = cfg.train.seed if seed is None else int(seed)
    tc = cfg.train
    manifest, train_scenes = load_split(dataset, "train", tc.train_limit)
    check_grid(manifest, cfg.grid)
    _, val_scenes = load_split(dataset, "val", tc.val_limit)
    if not train_scenes:
        raise ValueError(f"dataset {dataset} has no training scenes")
    probe = train_scenes[:tc.probe_size]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")

    model = MaskBEV(cfg, seed)
    params = model.parameters()
    opt = AdamW(params, lr=tc.lr, betas=(0.9, tc.beta2), weight_decay=tc.weight_decay)
    steps_per_epoch = math.ceil(len(train_scenes) / tc.batch)
    total_steps = steps_per_epoch * tc.epochs
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    result = TrainResult(model)

    writer = None
    handle = None
    if out is not None:
        handle = open(out / "metrics.csv", "w", newline="")
        writer = csv.DictWriter(handle, fieldnames=CSV_HEADER, lineterminator="\n")
        writer.writeheader()

    def record(epoch: int, step: int) -> None:
        row = {"epoch": epoch, "step": step, **probe_loss(model, probe, cfg)}
        if val_scenes and (epoch % evaluate_every == 0 or epoch == tc.epochs):
            rep = evaluate(model, val_scenes)
            row.update({"miou": rep.miou, "ap@1": rep.ap.at(1.0), "ap@2": rep.ap.at(2.0)})
        else:
            row.update({"miou": float("nan"), "ap@1": float("nan"), "ap@2": float("nan")})
        result.rows.append(row)
        if writer is not None:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
            handle.flush()
        log("epoch {epoch:3d} step {step:6d} loss {l_total:.4f} (cls {l_cls:.4f} box {l_box:.4f} seg {l_seg:.4f}) "
            "miou {miou:.3f} ap@1 {ap@1:.3f} ap@2 {ap@2:.3f}".format(**row) + f"  [{time.time() - t0:.0f}s]")

    try:
        record(0, 0)
        step = 0
        for epoch in range(1, tc.epochs + 1):
            order = rng.permutation(len(train_scenes))
            for b in range(steps_per_epoch):
                batch = [train_scenes[i] for i in order[b * tc.batch:(b + 1) * tc.batch]]
                model.zero_grad()
                for scene in batch:
                    lb = total_loss(model(observe(scene, cfg.encoder.noise_sigma)), scene, cfg.loss)
                    if not np.isfinite(lb.total.data):
                        dump = _dump_nan(out, epoch, step, [s.seed for s in batch], lb.as_row())
                        raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {dump}")
                    backward(lb.total * (1.0 / len(batch)))
                norm = clip_grad_norm(params, tc.grad_clip)
                if not math.isfinite(norm):
                    dump = _dump_nan(out, epoch, step, [s.seed for s in batch], {"grad_norm": norm})
                    raise TrainingDiverged(f"non-finite gradient at epoch {epoch} step {step}: {dump}")
                opt.lr = warmup_cosine(step, total_steps, tc.lr, tc.warmup_frac)
                opt.step()
                step += 1
            record(epoch, step)
            if out is not None:
                result.checkpoint = out / "model.ckpt"
                checkpoint.save(out / f"epoch_{epoch:03d}.ckpt", model.state_dict())
                checkpoint.save(result.checkpoint, model.state_dict())
    finally:
        if handle is not None:
            handle.close()
    result.seconds = time.time() - t0
    return result


def load_model(cfg: RunConfig, path) -> MaskBEV:
    model = MaskBEV(cfg)
    model.load_state_dict(checkpoint.load(path))
    return model
