"""Retrain-and-evaluate sweeps over the attention-mask and aggregation knobs."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .modulation import MaskDesign, ModulationConfig
from .training.trainer import train

KNOBS = ("seg-threshold", "mask-design", "mwwa", "aspp", "modulation", "aggregation")


def variants(cfg: RunConfig, knob: str) -> list[tuple[str, RunConfig]]:
    """(label, config) rows; the first row is the reference the deltas are taken against."""
    def with_(fn):
        c = copy.deepcopy(cfg)
        fn(c)
        return c

    if knob == "seg-threshold":
        return [(f"tau={t:g}", with_(lambda c, t=t: setattr(c.modulation, "seg_threshold", t))) for t in (0.4, 0.2, 0.1)]
    if knob == "mask-design":
        def design(c, mode):
            c.modulation.detect_mask_mode = mode
            c.modulation.scale = 1.3
        return [("Box", with_(lambda c: design(c, MaskDesign.BOX))),
                ("Circle", with_(lambda c: design(c, MaskDesign.CIRCLE))),
                ("1.3x", with_(lambda c: design(c, MaskDesign.SCALED_CIRCLE)))]
    if knob == "mwwa":
        return [("mwwa off", with_(lambda c: setattr(c.aggregation, "use_mwwa", False))),
                ("mwwa on", with_(lambda c: setattr(c.aggregation, "use_mwwa", True)))]
    if knob == "aspp":
        return [("aspp off", with_(lambda c: setattr(c.aggregation, "use_aspp", False))),
                ("aspp on", with_(lambda c: setattr(c.aggregation, "use_aspp", True)))]
    if knob == "modulation":
        return [("modulation off", with_(lambda c: setattr(c, "modulation", ModulationConfig.unmodulated()))),
                ("modulation on", with_(lambda c: None))]
    if knob == "aggregation":
        def off(c):
            c.aggregation.use_mwwa = False
            c.aggregation.use_aspp = False
        return [("mwwa+aspp off", with_(off)), ("mwwa+aspp on", with_(lambda c: None))]
    raise ValueError(f"unknown knob {knob!r}; choose from {', '.join(KNOBS)}")


@dataclass
class AblationRow:
    label: str
    miou: list[float] = field(default_factory=list)
    ap2: list[float] = field(default_factory=list)

    def means(self) -> tuple[float, float]:
        return float(np.mean(self.miou)), float(np.mean(self.ap2))


def run_ablation(cfg: RunConfig, knob: str, seeds=(0, 1, 2), out_dir=None, log=print) -> list[AblationRow]:
    rows = []
    for label, vcfg in variants(cfg, knob):
        row = AblationRow(label)
        for seed in seeds:
            vcfg.train.seed = int(seed)
            sub = None if out_dir is None else Path(out_dir) / label.replace(" ", "_").replace("=", "") / f"seed{seed}"
            final = train(vcfg.dataset, vcfg, seed, sub, log=lambda *_: None, evaluate_every=10**9).rows[-1]
            row.miou.append(final["miou"])
            row.ap2.append(final["ap@2"])
            log(f"  {label:16s} seed {seed}: miou {final['miou']:.4f} ap@2 {final['ap@2']:.4f}")
        rows.append(row)
    return rows


def format_table(rows: list[AblationRow], seeds) -> str:
    ref_m, ref_a = rows[0].means()
    lines = [f"seeds: {' '.join(str(s) for s in seeds)}",
             f"{'variant':16s} {'mIoU':>8s} {'AP@2m':>8s} {'dmIoU':>8s} {'dAP@2m':>8s}"]
    for r in rows:
        m, a = r.means()
        lines.append(f"{r.label:16s} {m:8.4f} {a:8.4f} {m - ref_m:+8.4f} {a - ref_a:+8.4f}")
    return "\n".join(lines)
