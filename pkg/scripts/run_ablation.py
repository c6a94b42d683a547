"""Reduced-scale ablation sweeps over several seeds; writes runs/ablation/<knob>.json and prints delta tables."""
import argparse
import json
import sys
from pathlib import Path

from maskbev.ablation import format_table, run_ablation
from maskbev.config import RunConfig
from maskbev.scenes import GeneratorConfig, GridSpec, write_dataset


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--knobs", nargs="+", default=["modulation", "aggregation"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--data", default="data/ablation")
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--scenes", type=int, default=400)
    p.add_argument("--val", type=int, default=50)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args(argv)

    data = Path(args.data)
    if not (data / "manifest.json").is_file():
        gen = GeneratorConfig(grid=GridSpec(args.grid, args.grid, 1.0))
        write_dataset(data, args.scenes + args.val, 77, gen, val_count=args.val)
    base = [f"grid.h={args.grid}", f"grid.w={args.grid}", "train.epochs=6", "train.batch=4"]
    cfg = RunConfig(dataset=str(data)).with_overrides(base + args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for knob in args.knobs:
        print(f"== {knob}")
        rows = run_ablation(cfg, knob, args.seeds)
        table = format_table(rows, args.seeds)
        print(table)
        doc = {"knob": knob, "seeds": args.seeds, "config": cfg.to_json(),
               "rows": [{"label": r.label, "miou": r.miou, "ap@2": r.ap2} for r in rows], "table": table}
        (out / f"{knob}.json").write_text(json.dumps(doc, indent=1) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
