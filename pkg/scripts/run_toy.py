"""Generate the default toy dataset (if needed), train the default config and write runs/toy/summary.json."""
import argparse
import json
import os
import sys
from pathlib import Path

from maskbev.config import RunConfig
from maskbev.evaluation import baseline_report, evaluate
from maskbev.scenes import GeneratorConfig, write_dataset
from maskbev.training.trainer import load_split, train

TRAIN_SCENES = 2000
VAL_SCENES = 200


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data", default="data/toy")
    p.add_argument("--out", default="runs/toy")
    p.add_argument("--data-seed", type=int, default=2024)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args(argv)

    data = Path(args.data)
    if not (data / "manifest.json").is_file():
        print(f"generating {TRAIN_SCENES} + {VAL_SCENES} scenes in {data}")
        write_dataset(data, TRAIN_SCENES + VAL_SCENES, args.data_seed, GeneratorConfig(), val_count=VAL_SCENES)
    cfg = RunConfig(dataset=str(data)).with_overrides(args.set)
    res = train(cfg.dataset, cfg, out_dir=args.out)

    _, val = load_split(cfg.dataset, "val", cfg.train.val_limit)
    rep = evaluate(res.model, val)
    base = baseline_report(val)
    summary = {
        "dataset": str(data.resolve()),
        "train_scenes": len(load_split(cfg.dataset, "train", cfg.train.train_limit)[1]),
        "val_scenes": len(val),
        "train_seconds": res.seconds,
        "cores": len(os.sched_getaffinity(0)),
        "initial_loss": res.rows[0]["l_total"],
        "final_loss": res.rows[-1]["l_total"],
        "eval": rep.summary(),
        "baseline": {"miou": base.miou, "ap@2": base.ap.at(2.0)},
    }
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
