"""Desk-scale attack walkthrough.

Renders a synthetic split, trains the toy detector, optimizes patterns at
several resolutions from one 400 px seed and writes the resolution table,
the loss curves and the patterns under --out.

    python demos/desk_attack.py --out demo-out --resolutions 100 50
"""
import argparse
import logging
import time
from pathlib import Path

import torch

from advtee.data import synth_splits
from advtee.detector import save_checkpoint, train_toy_detector
from advtee.evaluation import WITHOUT_ATTACK, evaluate_attack, format_resolution_table
from advtee.pattern import downsample, export_pattern, init_pattern
from advtee.plots import emit_plots
from advtee.training import TrainConfig, save_training_outputs, train_pattern


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo-out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--resolutions", type=int, nargs="+", default=[200, 100, 50])
    ap.add_argument("--iterations", type=int, default=1000)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)

    train, val = synth_splits(200, 50, args.seed)
    t = time.perf_counter()
    detector = train_toy_detector(train, seed=args.seed, val=val)
    save_checkpoint(detector, out / "detector.npz")
    print(f"toy detector: val AP@0.50 {detector.val_ap50:.3f} after {time.perf_counter() - t:.0f}s")

    report = evaluate_attack(detector, val)
    base = init_pattern(400, seed=args.seed)
    export_pattern(base, out / "pattern_seed.png")
    for res in args.resolutions:
        cfg = TrainConfig.desk_scale(pattern_resolution=res, max_iterations=args.iterations, epochs=10_000,
                                     seed=args.seed)
        result = train_pattern(train, detector, cfg, initial=base)
        paths = save_training_outputs(result, out / f"p{res}")
        report = report.merge(evaluate_attack(detector, val, result.effective_pattern, f"p{res}"))
        report = report.merge(evaluate_attack(detector, val, downsample(base, res), f"random p{res}"))
        emit_plots(paths["history"], None, out / f"p{res}")
        print(f"p{res}: final total loss {result.loss_history[-1]['total']:.4f}")

    report.to_json(out / "report.json")
    emit_plots(None, out / "report.json", out)
    conds = [WITHOUT_ATTACK] + [c for r in args.resolutions for c in (f"random p{r}", f"p{r}")]
    table = format_resolution_table(report, conds)
    (out / "resolution_table.txt").write_text(table + "\n")
    print(table)


if __name__ == "__main__":
    main()
