"""Train on the synthetic sea and compare 10-day rollouts with persistence.

    python scripts/synthetic_skill.py --variant C --epochs 15 --out runs/skill
"""

import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

from oceancast.config import RunConfig
from oceancast.pipeline import preprocess_series, split_and_normalize, train_model
from oceancast.rollout import emit_reports, evaluate_rollouts
from oceancast.synthetic import SynthParams, synthetic_sst


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--variant", default="C", choices=["A", "B", "C"])
    ap.add_argument("--scale", default="small", choices=["small", "large-batch"])
    ap.add_argument("--epochs", type=int, help="epochs per stage (default: from --scale)")
    ap.add_argument("--preset", default="tiny")
    ap.add_argument("--days", type=int, default=1096)
    ap.add_argument("--size", type=int, default=24)
    ap.add_argument("--horizon", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/synthetic_skill"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = RunConfig(seed=args.seed, synth=SynthParams(n_days=args.days, n_lat=args.size, n_lon=args.size),
                    preset=args.preset, variant=args.variant, scale=args.scale, epochs=args.epochs,
                    horizon=args.horizon)
    series = preprocess_series(cfg, synthetic_sst(replace(cfg.synth, seed=args.seed)))
    _, stats, (train, val, test) = split_and_normalize(cfg, series)

    t0 = time.perf_counter()
    model, reports = train_model(cfg, train, val, stats)
    print(f"training: {time.perf_counter() - t0:.0f}s")
    for rep in reports:
        print(f"  {rep.stage}: best epoch {rep.best_epoch}, changed {sorted(rep.changed_groups())}")

    ev = evaluate_rollouts(model, test, stats, steps=cfg.horizon)
    emit_reports(ev, args.out, test.grid.land_mask)
    print("lead  model_rmse_K  persistence_rmse_K")
    for m, p in zip(ev.lead_means("model"), ev.lead_means("persistence")):
        print(f"{m['lead']:>4}  {m['rmse']:12.4f}  {p['rmse']:18.4f}")
    print(f"reports in {args.out}")


if __name__ == "__main__":
    main()
