"""Desk-scale overfit: toy profile, 8 synthetic shapes, one folding mode per run.

    python3 scripts/overfit.py --folding style --steps 2000 --out runs/overfit_style
"""
import argparse
import json
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from pcompletion import pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--folding", choices=("style", "concat"), default="style")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--seed", type=int, default=17)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()

    data = pipeline.overfit_dataset(8, 512, args.seed)
    cfg = pipeline.overfit_config(args.folding, args.steps, args.batch, args.seed)
    t0 = time.time()

    def progress(rec):
        if rec.step % 50 == 0:
            print(f"step {rec.step:5d} rec {rec.losses['rec']:.4f} fd {rec.losses['fd']:.6f} "
                  f"emd {rec.emd:.4f} d {rec.losses['d_loss']:.3f} [{time.time() - t0:.0f}s]", flush=True)

    with threadpool_limits(1):
        res = pipeline.overfit_run(cfg, data, progress=progress, out_dir=args.out)
    summary = {"folding": args.folding, "steps": len(res.records), "emd_start": res.emd_start,
               "emd_end": res.emd_end, "ratio": res.emd_end / res.emd_start,
               "generator_params": res.n_params, "seconds": time.time() - t0,
               "fd_windows": pipeline.window_means([r.losses["fd"] for r in res.records], 200)}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
