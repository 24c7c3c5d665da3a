"""Ablation smoke runs: adversarial targets and weight sweep, folding modes, or CAE gating.

    python3 scripts/ablation.py --axis adversarial --steps 200 --out runs/ablation_adv.csv
    python3 scripts/ablation.py --axis folding --steps 2000 --out runs/ablation_fold.csv
"""
import argparse
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from pcompletion import pipeline


def variants(axis):
    if axis == "adversarial":
        return pipeline.adversarial_variants()
    if axis == "folding":
        return {"style": {"folding": "style"}, "concat": {"folding": "concat"}}
    return {"gate": {"gate": True}, "no_gate": {"gate": False}}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--axis", choices=("adversarial", "folding", "gating"), default="adversarial")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--seed", type=int, default=17)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()

    data = pipeline.overfit_dataset(8, 512, args.seed)
    base = pipeline.overfit_config("style", args.steps, args.batch, args.seed)
    t0 = time.time()

    def progress(rec):
        if rec.step % 50 == 0:
            print(f"step {rec.step:5d} total {rec.total:.4f} emd {rec.emd:.4f} [{time.time() - t0:.0f}s]", flush=True)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(1):
        pipeline.ablation_run(base, variants(args.axis), data, args.out, progress)
    print((args.out.with_name(args.out.stem + "_final.csv")).read_text())


if __name__ == "__main__":
    main()
