"""Train a small random-mask supernet and score context patterns by rate saving.

A full desk run uses 20000 steps (about 12 minutes on one core); the default
here is short enough to watch, so the numbers are noisy but the near vs far
single-reference gap usually shows already.

    python demos/masklab_tour.py --steps 2000
"""

import argparse

from checkerboard import masklab
from checkerboard.data import synthetic_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    train_set = synthetic_corpus(64, size=128, seed=args.seed)
    held_out = list(synthetic_corpus(16, size=128, seed=args.seed + 1))
    cfg = masklab.desk_train_config(steps=args.steps, seed=args.seed)

    def progress(m):
        if m.step % 500 == 0:
            print(f"step {m.step:6d}  loss {m.loss:.4f}  bpp {m.bpp:.4f}")

    weights, _ = masklab.train_random_mask_model(cfg, train_set, progress=progress)
    ev = masklab.MaskEvaluator(weights, held_out)

    print(f"\nR0 (no context) = {ev.r0:.4f} bpp")
    for r in masklab.table1_protocol(weights, held_out, ev):
        print(f"  {r.description:20s} k_ref={r.k_ref:2d}  bpp={r.bpp:.4f}  eta={r.eta_percent:6.2f}%")

    sweep = masklab.single_reference_sweep(weights, held_out, ev)
    by_offset = dict(zip(masklab.single_ref_offsets(), sweep))
    print("\nsingle-reference eta (%), centre marked x:")
    for dy in range(-2, 3):
        cells = ["    x " if (dy, dx) == (0, 0) else f"{by_offset[(dy, dx)].eta_percent:6.2f}" for dx in range(-2, 3)]
        print("  " + " ".join(cells))
    near, far = masklab.mean_eta_by_distance(sweep)
    print(f"\nmean eta: 4-neighbours {100 * near:.2f}%, outer ring {100 * far:.2f}%")


if __name__ == "__main__":
    main()
