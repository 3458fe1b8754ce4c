"""Desk-scale comparison of zero-filling, classical CP and CP-net.

Trains one CP-net per acceleration factor on synthetic 64x64 phantoms,
then scores all three methods on the validation split.  Writes:

    <out>/R<r>/          checkpoints and history.csv per factor
    <out>/report.csv     validation-mean metrics, one row per (method, R)
    <out>/maps/          magnitude images and amplified error maps of val sample 0

Example:
    python scripts/desk_experiment.py --out runs/desk --R 4 5 6 --epochs 3
"""

import argparse
import logging
import os

import numpy as np

from deepcp.classical_cp import CPParams, cp_solve
from deepcp.kspace import zero_filled_recon
from deepcp.metrics import average_reports, build_report, error_map, to_gray8, write_pgm
from deepcp.training import TrainConfig, make_dataset, predict, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--R", type=float, nargs="+", default=[4.0, 5.0, 6.0])
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--train-count", type=int, default=200)
    ap.add_argument("--val-count", type=int, default=20)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cp-sigma", type=float, default=0.009)
    ap.add_argument("--cp-tau", type=float, default=100.0)
    ap.add_argument("--amplify", type=float, default=5.0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    os.makedirs(os.path.join(args.out, "maps"), exist_ok=True)

    cp_params = CPParams(sigma=args.cp_sigma, tau=args.cp_tau)
    reports = []
    for R in args.R:
        cfg = TrainConfig(epochs=args.epochs, train_count=args.train_count, val_count=args.val_count,
                          size=args.size, target_R=(R,), seed=args.seed,
                          checkpoint_dir=os.path.join(args.out, f"R{R:g}"))
        data = make_dataset(cfg)
        w, _ = train(cfg, data)
        pred = predict(w, data, data.val_idx)
        for j, i in enumerate(data.val_idx):
            m = data.masks[data.mask_index[i]]
            ref = data.images[i]
            recons = {
                ("zero-filled", R): zero_filled_recon(data.kspace[i], m),
                ("classical-cp", R): cp_solve(data.kspace[i], m, cp_params)[0],
                ("cp-net", R): pred[j],
            }
            reports.append(build_report(recons, ref, f"R{R:g}/val{j}"))
            if j == 0:
                write_pgm(os.path.join(args.out, "maps", f"reference_R{R:g}.pgm"), to_gray8(ref))
                for (name, _), x in recons.items():
                    stem = os.path.join(args.out, "maps", f"{name}_R{R:g}")
                    write_pgm(stem + ".pgm", to_gray8(x, vmax=np.abs(ref).max()))
                    write_pgm(stem + "_error.pgm", error_map(x, ref, args.amplify))

    avg = average_reports(reports)
    avg.to_csv(os.path.join(args.out, "report.csv"))
    print(avg.to_csv_text(), end="")


if __name__ == "__main__":
    main()
