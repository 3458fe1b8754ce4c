"""Plot training and validation loss against epoch from a history.csv.

    python scripts/plot_loss_curves.py runs/desk/R4/history.csv --out loss.png
"""

import argparse
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_history(path):
    epochs, train, val = [], [], []
    with open(path) as f:
        for row in csv.DictReader(f):
            epochs.append(int(row["epoch"]))
            train.append(float(row["train_loss"]) if row["train_loss"] else float("nan"))
            val.append(float(row["val_loss"]))
    return epochs, train, val


def main():
    ap = argparse.ArgumentParser(description="Loss curves from a training history CSV.")
    ap.add_argument("history")
    ap.add_argument("--out", default="loss_curves.png")
    ap.add_argument("--log", action="store_true", help="logarithmic loss axis")
    args = ap.parse_args()

    epochs, train, val = read_history(args.history)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, train, "r-o", ms=3, label="training")
    ax.plot(epochs, val, "b-o", ms=3, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE loss")
    if args.log:
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
