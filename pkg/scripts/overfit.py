"""Overfit the 16-sequence toy corpus and report loss reduction and sampling RMSE."""

import argparse

import numpy as np

from remodiff.experiments import OVERFIT_LR, overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=OVERFIT_LR)
    ap.add_argument("--n-infer", type=int, default=50)
    args = ap.parse_args()
    res = overfit(args.steps, args.seed, args.n_infer, args.lr, log=lambda m: print(m, flush=True))
    print(f"probe loss {res.probe_before:.4f} -> {res.probe_after:.4f} (ratio {res.probe_ratio:.4f})")
    print(f"leave-one-out RMSE mean {np.mean(res.rmse_leave_one_out):.4f} max {np.max(res.rmse_leave_one_out):.4f}")
    print(f"self-retrieval RMSE mean {np.mean(res.rmse_self_retrieval):.4f}")
    print(f"{res.seconds:.0f}s")


if __name__ == "__main__":
    main()
