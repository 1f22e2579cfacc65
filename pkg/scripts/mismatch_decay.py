"""Equilibrium mismatch between two independently planning cars, tick by tick.

Each car runs its own ALGAMES MPC from a deliberately different initial guess; the
table counts how many seeded runs still disagree about the plan at each tick.
"""

import argparse
from pathlib import Path

from gnep import cli, mpc
from gnep import scenarios as sc


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--ticks", type=int, default=11)
    ap.add_argument("--knots", type=int, default=20)
    ap.add_argument("--out", type=Path, default=Path("runs/mismatch"))
    args = ap.parse_args()

    s = sc.merge_pair()
    cfg = mpc.MpcConfig(knots=args.knots)
    counts = [0] * args.ticks
    rows = []
    for seed in range(args.seeds):
        x0 = s.x0 if seed == 0 else sc.sample_initial_state(s, 3000 + seed)
        p = mpc.mpc_problem(s, cfg, x0)
        tr = mpc.mismatch_experiment(s, cfg, mpc.divergent_guesses(p), seed, x0=x0, ticks=args.ticks)
        for k, f in enumerate(tr.flags):
            counts[k] += bool(f)
            rows.append((seed, k, bool(f), tr.distances[k]))
        print(seed, "".join("x" if f else "." for f in tr.flags), flush=True)

    args.out.mkdir(parents=True, exist_ok=True)
    cli.write_csv(args.out / "mismatch_runs.csv", ["seed", "tick", "mismatch", "distance"], rows)
    cli.write_csv(args.out / "mismatch_fraction.csv", ["tick", "fraction"],
                  [(k, c / args.seeds) for k, c in enumerate(counts)])
    print("fraction mismatched:", " ".join(f"{c / args.seeds:.2f}" for c in counts))


if __name__ == "__main__":
    main()
