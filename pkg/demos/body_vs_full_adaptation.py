"""Body-only versus full inner-loop adaptation, end to end.

Trains the body-only preset (boil) and the full preset (maml) on the same
synthetic domain, then reports for each checkpoint:

* test accuracy before and after the inner step;
* the head-free template test (NIL) at the last two conv layers, before and
  after adaptation, which shows whether adaptation changed the features;
* CKA between features before and after adaptation (1 means unchanged);
* accuracy on a fully shifted target domain.

The default of 300 outer steps takes a few CPU-minutes per algorithm; pass
``--steps 2000`` for the full desk-scale schedule. Outputs go to ``--out``
(default ``demo_runs/``) and finished runs are reused.

    python demos/body_vs_full_adaptation.py --steps 300
"""

import argparse
import dataclasses
from pathlib import Path

from metaloop import cli


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("demo_runs"))
    args = ap.parse_args()

    results = {}
    for algorithm in ("boil", "maml"):
        cfg = cli.desk_config(algorithm, seed=args.seed)
        cfg = dataclasses.replace(cfg, outer=dataclasses.replace(cfg.outer, steps=args.steps))
        out = args.out / f"{algorithm}_s{args.seed}_{args.steps}"
        print(f"training {algorithm} for {args.steps} steps -> {out}")
        run = cli.cmd_train(cfg, out, reuse=True, log=print)
        summary = cli.cmd_analyze(run.checkpoint, cfg, out=out / "analysis", num_episodes=50)
        shifted = cli.cmd_crossdomain(run.checkpoint, cfg, [0.0, 1.0], num_episodes=100, batches=2)
        results[algorithm] = (run, summary, shifted)

    print("\n                          boil      maml")
    grid_rows = [tuple(r[:3]) for r in results["boil"][1]["grid"]]
    for key in grid_rows:
        vals = [next(r[3] for r in results[a][1]["grid"] if tuple(r[:3]) == key) for a in results]
        label = f"{key[0]} {key[2]} {key[1]}"
        print(f"{label:24s}" + "".join(f"{100 * v:9.1f}" for v in vals))
    for layer in results["boil"][1]["cka"]:
        print(f"{'CKA ' + layer:24s}" + "".join(f"{results[a][1]['cka'][layer]:9.3f}" for a in results))
    for i, sev in enumerate((0.0, 1.0)):
        label = f"acc after, shift {sev:g}"
        print(f"{label:24s}" + "".join(f"{100 * results[a][2][i]['acc_after_mean']:9.1f}" for a in results))
    for a, (run, _, _) in results.items():
        print(f"{a}: best step {run.summary['best_step']}, {run.summary['timestamp']['cpu_seconds'] / 60:.1f} CPU-min")


if __name__ == "__main__":
    main()
