"""Why a frozen head can still be a good head.

With the head frozen in the inner loop, only its row differences matter to
the softmax. This demo shows the two tools for inspecting that:

* shifting every head row by the same vector leaves predictions unchanged,
  and ``center_head`` removes that redundant component;
* ``head_gap_cosine`` summarizes how spread out the rows are; an orthonormal
  head (``orthonormalize_head``) scores exactly 0.5.

If a trained checkpoint is given, its head is reported alongside.

    python demos/head_geometry.py [--checkpoint acceptance_runs/boil_s0/best.ckpt]
"""

import argparse

import numpy as np

from metaloop import analysis, cli, nn
from metaloop import tensor as T
from metaloop.nn import HEAD


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", help="a best.ckpt from a desk-scale run")
    args = ap.parse_args()

    cfg = cli.desk_config().backbone
    params = nn.build(cfg, seed=0, precision="f64")
    x = np.random.default_rng(0).random((10,) + cfg.input_shape)
    w = params[HEAD]["weight"].data
    shifted = params.replace(HEAD, weight=T.Tensor(w + 3.0))
    with T.no_record():
        a = nn.forward(params, x)[0].data
        b = nn.forward(shifted, x)[0].data
    print(f"logit change under a row shift: {np.abs((a - b) - (a - b).mean(1, keepdims=True)).max():.2e}")
    print(f"same predictions: {np.array_equal(a.argmax(1), b.argmax(1))}")

    heads = {
        "random init": params,
        "centered": nn.center_head(params),
        "orthonormal": nn.orthonormalize_head(params),
    }
    if args.checkpoint:
        heads["checkpoint"] = nn.load_checkpoint(args.checkpoint, cfg)
    for name, p in heads.items():
        rows = p[HEAD]["weight"].data
        print(f"{name:12s} head gap cosine {analysis.head_gap_cosine(rows):.4f}  "
              f"mean row norm {np.linalg.norm(rows, axis=1).mean():.4f}")


if __name__ == "__main__":
    main()
