"""Which parameters move in the inner loop, and what the outer loop sees.

Builds a small convnet, adapts it on one synthetic episode under the three
presets and prints, per parameter group, how far the inner step moved it.
Then compares first- and second-order meta-gradients for the body-only
preset: the head never moves in its inner loop, yet it still receives a
meta-gradient, because the query loss is computed through it.

Runs in a few seconds:

    python demos/inner_loop_presets.py
"""

import numpy as np

from metaloop import meta, nn, tasks
from metaloop.nn import BackboneConfig


def main() -> None:
    cfg = BackboneConfig(depth=4, base_channels=16, input_shape=(3, 16, 16))
    params = nn.build(cfg, seed=0)
    domain = tasks.make_domain(tasks.DomainSpec(image_shape=cfg.input_shape))
    episode = tasks.sample_episode(domain, "train", 5, 5, 15, np.random.default_rng(0))

    print("inner-step displacement |after - before| per group")
    print(f"{'group':8s}" + "".join(f"{name:>12s}" for name in ("maml", "anil", "boil")))
    moved = {}
    for name in ("maml", "anil", "boil"):
        adapted = meta.inner_adapt(params, episode.support_x, episode.support_y, meta.preset(name, params))
        moved[name] = {
            g: float(np.sqrt(sum(np.sum((adapted[g][k].data - t.data) ** 2) for k, t in params[g].items())))
            for g in params.group_names
        }
    for g in params.group_names:
        print(f"{g:8s}" + "".join(f"{moved[name][g]:12.5f}" for name in moved))

    print("\nmeta-gradient norm per group under the body-only preset")
    print(f"{'group':8s}{'first':>12s}{'second':>12s}")
    norms = {}
    for order in ("first", "second"):
        inner = meta.boil(params, order=order)
        _, grads = meta.meta_gradient(params, [episode], inner)
        norms[order] = {
            g: float(np.sqrt(sum(np.sum(grads[f"{g}.{k}"] ** 2) for k in params[g]))) for g in params.group_names
        }
    for g in params.group_names:
        print(f"{g:8s}{norms['first'][g]:12.5f}{norms['second'][g]:12.5f}")


if __name__ == "__main__":
    main()
