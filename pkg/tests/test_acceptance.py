"""Acceptance suite: one PASS/FAIL line per criterion (1-10).

Criteria 1-6 and 10 are exact oracles computed on the spot. Criteria 7-9 need
trained desk-scale runs (2000 outer steps each, 5 seeds per algorithm). Runs
and their evaluations are cached under ``acceptance_runs/`` (override with
``METALOOP_ACCEPTANCE_DIR``) and reused while the config and checkpoint are
unchanged. Populate the cache up front with::

    python tests/test_acceptance.py prepare

Deselect the trained-model criteria with ``pytest -m "not desk"``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import central_diff, record_acceptance, rel_err
from metaloop import analysis, cli, meta, nn, tasks
from metaloop import tensor as T
from metaloop.meta import Episode
from metaloop.nn import HEAD, BackboneConfig

ROOT = Path(os.environ.get("METALOOP_ACCEPTANCE_DIR", Path(__file__).resolve().parent.parent / "acceptance_runs"))
SEEDS = range(5)
ALGORITHMS = ("boil", "maml", "anil")
HEAD_RATES = (0.0, 0.5)  # 0 and equal to the body rate
CPU_BUDGET = 600.0
ANALYSIS_EPISODES = 100
LAST_CONV = "conv4"


def random_episode(rng, cfg, k, q, dtype=np.float64):
    n = cfg.num_classes
    sy = np.repeat(np.arange(n), k)
    qy = np.repeat(np.arange(n), q)
    return Episode(
        rng.random((n * k,) + cfg.input_shape).astype(dtype), sy,
        rng.random((n * q,) + cfg.input_shape).astype(dtype), qy, n, k, q,
    )


# ---------------------------------------------------------------------------
# 1. meta-gradient against finite differences


# (model, episodes per meta-batch); finite differences cost one meta-loss per parameter
GRAD_MODELS = [
    (BackboneConfig(depth=1, base_channels=2, input_shape=(1, 4, 4), num_classes=2), 2),
    (BackboneConfig(depth=2, base_channels=1, input_shape=(1, 4, 4), num_classes=3), 1),
]


def _fd_check(p, eps, inner):
    """Relative error of the meta-gradient against central differences.

    Returns ``None`` when the differences depend on the step size: the
    inner-loop gradient switches at max-pool and ReLU boundaries, so the
    meta-loss can jump inside the stencil and differences are no oracle there.
    """
    _, analytic = meta.meta_gradient(p, eps, inner)
    keys = [k for k, _ in p.items()]
    arrays = [t.data.copy() for t in p.tensors()]

    def value(*arrs):
        q = p.map(lambda g, n, t: T.Tensor(arrs[keys.index(f"{g}.{n}")]))
        return meta.meta_loss(q, eps, inner)

    exact = [analytic[k] for k in keys]
    coarse = central_diff(value, arrays)
    err = rel_err(exact, coarse)
    if err < 1e-5:
        return err
    fine = central_diff(value, arrays, eps=1e-6)
    return None if rel_err(coarse, fine) > 1e-3 else err


def test_criterion_1_meta_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    worst, count, redraws = 0.0, 0, 0
    start = time.process_time()
    for cfg, batch in GRAD_MODELS:
        base = nn.build(cfg, seed=3, precision="f64")
        assert base.num_parameters() <= 200
        for algorithm, steps in itertools.product(ALGORITHMS, (1, 2)):
            for _ in range(5):
                p = base.map(lambda g, n, t: T.Tensor(t.data + rng.normal(scale=0.05, size=t.shape)))
                eps = [random_episode(rng, cfg, 2, 3) for _ in range(batch)]
                err = _fd_check(p, eps, meta.preset(algorithm, p, 0.3, steps=steps))
                if err is not None:
                    break
                redraws += 1
            worst = max(worst, np.inf if err is None else err)
            count += 1
    seconds = time.process_time() - start
    ok = worst < 1e-5 and seconds < 5.0
    record_acceptance(
        1, ok, f"{count} cases, worst relative error {worst:.2e} (< 1e-5), {redraws} points redrawn for a kink "
        f"inside the stencil, {seconds:.2f} CPU-s (< 5)"
    )
    assert ok


# ---------------------------------------------------------------------------
# 2. frozen groups stay bit-identical


def test_criterion_2_frozen_groups_bit_identical():
    rng = np.random.default_rng(2)
    failures = []
    for trial in range(100):
        family = str(rng.choice(["convnet", "miniresnet"]))
        depth = int(rng.integers(1, 4))
        size = int(2 ** depth * rng.integers(1, 3))
        cfg = BackboneConfig(
            family=family, depth=depth, base_channels=int(rng.integers(1, 5)),
            input_shape=(int(rng.integers(1, 4)), size, size), num_classes=int(rng.integers(2, 6)),
        )
        precision = str(rng.choice(["f32", "f64"]))
        p = nn.build(cfg, seed=trial, precision=precision)
        if rng.random() < 0.5:
            p = p.trainable()
        ep = random_episode(rng, cfg, int(rng.integers(1, 4)), 1, T.PRECISIONS[precision])
        algorithm = ("anil", "boil")[trial % 2]
        inner = meta.preset(
            algorithm, p, float(rng.uniform(0.01, 1.0)),
            steps=int(rng.integers(1, 4)), order=str(rng.choice(["first", "second"])),
        )
        out = meta.inner_adapt(p, ep.support_x, ep.support_y, inner)
        frozen = p.body_names if algorithm == "anil" else [HEAD]
        for g in frozen:
            for n, t in p[g].items():
                if out[g][n].data.tobytes() != t.data.tobytes():
                    failures.append((trial, algorithm, g, n))
    ok = not failures
    record_acceptance(2, ok, f"100 random configs, {len(failures)} frozen tensors changed")
    assert ok, failures[:5]


# ---------------------------------------------------------------------------
# 3. head-shift invariance


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_criterion_3_head_shift_invariance():
    rng = np.random.default_rng(3)
    cfg = BackboneConfig(depth=2, base_channels=4, input_shape=(3, 8, 8), num_classes=5)
    worst, flips = 0.0, 0
    for trial in range(50):
        p = nn.build(cfg, seed=trial, precision="f64")
        x = rng.random((20,) + cfg.input_shape)
        with T.no_record():
            base = _softmax(nn.forward(p, x)[0].data)
            w, b = p[HEAD]["weight"].data, p[HEAD]["bias"].data
            shift = rng.normal(scale=10.0, size=w.shape[1])
            shifted = p.replace(HEAD, weight=T.Tensor(w + shift), bias=T.Tensor(b + rng.normal()))
            worst = max(worst, float(np.abs(_softmax(nn.forward(shifted, x)[0].data) - base).max()))
            centered = nn.center_head(p)
            flips += int(np.sum(nn.forward(centered, x)[0].data.argmax(1) != base.argmax(1)))
    ok = worst <= 1e-12 and flips == 0
    record_acceptance(3, ok, f"max softmax change {worst:.1e} (<= 1e-12), {flips} argmax changes after centering")
    assert ok


# ---------------------------------------------------------------------------
# 4. orthonormal head


def test_criterion_4_orthonormal_head_gap_is_half():
    worst = 0.0
    for seed, (n, depth, channels) in enumerate(itertools.product((3, 5, 10), (1, 4), (16, 32))):
        cfg = BackboneConfig(depth=depth, base_channels=channels, input_shape=(3, 16, 16), num_classes=n)
        p = nn.orthonormalize_head(nn.build(cfg, seed=seed), seed=seed)
        worst = max(worst, abs(analysis.head_gap_cosine(p[HEAD]["weight"].data) - 0.5))
    ok = worst <= 1e-9
    record_acceptance(4, ok, f"max |head gap cosine - 0.5| = {worst:.1e} (<= 1e-9)")
    assert ok


# ---------------------------------------------------------------------------
# 5. CKA properties


def test_criterion_5_cka_properties():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        m, d1, d2 = int(rng.integers(5, 40)), int(rng.integers(1, 30)), int(rng.integers(1, 30))
        x, y = rng.normal(size=(m, d1)), rng.normal(size=(m, d2))
        q, _ = np.linalg.qr(rng.normal(size=(d1, d1)))
        scale = float(rng.choice([-1, 1]) * rng.uniform(0.01, 100))
        base = analysis.cka_linear(x, y)
        worst = max(
            worst,
            abs(analysis.cka_linear(x, x) - 1.0),
            abs(analysis.cka_linear(x @ q, y) - base),
            abs(analysis.cka_linear(x * scale, y) - base),
        )
    cfg = cli.desk_config("anil").backbone
    p = nn.build(cfg, seed=0)
    dom = tasks.make_domain(tasks.DomainSpec(image_shape=cfg.input_shape))
    anil_values = []
    for i in range(3):
        ep = tasks.sample_episode(dom, "test", 5, 5, 15, np.random.default_rng(i))
        after = analysis.adapt(p, ep, meta.anil(p))
        anil_values += list(analysis.cka_report(p, after, ep, cfg.layer_names).values.values())
    exact = all(v == 1.0 for v in anil_values)
    ok = worst <= 1e-8 and exact
    record_acceptance(
        5, ok, f"max deviation {worst:.1e} (<= 1e-8); head-only adaptation body CKA exactly 1 in "
        f"{sum(v == 1.0 for v in anil_values)}/{len(anil_values)} layer-episodes"
    )
    assert ok


# ---------------------------------------------------------------------------
# 6. NIL against an exhaustive template oracle


def nil_oracle(params, ep, layer):
    s = analysis.representations(params, ep.support_x, [layer])[layer].astype(np.float64)
    q = analysis.representations(params, ep.query_x, [layer])[layer].astype(np.float64)
    correct = 0
    for i in range(len(q)):
        best, arg = -np.inf, -1
        for c in range(ep.n):
            t = np.mean([s[j] for j in range(len(s)) if ep.support_y[j] == c], axis=0)
            sim = float(np.dot(q[i], t) / (np.linalg.norm(q[i]) * np.linalg.norm(t)))
            if sim > best:
                best, arg = sim, c
        correct += arg == ep.query_y[i]
    return correct / len(q)


def test_criterion_6_nil_matches_exhaustive_oracle():
    shapes = [(n, k, q) for n in range(2, 11) for k in range(1, 10) for q in range(1, 10) if n * (k + q) <= 20]
    mismatches = 0
    for i, (n, k, q) in enumerate(shapes):
        cfg = BackboneConfig(depth=2, base_channels=4, input_shape=(3, 8, 8), num_classes=n)
        p = nn.build(cfg, seed=i)
        ep = random_episode(np.random.default_rng(i), cfg, k, q, np.float32)
        adapted = analysis.adapt(p, ep, meta.boil(p))
        for params, layer in itertools.product((p, adapted), cfg.layer_names):
            mismatches += analysis.nil_test(params, ep, layer) != nil_oracle(params, ep, layer)
    ok = mismatches == 0
    record_acceptance(6, ok, f"{len(shapes)} episode shapes x 2 states x 2 layers, {mismatches} mismatches")
    assert ok


# ---------------------------------------------------------------------------
# 10. determinism


def test_criterion_10_deterministic_reruns(tmp_path):
    cfg = cli.desk_config("boil", seed=7)
    cfg = dataclasses.replace(
        cfg,
        outer=dataclasses.replace(cfg.outer, steps=30),
        evaluation=dataclasses.replace(cfg.evaluation, every=10, val_episodes=20),
    )
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / name), "--deterministic"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    same = {
        "metrics": (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes(),
        "checkpoint": (a / "best.ckpt").read_bytes() == (b / "best.ckpt").read_bytes(),
        "final": cli.report_without_timestamp(a / "final.json") == cli.report_without_timestamp(b / "final.json"),
    }
    ok = all(same.values())
    record_acceptance(10, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert ok


# ---------------------------------------------------------------------------
# desk-scale runs (criteria 7-9)


def main_config(algorithm: str, seed: int) -> cli.ExperimentConfig:
    return cli.desk_config(algorithm, seed=seed)


def fine_grained_config(seed: int) -> cli.ExperimentConfig:
    cfg = cli.desk_config("boil", seed=seed)
    return dataclasses.replace(cfg, domain=tasks.fine_grained_spec(image_shape=cfg.backbone.input_shape))


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _memo(path: Path, key: dict, compute):
    """Cached ``compute()``, valid while ``key`` (config and checkpoint digests) matches."""
    if path.is_file():
        stored = json.loads(path.read_text())
        if stored.get("key") == key:
            return stored["value"]
    value = compute()
    path.write_text(json.dumps({"key": key, "value": value}, indent=2, sort_keys=True) + "\n")
    return value


def train(cfg: cli.ExperimentConfig, out: Path, log=None) -> cli.RunArtifact:
    return cli.cmd_train(cfg, out, deterministic=True, reuse=True, log=log)


def analyzed(algorithm: str, seed: int, log=None) -> dict:
    cfg = main_config(algorithm, seed)
    run = train(cfg, ROOT / f"{algorithm}_s{seed}", log)
    key = {"config": cfg.config_hash(), "checkpoint": _sha(run.checkpoint), "episodes": ANALYSIS_EPISODES}
    summary = _memo(
        run.out / "analysis.json", key,
        lambda: cli.cmd_analyze(run.checkpoint, cfg, num_episodes=ANALYSIS_EPISODES, deterministic=True),
    )
    return {"summary": summary, "cpu_seconds": run.summary["timestamp"]["cpu_seconds"]}


def shifted_accuracy(algorithm: str, seed: int, log=None) -> float:
    cfg = main_config(algorithm, seed)
    run = train(cfg, ROOT / f"{algorithm}_s{seed}", log)
    key = {"config": cfg.config_hash(), "checkpoint": _sha(run.checkpoint), "severity": 1.0}
    rows = _memo(
        run.out / "shift.json", key, lambda: cli.cmd_crossdomain(run.checkpoint, cfg, [1.0], deterministic=True)
    )
    return rows[0]["acc_after_mean"]


def head_rate_accuracy(rate: float, seed: int, log=None) -> dict:
    cfg = cli.ablation_config(fine_grained_config(seed), "head_lr", rate)
    run = train(cfg, ROOT / f"fine_head{rate:g}_s{seed}", log)
    key = {"config": cfg.config_hash(), "checkpoint": _sha(run.checkpoint)}
    row = _memo(run.out / "eval.json", key, lambda: cli.cmd_eval(run.checkpoint, cfg, deterministic=True)[0])
    return {"acc": row["acc_after_mean"], "cpu_seconds": run.summary["timestamp"]["cpu_seconds"]}


def prepare(log=print) -> None:
    """Train and evaluate every desk-scale run the suite needs."""
    ROOT.mkdir(parents=True, exist_ok=True)
    for seed in SEEDS:
        for algorithm in ALGORITHMS:
            analyzed(algorithm, seed, log)
            if algorithm != "anil":
                shifted_accuracy(algorithm, seed, log)
        for rate in HEAD_RATES:
            head_rate_accuracy(rate, seed, log)
        log(f"seed {seed} done")


def _grid(summary: dict, layer: str, state: str, metric: str) -> float:
    for g_layer, g_state, g_metric, value in summary["grid"]:
        if (g_layer, g_state, g_metric) == (layer, state, metric):
            return value
    raise KeyError((layer, state, metric))


@pytest.fixture(scope="module")
def desk():
    ROOT.mkdir(parents=True, exist_ok=True)
    return {(a, s): analyzed(a, s) for a in ALGORITHMS for s in SEEDS}


@pytest.mark.desk
def test_criterion_7_nil_before_after_pattern(desk):
    def mean(algorithm, fn):
        return float(np.mean([fn(desk[algorithm, s]["summary"]) for s in SEEDS]))

    head_before = {a: mean(a, lambda s: _grid(s, HEAD, "before", "acc")) for a in ALGORITHMS}
    nil_gain = {
        a: mean(a, lambda s: _grid(s, LAST_CONV, "after", "nil_acc") - _grid(s, LAST_CONV, "before", "nil_acc"))
        for a in ALGORITHMS
    }
    cpu = max(r["cpu_seconds"] for r in desk.values())
    checks = {
        "a": all(abs(v - 0.2) <= 0.05 for v in head_before.values()),
        "b": nil_gain["boil"] >= 0.15,
        "c": abs(nil_gain["maml"]) <= 0.05 and abs(nil_gain["anil"]) <= 0.05,
        "budget": cpu < CPU_BUDGET,
    }
    detail = (
        "head acc before " + " ".join(f"{a} {100 * v:.1f}" for a, v in head_before.items())
        + "; NIL gain " + " ".join(f"{a} {100 * v:+.1f}" for a, v in nil_gain.items())
        + f"; slowest run {cpu / 60:.1f} CPU-min (< 10); "
        + " ".join(f"({k}) {'ok' if v else 'FAIL'}" for k, v in checks.items())
    )
    ok = all(checks.values())
    record_acceptance(7, ok, detail)
    assert ok


@pytest.mark.desk
def test_criterion_8_shift_and_head_rate_patterns(desk):
    shifted = {a: [shifted_accuracy(a, s) for s in SEEDS] for a in ("boil", "maml")}
    margin = float(np.mean(shifted["boil"]) - np.mean(shifted["maml"]))
    rates = {r: [head_rate_accuracy(r, s) for s in SEEDS] for r in HEAD_RATES}
    frozen_head = float(np.mean([r["acc"] for r in rates[0.0]]))
    moving_head = float(np.mean([r["acc"] for r in rates[0.5]]))
    seeds_won = sum(a["acc"] >= b["acc"] for a, b in zip(rates[0.0], rates[0.5]))
    cpu = max(r["cpu_seconds"] for rs in rates.values() for r in rs)
    checks = {"a": margin >= 0.03, "b": frozen_head >= moving_head, "budget": cpu < CPU_BUDGET}
    detail = (
        f"severity 1.0: boil {100 * np.mean(shifted['boil']):.1f} vs maml {100 * np.mean(shifted['maml']):.1f} "
        f"(margin {100 * margin:+.1f}, >= 3); fine-grained head rate 0: {100 * frozen_head:.1f} vs 0.5: "
        f"{100 * moving_head:.1f} ({seeds_won}/5 seeds); slowest run {cpu / 60:.1f} CPU-min; "
        + " ".join(f"({k}) {'ok' if v else 'FAIL'}" for k, v in checks.items())
    )
    ok = all(checks.values())
    record_acceptance(8, ok, detail)
    assert ok


@pytest.mark.desk
def test_criterion_9_last_layer_cka_gap(desk):
    cka = {a: float(np.mean([desk[a, s]["summary"]["cka"][LAST_CONV] for s in SEEDS])) for a in ("boil", "maml")}
    gap = cka["maml"] - cka["boil"]
    ok = gap >= 0.2
    record_acceptance(9, ok, f"{LAST_CONV} CKA boil {cka['boil']:.3f} vs maml {cka['maml']:.3f} (gap {gap:.3f}, >= 0.2)")
    assert ok


if __name__ == "__main__":
    if sys.argv[1:] != ["prepare"]:
        sys.exit("usage: python tests/test_acceptance.py prepare")
    prepare()
