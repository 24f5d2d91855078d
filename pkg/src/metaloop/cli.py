"""Experiment harness and command line interface.

A run is described by one JSON document (:class:`ExperimentConfig`); every
command first writes the fully resolved config to ``<out>/config.json`` so a
run can be replayed from its own output directory.

Commands::

    metaloop train          --config cfg.json --out runs/boil
    metaloop eval           --config cfg.json --checkpoint runs/boil/best.ckpt --out ev
    metaloop crossdomain    --config cfg.json --checkpoint boil=runs/boil/best.ckpt --severity 0,0.5,1
    metaloop ablate         --config cfg.json --axis head_lr --values 0,0.5 --out abl
    metaloop analyze        --config cfg.json --checkpoint runs/boil/best.ckpt --out an
    metaloop export-dataset --config cfg.json --out data/
"""

from __future__ import annotations

import argparse
import concurrent.futures
import contextlib
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, meta, nn, tasks
from .meta import InnerLoopConfig, OuterLoopConfig
from .nn import HEAD, BackboneConfig
from .tasks import DomainSpec

METRIC_COLUMNS = ("step", "meta_loss", "val_acc_before", "val_acc_after")
THREADS_ENV = "METALOOP_THREADS"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class InnerSettings:
    """How the inner-loop rates are chosen.

    Precedence: explicit ``rates`` > ``learn_layers``/``learn_head`` subset >
    ``alpha_body``/``alpha_head`` > ``algorithm`` preset with ``alpha``.
    """

    algorithm: str | None = "boil"
    alpha: float = 0.5
    alpha_body: float | None = None
    alpha_head: float | None = None
    learn_layers: tuple[str, ...] | None = None
    learn_head: bool = False
    rates: dict | None = None
    steps: int = 1
    test_steps: int | None = None
    order: str = "second"

    def __post_init__(self):
        if self.learn_layers is not None:
            object.__setattr__(self, "learn_layers", tuple(self.learn_layers))
        if self.algorithm is not None and self.algorithm not in meta.PRESETS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {sorted(meta.PRESETS)}")

    def build(self, groups: Sequence[str], test: bool = False) -> InnerLoopConfig:
        steps = self.test_steps if (test and self.test_steps is not None) else self.steps
        kw = dict(steps=steps, order=self.order)
        if self.rates is not None:
            return InnerLoopConfig(self.rates, **kw)
        if self.learn_layers is not None:
            return meta.layer_subset_config(groups, self.learn_layers, self.learn_head, self.alpha, **kw)
        if self.alpha_body is not None or self.alpha_head is not None:
            ab = self.alpha if self.alpha_body is None else self.alpha_body
            ah = self.alpha if self.alpha_head is None else self.alpha_head
            return meta.split_rates(groups, ab, ah, **kw)
        if self.algorithm is None:
            raise ValueError("inner settings name no algorithm and no explicit rates")
        return meta.preset(self.algorithm, groups, self.alpha, **kw)


@dataclass(frozen=True)
class EpisodeSettings:
    n: int = 5
    k: int = 5
    q: int = 15


@dataclass(frozen=True)
class EvalSettings:
    """Validation/test schedule.

    Validation runs every ``every`` outer steps on ``val_episodes`` episodes
    drawn once from ``seed``; the best checkpoint by post-adaptation accuracy
    is kept. Test evaluation uses ``batches`` x ``episodes`` episodes.
    """

    every: int = 100
    val_episodes: int = 100
    batches: int = 5
    episodes: int = 200
    seed: int = 1234


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig = BackboneConfig()
    inner: InnerSettings = InnerSettings()
    outer: OuterLoopConfig = OuterLoopConfig()
    domain: DomainSpec = DomainSpec()
    dataset: str | None = None
    episode: EpisodeSettings = EpisodeSettings()
    evaluation: EvalSettings = EvalSettings()
    seed: int = 0

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self) -> None:
        """Cross-field checks; raises :class:`ConfigError` before any compute."""
        groups = self.backbone.layer_names + [HEAD]
        try:
            inner = self.inner.build(groups)
            if self.inner.rates is not None:
                unknown = [g for g, _ in inner.rates if g not in groups]
                if unknown:
                    raise KeyError(f"inner rates name unknown groups {unknown}; valid: {groups}")
        except (KeyError, ValueError) as e:
            raise ConfigError(f"inner: {e}") from None
        if self.dataset is None and self.domain.image_shape != self.backbone.input_shape:
            raise ConfigError(
                f"domain image_shape {self.domain.image_shape} != backbone input_shape {self.backbone.input_shape}"
            )
        if self.episode.n != self.backbone.num_classes:
            raise ConfigError(f"episode n={self.episode.n} != backbone num_classes={self.backbone.num_classes}")
        if min(self.episode.n, self.episode.k, self.episode.q) < 1:
            raise ConfigError("episode n, k and q must be positive")
        if self.evaluation.every < 1 or self.evaluation.val_episodes < 1:
            raise ConfigError("evaluation.every and evaluation.val_episodes must be positive")
        if self.dataset is None and self.episode.n > min(self.domain.val_classes, self.domain.test_classes):
            raise ConfigError(f"{self.episode.n}-way episodes need at least {self.episode.n} val and test classes")


_NESTED = {
    "backbone": BackboneConfig,
    "inner": InnerSettings,
    "outer": OuterLoopConfig,
    "domain": DomainSpec,
    "episode": EpisodeSettings,
    "evaluation": EvalSettings,
}


def _construct(cls, data, where: str, nested: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; valid keys: {sorted(known)}")
    kwargs = {}
    for key, value in data.items():
        if key in nested:
            value = _construct(nested[key], value, f"{where}.{key}", {})
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _construct(ExperimentConfig, data, "config", _NESTED)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(data)


def desk_config(algorithm: str = "boil", seed: int = 0, size: int = 16, **domain) -> ExperimentConfig:
    """Defaults scaled to finish a 2000-step run in minutes on one CPU core."""
    shape = (3, size, size)
    return ExperimentConfig(
        backbone=BackboneConfig(input_shape=shape),
        inner=InnerSettings(algorithm=algorithm),
        domain=DomainSpec(image_shape=shape, **domain),
        seed=seed,
    )


def write_snapshot(cfg: ExperimentConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# execution helpers


def thread_count(deterministic: bool) -> int:
    if deterministic:
        return 1
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


@contextlib.contextmanager
def execution(deterministic: bool):
    """Yield an ordered ``map`` honoring the thread cap; BLAS is capped too."""
    n = thread_count(deterministic)
    with threadpool_limits(limits=n):
        if n == 1:
            yield map
        else:
            with concurrent.futures.ThreadPoolExecutor(max_workers=n) as pool:
                yield pool.map


def open_source(cfg: ExperimentConfig):
    if cfg.dataset is not None:
        return tasks.load_dataset(cfg.dataset)
    return tasks.make_domain(cfg.domain)


def _episodes(domain, split: str, cfg: ExperimentConfig, count: int, seed) -> list[meta.Episode]:
    rng = np.random.default_rng(seed)
    e = cfg.episode
    return [tasks.sample_episode(domain, split, e.n, e.k, e.q, rng) for _ in range(count)]


def validation_episodes(domain, cfg: ExperimentConfig) -> list[meta.Episode]:
    return _episodes(domain, "val", cfg, cfg.evaluation.val_episodes, [cfg.evaluation.seed, 2])


def test_batch_seed(cfg: ExperimentConfig, batch: int) -> list[int]:
    return [cfg.evaluation.seed, 3, batch]


def initial_params(cfg: ExperimentConfig) -> nn.ParameterSet:
    params = nn.build(cfg.backbone, seed=cfg.seed)
    if cfg.outer.head_variant == "fix":
        params = nn.orthonormalize_head(params, seed=cfg.seed)
    return params


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# train


@dataclass
class RunArtifact:
    out: Path
    metrics: Path
    report: Path
    checkpoint: Path
    config: Path
    summary: dict = field(default_factory=dict)


def _artifact(out: Path, summary: dict) -> RunArtifact:
    return RunArtifact(out, out / "metrics.csv", out / "final.json", out / "best.ckpt", out / "config.json", summary)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def cmd_train(
    cfg: ExperimentConfig,
    out,
    deterministic: bool = False,
    reuse: bool = False,
    log=None,
) -> RunArtifact:
    """Meta-train, validating periodically and keeping the best checkpoint.

    Writes ``config.json``, ``metrics.csv`` (one row per validation),
    ``best.ckpt`` and ``final.json``. With ``reuse=True`` a finished run with
    the same config hash in ``out`` is returned without recomputation.
    """
    cfg.validate()
    out = Path(out)
    if reuse and (out / "final.json").is_file() and (out / "best.ckpt").is_file():
        summary = json.loads((out / "final.json").read_text())
        if summary.get("config_hash") == cfg.config_hash():
            return _artifact(out, summary)
    write_snapshot(cfg, out)
    t0 = time.process_time()
    wall0 = time.time()
    domain = open_source(cfg)
    params = initial_params(cfg)
    groups = params.group_names
    inner = cfg.inner.build(groups)
    inner_test = cfg.inner.build(groups, test=True)
    optimizer = meta.OuterOptimizer(cfg.outer)
    val = validation_episodes(domain, cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    e = cfg.episode
    ckpt = out / "best.ckpt"
    nn.save_checkpoint(params, ckpt)
    best = {"step": 0, "val_acc_before": None, "val_acc_after": None}
    losses: list[float] = []
    with execution(deterministic) as pmap, open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for step in range(1, cfg.outer.steps + 1):
            batch = [tasks.sample_episode(domain, "train", e.n, e.k, e.q, rng) for _ in range(cfg.outer.meta_batch_size)]
            params, report = meta.meta_step(params, batch, inner, cfg.outer, optimizer)
            losses.append(report.meta_loss)
            if step % cfg.evaluation.every == 0 or step == cfg.outer.steps:
                before, after = meta.meta_test(params, val, inner_test, map_fn=pmap)
                row = (step, float(np.mean(losses)), float(np.mean(before)), float(np.mean(after)))
                losses = []
                writer.writerow([row[0]] + [_fmt(v) for v in row[1:]])
                fh.flush()
                if best["val_acc_after"] is None or row[3] > best["val_acc_after"]:
                    best = {"step": step, "val_acc_before": row[2], "val_acc_after": row[3]}
                    nn.save_checkpoint(params, ckpt)
                if log:
                    log(f"step {step:5d}  meta_loss {row[1]:.4f}  val {row[2]:.4f} -> {row[3]:.4f}")
    summary = {
        "config_hash": cfg.config_hash(),
        "steps": cfg.outer.steps,
        "best_step": best["step"],
        "best_val_acc_before": best["val_acc_before"],
        "best_val_acc_after": best["val_acc_after"],
        "checkpoint": ckpt.name,
    }
    full = dict(summary)
    full["timestamp"] = {
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "cpu_seconds": round(time.process_time() - t0, 3),
        "wall_seconds": round(time.time() - wall0, 3),
    }
    (out / "final.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")
    return _artifact(out, full)


def report_without_timestamp(path) -> dict:
    data = json.loads(Path(path).read_text())
    data.pop("timestamp", None)
    return data


# ---------------------------------------------------------------------------
# eval


def _summarize(before_batches, after_batches) -> dict:
    bm = np.array([np.mean(b) for b in before_batches])
    am = np.array([np.mean(a) for a in after_batches])
    return {
        "acc_before_mean": float(bm.mean()),
        "acc_before_std": float(bm.std()),
        "acc_after_mean": float(am.mean()),
        "acc_after_std": float(am.std()),
        "batch_means_after": [float(v) for v in am],
    }


def evaluate(
    params: nn.ParameterSet,
    cfg: ExperimentConfig,
    domain,
    inner: InnerLoopConfig,
    num_episodes: int | None = None,
    batches: int | None = None,
    split: str = "test",
    pmap=map,
) -> dict:
    """Mean and std over independently seeded episode batches.

    ``split="val"`` replays the exact validation episodes used in training.
    """
    if split == "val":
        eps_batches = [validation_episodes(domain, cfg)]
    else:
        num_episodes = num_episodes or cfg.evaluation.episodes
        batches = batches or cfg.evaluation.batches
        eps_batches = [_episodes(domain, split, cfg, num_episodes, test_batch_seed(cfg, b)) for b in range(batches)]
    before, after = [], []
    for eps in eps_batches:
        b, a = meta.meta_test(params, eps, inner, map_fn=pmap)
        before.append(b)
        after.append(a)
    return _summarize(before, after)


def parse_steps(spec) -> list[int] | None:
    """``None``, ``3``, ``"1-10"`` or ``"1,2,5"`` to a list of step counts."""
    if spec is None:
        return None
    if isinstance(spec, int):
        return [spec]
    if isinstance(spec, (list, tuple)):
        return [int(s) for s in spec]
    spec = str(spec)
    if "-" in spec:
        lo, hi = spec.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in spec.split(",")]


def cmd_eval(
    checkpoint,
    cfg: ExperimentConfig,
    num_episodes: int | None = None,
    adapt_steps=None,
    out=None,
    deterministic: bool = False,
    split: str = "test",
    batches: int | None = None,
) -> list[dict]:
    """Evaluate a checkpoint; one summary row per adaptation step count."""
    cfg.validate()
    if out is not None:
        write_snapshot(cfg, Path(out))
    params = nn.load_checkpoint(checkpoint, cfg.backbone)
    domain = open_source(cfg)
    groups = params.group_names
    steps = parse_steps(adapt_steps) or [cfg.inner.build(groups, test=True).steps]
    rows = []
    with execution(deterministic) as pmap:
        for s in steps:
            inner = cfg.inner.build(groups, test=True).with_steps(s)
            row = {"adapt_steps": s, **evaluate(params, cfg, domain, inner, num_episodes, batches, split, pmap)}
            rows.append(row)
    if out is not None:
        _write_rows(Path(out) / "eval.csv", rows)
    return rows


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    cols = [k for k in rows[0] if not isinstance(rows[0][k], list)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


# ---------------------------------------------------------------------------
# cross-domain


def cmd_crossdomain(
    checkpoints,
    cfg: ExperimentConfig,
    severities: Sequence[float] = (0.0, 0.5, 1.0),
    num_episodes: int | None = None,
    out=None,
    deterministic: bool = False,
    batches: int | None = None,
) -> list[dict]:
    """Evaluate checkpoints on increasingly shifted target domains.

    Args:
        checkpoints: a path, or a mapping label -> path for side-by-side rows.
        cfg: the source-domain experiment config.
        severities: shift severities in [0, 1]; 0 is the source domain itself.
    """
    cfg.validate()
    if cfg.dataset is not None:
        raise ConfigError("cross-domain evaluation needs a synthetic source domain")
    if not isinstance(checkpoints, dict):
        checkpoints = {"model": checkpoints}
    if out is not None:
        write_snapshot(cfg, Path(out))
    loaded = {label: nn.load_checkpoint(path, cfg.backbone) for label, path in checkpoints.items()}
    rows = []
    with execution(deterministic) as pmap:
        for sev in severities:
            target = tasks.make_domain(tasks.shift_domain(cfg.domain, sev))
            for label, params in loaded.items():
                inner = cfg.inner.build(params.group_names, test=True)
                row = {"severity": float(sev), "model": label}
                row.update(evaluate(params, cfg, target, inner, num_episodes, batches, "test", pmap))
                rows.append(row)
    if out is not None:
        _write_rows(Path(out) / "crossdomain.csv", rows)
    return rows


# ---------------------------------------------------------------------------
# ablation

AXES = ("head_lr", "layers", "head_variant")


def ablation_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """The config of one ablation row; seeds are shared across rows."""
    if axis == "head_lr":
        alpha_body = cfg.inner.alpha if cfg.inner.alpha_body is None else cfg.inner.alpha_body
        inner = dataclasses.replace(
            cfg.inner, algorithm=None, alpha_body=alpha_body, alpha_head=float(value),
            learn_layers=None, rates=None,
        )
        return dataclasses.replace(cfg, inner=inner)
    if axis == "layers":
        names = [value] if isinstance(value, str) else list(value)
        inner = dataclasses.replace(
            cfg.inner, learn_layers=tuple(n for n in names if n != HEAD), learn_head=HEAD in names, rates=None
        )
        return dataclasses.replace(cfg, inner=inner)
    if axis == "head_variant":
        return dataclasses.replace(cfg, outer=dataclasses.replace(cfg.outer, head_variant=str(value)))
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {list(AXES)}")


def _label(value) -> str:
    if isinstance(value, (list, tuple)):
        return "+".join(value)
    return str(value)


def cmd_ablate(
    cfg: ExperimentConfig,
    axis: str,
    values: Sequence,
    out,
    deterministic: bool = False,
    reuse: bool = True,
    num_episodes: int | None = None,
    log=None,
) -> list[dict]:
    """Train and evaluate once per axis value.

    Writes ``ablation.csv`` (one summary row per value) and ``curves.csv``
    (all validation curves, tagged with the value).
    """
    out = Path(out)
    configs = [ablation_config(cfg, axis, v) for v in values]
    for c in configs:
        c.validate()
    write_snapshot(cfg, out)
    rows, curves = [], []
    for value, c in zip(values, configs):
        label = _label(value)
        run = cmd_train(c, out / f"{axis}_{label}", deterministic=deterministic, reuse=reuse, log=log)
        ev = cmd_eval(run.checkpoint, c, num_episodes=num_episodes, deterministic=deterministic)[0]
        rows.append({"axis": axis, "value": label, "best_val_acc_after": run.summary["best_val_acc_after"], **ev})
        for r in read_metrics(run.metrics):
            curves.append({"value": label, **r})
    _write_rows(out / "ablation.csv", rows)
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("value",) + METRIC_COLUMNS)
        for r in curves:
            w.writerow([r["value"], int(r["step"])] + [_fmt(r[k]) for k in METRIC_COLUMNS[1:]])
    return rows


# ---------------------------------------------------------------------------
# analysis


def cmd_analyze(
    checkpoint,
    cfg: ExperimentConfig,
    layers: Sequence[str] | None = None,
    out=None,
    num_episodes: int = 50,
    deterministic: bool = False,
) -> dict:
    """Representation analysis of a checkpoint on meta-test episodes.

    Metrics are averaged over ``num_episodes`` episodes. Writes
    ``similarity.csv``, ``cka.csv``, ``gradnorm.csv``, ``nil.csv`` (the
    with/without head x before/after grid), ``summary.json`` and
    representation dumps of the first episode under ``dumps/``.
    """
    cfg.validate()
    out = Path(out) if out is not None else None
    if out is not None:
        write_snapshot(cfg, out)
    params = nn.load_checkpoint(checkpoint, cfg.backbone)
    layers = list(layers or cfg.backbone.layer_names)
    body_layers = cfg.backbone.layer_names
    nil_layers = body_layers[-2:]
    inner = cfg.inner.build(params.group_names, test=True)
    domain = open_source(cfg)
    eps = _episodes(domain, "test", cfg, num_episodes, [cfg.evaluation.seed, 4])

    def one(ep):
        after = analysis.adapt(params, ep, inner)
        before_acc, after_acc = meta.evaluate_episode(params, ep, inner)
        res = {
            "sim": analysis.similarity_report(params, after, ep, layers).values,
            "cka": analysis.cka_report(params, after, ep, layers).values,
            "grad": analysis.grad_norm_report(params, ep).values,
            "head": (before_acc, after_acc),
            "nil": {
                layer: (analysis.nil_test(params, ep, layer), analysis.nil_test(after, ep, layer))
                for layer in nil_layers
            },
        }
        return res

    with execution(deterministic) as pmap:
        results = list(pmap(one, eps))

    sim = analysis.SimilarityReport(
        {
            layer: {
                state: tuple(float(np.mean([r["sim"][layer][state][i] for r in results])) for i in (0, 1))
                for state in analysis.STATES
            }
            for layer in layers
        }
    )
    cka = analysis.CKAReport({layer: float(np.mean([r["cka"][layer] for r in results])) for layer in layers})
    grad = analysis.GradNormReport(
        {
            g: {kind: float(np.mean([r["grad"][g][kind] for r in results])) for kind in kinds}
            for g, kinds in results[0]["grad"].items()
        }
    )
    grid = [(HEAD, state, "acc", float(np.mean([r["head"][i] for r in results]))) for i, state in enumerate(analysis.STATES)]
    for layer in nil_layers:
        for i, state in enumerate(analysis.STATES):
            grid.append((layer, state, "nil_acc", float(np.mean([r["nil"][layer][i] for r in results]))))
    summary = {
        "similarity": sim.values,
        "cka": cka.values,
        "grad_norm": grad.values,
        "grid": [list(r) for r in grid],
        "head_gap_cosine": analysis.head_gap_cosine(params[HEAD]["weight"].data),
        "episodes": num_episodes,
    }
    if out is not None:
        analysis.write_report_csv(out / "similarity.csv", sim.rows())
        analysis.write_report_csv(out / "cka.csv", cka.rows())
        analysis.write_report_csv(out / "gradnorm.csv", grad.rows())
        analysis.write_report_csv(out / "nil.csv", grid)
        analysis.dump_representations(params, eps[0], layers, out / "dumps", inner)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_export_dataset(cfg: ExperimentConfig, out, per_class: int | None = None) -> Path:
    """Write the configured synthetic domain in the on-disk dataset format."""
    out = Path(out)
    write_snapshot(cfg, out)
    return tasks.export_dataset(tasks.make_domain(cfg.domain), out, per_class)


# ---------------------------------------------------------------------------
# command line


def _parse_values(axis: str, text: str) -> list:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if axis == "head_lr":
        return [float(v) for v in items]
    if axis == "layers":
        return [v.split("+") for v in items]
    return items


def _checkpoints(items: list[str]) -> dict | str:
    if len(items) == 1 and "=" not in items[0]:
        return items[0]
    out = {}
    for item in items:
        label, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--checkpoint {item!r}: use LABEL=PATH when giving several")
        out[label] = path
    return out


def _print_rows(rows: list[dict]) -> None:
    for r in rows:
        print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items() if not isinstance(v, list)))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metaloop", description="Gradient-based meta-learning experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", type=Path, help="experiment config (JSON); defaults apply when omitted")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, byte-reproducible")
        if checkpoint:
            p.add_argument("--checkpoint", action="append", required=True, help="PATH or LABEL=PATH")
        return p

    p = common(sub.add_parser("train", help="meta-train and keep the best validation checkpoint"))
    p.add_argument("--reuse", action="store_true", help="skip if a finished run with this config exists")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint on meta-test episodes"), checkpoint=True)
    p.add_argument("--episodes", type=int, help="episodes per batch")
    p.add_argument("--adapt-steps", help="N, A-B range or comma list of inner steps")
    p.add_argument("--split", default="test", choices=("test", "val"))
    p = common(sub.add_parser("crossdomain", help="evaluate on shifted target domains"), checkpoint=True)
    p.add_argument("--severity", default="0,0.5,1", help="comma-separated severities")
    p.add_argument("--episodes", type=int)
    p = common(sub.add_parser("ablate", help="train and evaluate along one axis"))
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--values", required=True, help="comma list; for layers join names with '+'")
    p.add_argument("--episodes", type=int)
    p = common(sub.add_parser("analyze", help="representation analysis of a checkpoint"), checkpoint=True)
    p.add_argument("--layers", help="comma-separated capture layers (default: all body layers)")
    p.add_argument("--episodes", type=int, default=50)
    p = common(sub.add_parser("export-dataset", help="write the synthetic domain to disk"))
    p.add_argument("--per-class", type=int, help="samples per class (default: whole pool)")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        cfg.validate()
        det = args.deterministic
        if args.command == "train":
            run = cmd_train(cfg, args.out, det, reuse=args.reuse, log=print)
            print(json.dumps(run.summary, indent=2, sort_keys=True))
        elif args.command == "eval":
            _print_rows(cmd_eval(args.checkpoint[0], cfg, args.episodes, args.adapt_steps, args.out, det, args.split))
        elif args.command == "crossdomain":
            sev = [float(s) for s in args.severity.split(",")]
            _print_rows(cmd_crossdomain(_checkpoints(args.checkpoint), cfg, sev, args.episodes, args.out, det))
        elif args.command == "ablate":
            values = _parse_values(args.axis, args.values)
            _print_rows(cmd_ablate(cfg, args.axis, values, args.out, det, num_episodes=args.episodes, log=print))
        elif args.command == "analyze":
            layers = args.layers.split(",") if args.layers else None
            summary = cmd_analyze(args.checkpoint[0], cfg, layers, args.out, args.episodes, det)
            for row in summary["grid"]:
                print("  ".join(str(v) for v in row))
        elif args.command == "export-dataset":
            print(cmd_export_dataset(cfg, args.out, args.per_class))
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"metaloop {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
