"""Representation analysis: how much does adaptation change each layer?

All instruments work on flattened post-module representations of the query
set, captured before and after the inner loop:

* intra/inter-class cosine similarity per layer,
* linear CKA between before- and after-adaptation representations,
* head-free template classification (a query takes the class whose mean
  support representation it is most cosine-similar to),
* norms of the inner-loop gradient per layer,
* the mean cosine between head row differences.

Cosines involving a (numerically) zero vector are defined as 0 throughout.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .meta import Episode, InnerLoopConfig, inner_adapt
from .nn import HEAD, ParameterSet

ZERO_NORM = 1e-12
STATES = ("before", "after")


def cosine(u, v) -> float:
    """Cosine similarity, 0 when either vector has norm below 1e-12.

    >>> round(cosine([1, 2], [3, 4]), 5)
    0.98387
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"cosine: length mismatch {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < ZERO_NORM or nv < ZERO_NORM:
        return 0.0
    return float(u @ v / (nu * nv))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms < ZERO_NORM, 1.0, norms)
    return np.where(norms < ZERO_NORM, 0.0, x / safe)


def cosine_matrix(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Pairwise cosines between rows of ``a`` and rows of ``b``."""
    ua = _unit_rows(a)
    ub = ua if b is None else _unit_rows(b)
    return ua @ ub.T


def class_similarity(reps: np.ndarray, labels) -> tuple[float, float]:
    """Mean cosine over unordered same-class pairs and different-class pairs."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("inter-class similarity needs at least two classes")
    c = cosine_matrix(reps)
    i, j = np.triu_indices(len(labels), 1)
    same = labels[i] == labels[j]
    if not same.any():
        raise ValueError("intra-class similarity needs two samples of some class")
    return float(c[i, j][same].mean()), float(c[i, j][~same].mean())


def representations(params: ParameterSet, x, layers: Sequence[str]) -> dict[str, np.ndarray]:
    """Flattened representations of ``x`` at ``layers`` (no record kept)."""
    with T.no_record():
        _, caught = nn.forward(params.detached(), x, capture=layers)
    return {name: caught[name].data for name in layers}


def adapt(params: ParameterSet, episode: Episode, inner: InnerLoopConfig) -> ParameterSet:
    """Adapted parameters for analysis (values only, nothing recorded)."""
    cfg = dataclasses.replace(inner, order="first")
    return inner_adapt(params.detached(), episode.support_x, episode.support_y, cfg).detached()


# ---------------------------------------------------------------------------
# reports


@dataclass
class SimilarityReport:
    """``values[layer][state] = (intra, inter)``."""

    values: dict[str, dict[str, tuple[float, float]]] = field(default_factory=dict)

    def rows(self):
        for layer, states in self.values.items():
            for state, (intra, inter) in states.items():
                yield layer, state, "intra_cosine", intra
                yield layer, state, "inter_cosine", inter


@dataclass
class CKAReport:
    """``values[layer]`` = CKA between before- and after-adaptation representations."""

    values: dict[str, float] = field(default_factory=dict)

    def rows(self):
        for layer, v in self.values.items():
            yield layer, "before_vs_after", "cka", v


@dataclass
class GradNormReport:
    """``values[group][kind]`` with kind in ``weight`` / ``bias`` / ``norm_scale_shift``."""

    values: dict[str, dict[str, float]] = field(default_factory=dict)

    def rows(self):
        for group, kinds in self.values.items():
            for kind, v in kinds.items():
                yield group, "before", f"grad_norm_{kind}", v


def similarity_report(
    params_before: ParameterSet, params_after: ParameterSet, episode: Episode, layers: Sequence[str]
) -> SimilarityReport:
    if episode.n < 2:
        raise ValueError("similarity report needs n >= 2 (inter-class pairs)")
    report = SimilarityReport()
    for state, params in zip(STATES, (params_before, params_after)):
        reps = representations(params, episode.query_x, layers)
        for layer in layers:
            report.values.setdefault(layer, {})[state] = class_similarity(reps[layer], episode.query_y)
    return report


def cka_linear(x, y) -> float:
    """Linear centered kernel alignment between two representation matrices.

    Args:
        x: ``(samples, features)``.
        y: ``(samples, features')`` with the same sample count.

    Returns:
        ``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)``, in [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"cka_linear: need (samples, features) with equal samples, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("cka_linear: need at least 2 samples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    if not np.any(xc) or not np.any(yc):
        raise ValueError("cka_linear: degenerate representation (zero variance)")
    # Gram-matrix form: ||Yc^T Xc||_F^2 = <Kx, Ky>_F with K = Xc Xc^T
    kx = xc @ xc.T
    ky = yc @ yc.T
    # sqrt(a * a) == a in IEEE arithmetic, so identical inputs give exactly 1
    return float(np.sum(kx * ky) / np.sqrt(np.sum(kx * kx) * np.sum(ky * ky)))


def cka_report(
    params_before: ParameterSet, params_after: ParameterSet, episode: Episode, layers: Sequence[str]
) -> CKAReport:
    before = representations(params_before, episode.query_x, layers)
    after = representations(params_after, episode.query_x, layers)
    return CKAReport({layer: cka_linear(before[layer], after[layer]) for layer in layers})


def template_predict(support_reps, support_y, query_reps, n: int | None = None) -> np.ndarray:
    """Predict each query as the class whose mean support representation is
    most cosine-similar; ties go to the lowest class index."""
    support_y = np.asarray(support_y)
    n = int(support_y.max()) + 1 if n is None else n
    templates = np.stack([np.asarray(support_reps, dtype=np.float64)[support_y == c].mean(axis=0) for c in range(n)])
    return np.argmax(cosine_matrix(query_reps, templates), axis=1)


def nil_test(params: ParameterSet, episode: Episode, layer: str, adapt_cfg: InnerLoopConfig | None = None) -> float:
    """Head-free query accuracy from class templates at ``layer``.

    With ``adapt_cfg`` the parameters are first adapted on the support set.
    Support and query sets are passed through the network separately, so
    each batch normalizes with its own statistics.
    """
    if adapt_cfg is not None:
        params = adapt(params, episode, adapt_cfg)
    s = representations(params, episode.support_x, [layer])[layer]
    q = representations(params, episode.query_x, [layer])[layer]
    pred = template_predict(s, episode.support_y, q, episode.n)
    return float(np.mean(pred == np.asarray(episode.query_y)))


def _param_kind(name: str) -> str:
    base = name.removeprefix("skip_").rstrip("0123456789")
    if base == "weight":
        return "weight"
    if base == "bias":
        return "bias"
    return "norm_scale_shift"


def grad_norm_report(params: ParameterSet, episode: Episode) -> GradNormReport:
    """Norms of the support-loss gradient per group, split by parameter kind.

    These are gradient norms, not applied updates: a group with zero inner
    rate still gets a (nonzero) entry.
    """
    theta = params.trainable()
    keys = [k for k, _ in theta.items()]
    loss = T.softmax_cross_entropy(nn.forward(theta, episode.support_x)[0], episode.support_y)
    grads = dict(zip(keys, T.gradient(loss, theta.tensors())))
    report = GradNormReport()
    for key, g in grads.items():
        group, name = key.split(".", 1)
        kinds = report.values.setdefault(group, {})
        kind = _param_kind(name)
        kinds[kind] = kinds.get(kind, 0.0) + float(np.sum(g.data.astype(np.float64) ** 2))
    for kinds in report.values.values():
        for kind in kinds:
            kinds[kind] = float(np.sqrt(kinds[kind]))
    return report


def head_gap_cosine(weight) -> float:
    """Mean of cosine(w_i - w_k, w_j - w_k) over ordered triples of distinct rows.

    Orthonormal rows give exactly 0.5.
    """
    w = np.asarray(weight.data if isinstance(weight, T.Tensor) else weight, dtype=np.float64)
    n = w.shape[0]
    if n < 3:
        raise ValueError(f"head_gap_cosine needs at least 3 rows, got {n}")
    total = 0.0
    for k in range(n):
        others = np.delete(w, k, axis=0) - w[k]
        c = cosine_matrix(others)
        total += c.sum() - np.trace(c)
    return float(total / (n * (n - 1) * (n - 2)))


def head_gap_cosine_bruteforce(weight) -> float:
    w = np.asarray(weight, dtype=np.float64)
    vals = [
        cosine(w[i] - w[k], w[j] - w[k])
        for i, j, k in itertools.permutations(range(w.shape[0]), 3)
    ]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# files


def dump_representations(
    params: ParameterSet, episode: Episode, layers: Sequence[str], path, inner: InnerLoopConfig
) -> list[Path]:
    """Write query representations before/after adaptation plus labels.

    Produces ``{layer}_{state}.mlt`` for every layer and state, and
    ``labels.mlt`` (query labels as floats), all ``(n*q, ...)`` archives.
    """
    path = Path(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise OSError(f"{path}: cannot create dump directory ({e.strerror})") from e
    written = []
    for state, p in zip(STATES, (params, adapt(params, episode, inner))):
        reps = representations(p, episode.query_x, layers)
        for layer in layers:
            target = path / f"{layer}_{state}.mlt"
            _write(target, reps[layer])
            written.append(target)
    target = path / "labels.mlt"
    _write(target, np.asarray(episode.query_y, dtype=np.float32))
    written.append(target)
    return written


def _write(target: Path, arr) -> None:
    try:
        T.write_archive(target, np.asarray(arr, dtype=np.float32))
    except OSError as e:
        raise OSError(f"{target}: {e.strerror or e}") from e


REPORT_COLUMNS = ("layer", "state", "metric", "value")


def write_report_csv(path, rows: Iterable[tuple]) -> None:
    """CSV with columns ``layer,state,metric,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for layer, state, metric, value in rows:
            w.writerow([layer, state, metric, repr(float(value))])
