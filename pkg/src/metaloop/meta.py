"""Inner and outer loops of gradient-based meta-learning.

MAML, ANIL and BOIL differ only in which parameter groups move during the
inner loop, so a single :class:`InnerLoopConfig` holding one learning rate
per group covers all three (and any layer subset in between)::

    inner = boil(params.group_names, alpha=0.5)
    adapted = inner_adapt(params, episode.support_x, episode.support_y, inner)

The outer loop (:func:`meta_step`) sums query losses of the adapted
parameters over a meta-batch and differentiates through the inner updates.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .nn import HEAD, ParameterSet
from .tensor import Tensor

Model = Callable[[ParameterSet, object], Tensor]


def _logits(params: ParameterSet, x) -> Tensor:
    return nn.forward(params, x)[0]


@dataclass
class Episode:
    """One n-way k-shot task with labels already remapped to ``0..n-1``.

    Inputs are ``(N, C, H, W)`` float arrays. ``support_ids``/``query_ids``
    identify the drawn instances so disjointness can be checked.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n: int
    k: int
    q: int
    label_map: dict[int, int] = field(default_factory=dict)
    support_ids: tuple = ()
    query_ids: tuple = ()

    def __post_init__(self):
        for name, y, per in (("support", self.support_y, self.k), ("query", self.query_y, self.q)):
            counts = np.bincount(np.asarray(y, dtype=np.int64), minlength=self.n)
            if len(counts) != self.n or np.any(counts != per):
                raise ValueError(f"{name} must hold exactly {per} samples per label, got {counts.tolist()}")


# ---------------------------------------------------------------------------
# inner loop configuration


@dataclass(frozen=True)
class InnerLoopConfig:
    """Per-group inner learning rates, step count and derivative order.

    ``rates`` is stored as a sorted tuple of ``(group, rate)`` pairs so configs
    compare by value; groups absent from it have rate 0.
    """

    rates: tuple[tuple[str, float], ...]
    steps: int = 1
    order: str = "second"  # second | first

    def __post_init__(self):
        rates = self.rates.items() if isinstance(self.rates, Mapping) else self.rates
        rates = tuple(sorted((str(g), float(a)) for g, a in rates))
        object.__setattr__(self, "rates", rates)
        for g, a in rates:
            if not a >= 0.0:
                raise ValueError(f"inner learning rate for {g!r} must be >= 0, got {a}")
        if int(self.steps) < 1:
            raise ValueError(f"inner steps must be >= 1, got {self.steps}")
        if self.order not in ("second", "first"):
            raise ValueError(f"order must be 'second' or 'first', got {self.order!r}")

    def rate(self, group: str) -> float:
        return dict(self.rates).get(group, 0.0)

    def active_groups(self) -> list[str]:
        return [g for g, a in self.rates if a > 0.0]

    def check(self, params: ParameterSet) -> None:
        unknown = [g for g, _ in self.rates if g not in params.groups]
        if unknown:
            raise KeyError(f"inner config names unknown groups {unknown}; valid: {params.group_names}")

    def with_steps(self, steps: int) -> "InnerLoopConfig":
        return dataclasses.replace(self, steps=steps)


def _split(groups: Sequence[str]) -> tuple[list[str], str]:
    groups = list(groups.group_names if isinstance(groups, ParameterSet) else groups)
    if HEAD not in groups:
        raise KeyError(f"no {HEAD!r} group among {groups}")
    return [g for g in groups if g != HEAD], HEAD


def split_rates(groups, alpha_body: float, alpha_head: float, **kw) -> InnerLoopConfig:
    """One rate for every body group and another for the head."""
    body, head = _split(groups)
    rates = {g: alpha_body for g in body}
    rates[head] = alpha_head
    return InnerLoopConfig(rates, **kw)


def maml(groups, alpha: float = 0.5, **kw) -> InnerLoopConfig:
    return split_rates(groups, alpha, alpha, **kw)


def anil(groups, alpha: float = 0.5, **kw) -> InnerLoopConfig:
    return split_rates(groups, 0.0, alpha, **kw)


def boil(groups, alpha: float = 0.5, **kw) -> InnerLoopConfig:
    return split_rates(groups, alpha, 0.0, **kw)


PRESETS = {"maml": maml, "anil": anil, "boil": boil}


def preset(name: str, groups, alpha: float = 0.5, **kw) -> InnerLoopConfig:
    try:
        return PRESETS[name](groups, alpha, **kw)
    except KeyError:
        raise ValueError(f"unknown algorithm {name!r}; choose from {sorted(PRESETS)}") from None


def layer_subset_config(groups, learn, learn_head: bool, alpha: float, **kw) -> InnerLoopConfig:
    """Rate ``alpha`` for the named body layers (and optionally the head).

    Example:
        >>> cfg = layer_subset_config(["conv1", "conv2", "head"], {"conv2"}, False, 0.5)
        >>> cfg.active_groups()
        ['conv2']
    """
    body, head = _split(groups)
    learn = set(learn)
    bad = learn - set(body)
    if bad:
        raise KeyError(f"unknown body layers {sorted(bad)}; valid: {body}")
    if not learn and not learn_head:
        raise ValueError("layer subset learns nothing: give at least one layer or the head")
    rates = {g: (alpha if g in learn else 0.0) for g in body}
    rates[head] = alpha if learn_head else 0.0
    return InnerLoopConfig(rates, **kw)


# ---------------------------------------------------------------------------
# inner loop


def _check_support(params: ParameterSet, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise ValueError("support set is empty")
    head = params.groups.get(HEAD, {})
    n = head["weight"].shape[0] if "weight" in head else int(y.max()) + 1
    counts = np.bincount(y, minlength=n)
    if len(counts) > n:
        raise ValueError(f"support labels exceed the {n} head outputs")
    if np.any(counts == 0):
        raise ValueError(f"support set has no samples for class(es) {np.flatnonzero(counts == 0).tolist()}")
    return y


def inner_adapt(
    params: ParameterSet,
    support_x,
    support_y,
    cfg: InnerLoopConfig,
    model: Model = _logits,
    loss_fn: Callable | None = None,
) -> ParameterSet:
    """Take ``cfg.steps`` gradient steps on the support loss.

    Groups with a zero rate come back as the very same tensors. In second
    order mode the result stays differentiable with respect to ``params``;
    in first order mode the inner gradients are treated as constants.

    Args:
        params: starting parameters (meta-initialization).
        support_x: support inputs.
        support_y: support labels in ``0..n-1``; every class must appear.
        cfg: per-group rates, step count and order.
        model: maps (params, x) to logits; the backbone forward by default.
        loss_fn: optional ``(params, x, y) -> scalar`` replacing the softmax
            cross-entropy of ``model``'s logits.
    """
    cfg.check(params)
    y = _check_support(params, support_y)
    active = [(g, name) for g in cfg.active_groups() for name in params[g]]
    if not active:
        return params
    # inner gradients need a record even when the caller only evaluates
    cur = params.map(
        lambda g, n, t: t if (t.requires_grad or cfg.rate(g) == 0.0) else Tensor._wrap(t.data, True)
    )
    differentiable = cfg.order == "second" and any(t.requires_grad for t in params.tensors())
    for _ in range(cfg.steps):
        if loss_fn is None:
            loss = T.softmax_cross_entropy(model(cur, support_x), y)
        else:
            loss = loss_fn(cur, support_x, y)
        grads = T.gradient(loss, [cur[g][n] for g, n in active], differentiable=differentiable)
        updates: dict[str, dict[str, Tensor]] = {}
        for (g, name), grad in zip(active, grads):
            updates.setdefault(g, {})[name] = cur[g][name] - grad * cfg.rate(g)
        for g, ts in updates.items():
            cur = cur.replace(g, **ts)
    return cur


# ---------------------------------------------------------------------------
# outer loop


@dataclass(frozen=True)
class OuterLoopConfig:
    """Outer-loop settings.

    ``lr_body``/``lr_head`` override ``lr`` per side. ``head_variant`` is
    ``none``, ``centering`` (subtract the mean head row after each update) or
    ``fix`` (orthonormal head that never moves in the outer loop).
    """

    lr: float = 0.001
    lr_body: float | None = None
    lr_head: float | None = None
    meta_batch_size: int = 4
    steps: int = 2000
    head_variant: str = "none"
    optimizer: str = "adam"  # adam | sgd
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.head_variant not in ("none", "centering", "fix"):
            raise ValueError(f"unknown head_variant {self.head_variant!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.meta_batch_size < 1 or self.steps < 0:
            raise ValueError("meta_batch_size must be >= 1 and steps >= 0")
        if self.head_variant == "fix" and self.lr_head not in (None, 0.0):
            raise ValueError("head_variant='fix' requires a zero head outer rate")
        for r in (self.lr, self.lr_body, self.lr_head):
            if r is not None and r < 0:
                raise ValueError("outer learning rates must be >= 0")

    def group_lr(self, group: str) -> float:
        if group == HEAD:
            if self.head_variant == "fix":
                return 0.0
            return self.lr if self.lr_head is None else self.lr_head
        return self.lr if self.lr_body is None else self.lr_body


class OuterOptimizer:
    """Plain gradient descent or Adam over a ParameterSet.

    Adam keeps first/second moment estimates per ``group.param`` name, so one
    instance must be reused across the steps of a run.
    """

    def __init__(self, cfg: OuterLoopConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet, grads: Mapping[str, np.ndarray]) -> ParameterSet:
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.adam_betas

        def update(g, n, t):
            lr = cfg.group_lr(g)
            key = f"{g}.{n}"
            grad = grads[key]
            if cfg.optimizer == "sgd":
                return Tensor(t.data - lr * grad) if lr else Tensor(t.data)
            m = self.m.get(key, 0.0) * b1 + (1 - b1) * grad
            v = self.v.get(key, 0.0) * b2 + (1 - b2) * grad * grad
            self.m[key], self.v[key] = m, v
            if not lr:
                return Tensor(t.data)
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            step = lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            return Tensor((t.data - step).astype(t.data.dtype))

        return params.map(update)

    def state(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}


@dataclass
class MetaStepReport:
    meta_loss: float
    acc_before: list[float] | None  # None unless requested (it costs a query forward)
    acc_after: list[float]
    grad_norms: dict[str, float]


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax equals the label (ties -> lowest index)."""
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def meta_step(
    params: ParameterSet,
    episodes: Sequence[Episode],
    inner: InnerLoopConfig,
    outer: OuterLoopConfig,
    optimizer: OuterOptimizer | None = None,
    model: Model = _logits,
    accuracy_before: bool = False,
) -> tuple[ParameterSet, MetaStepReport]:
    """One outer update from a meta-batch of episodes.

    The meta-loss is the sum of per-episode query losses at the adapted
    parameters. Gradients are computed episode by episode and added in
    episode order, which keeps the result independent of scheduling.

    Args:
        params: current meta-initialization.
        episodes: exactly ``outer.meta_batch_size`` episodes.
        inner: inner-loop config.
        outer: outer-loop config.
        optimizer: stateful optimizer to reuse across steps; a fresh one is
            made when omitted (fine for SGD, resets Adam moments).
        model: maps (params, x) to logits.
        accuracy_before: also report query accuracy before adaptation, at
            the cost of one extra query forward pass per episode.
    """
    if len(episodes) != outer.meta_batch_size:
        raise ValueError(f"expected {outer.meta_batch_size} episodes, got {len(episodes)}")
    optimizer = optimizer or OuterOptimizer(outer)
    theta = params.trainable()
    names = [k for k, _ in theta.items()]
    leaves = theta.tensors()
    total = {k: np.zeros_like(t.data) for k, t in zip(names, leaves)}
    loss_sum = 0.0
    before, after = ([] if accuracy_before else None), []
    for ep in episodes:
        if accuracy_before:
            with T.no_record():
                before.append(accuracy(model(params, ep.query_x), ep.query_y))
        adapted = inner_adapt(theta, ep.support_x, ep.support_y, inner, model=model)
        logits = model(adapted, ep.query_x)
        loss = T.softmax_cross_entropy(logits, ep.query_y)
        after.append(accuracy(logits, ep.query_y))
        loss_sum += float(loss.data)
        for k, g in zip(names, T.gradient(loss, leaves)):
            total[k] += g.data
    norms = {
        g: float(np.sqrt(sum(np.sum(total[f"{g}.{n}"].astype(np.float64) ** 2) for n in params[g])))
        for g in params.group_names
    }
    new = optimizer.step(params, total)
    if outer.head_variant == "centering":
        new = nn.center_head(new)
    return new, MetaStepReport(loss_sum, before, after, norms)


def meta_gradient(
    params: ParameterSet, episodes: Sequence[Episode], inner: InnerLoopConfig, model: Model = _logits
) -> tuple[float, dict[str, np.ndarray]]:
    """Meta-loss and its gradient, without applying an update."""
    theta = params.trainable()
    names = [k for k, _ in theta.items()]
    leaves = theta.tensors()
    total = {k: np.zeros_like(t.data) for k, t in zip(names, leaves)}
    loss_sum = 0.0
    for ep in episodes:
        adapted = inner_adapt(theta, ep.support_x, ep.support_y, inner, model=model)
        loss = T.softmax_cross_entropy(model(adapted, ep.query_x), ep.query_y)
        loss_sum += float(loss.data)
        for k, g in zip(names, T.gradient(loss, leaves)):
            total[k] += g.data
    return loss_sum, total


def meta_loss(
    params: ParameterSet, episodes: Sequence[Episode], inner: InnerLoopConfig, model: Model = _logits
) -> float:
    """Sum of query losses after adaptation (no meta-gradient recorded)."""
    frozen = params.detached()
    total = 0.0
    for ep in episodes:
        adapted = inner_adapt(frozen, ep.support_x, ep.support_y, dataclasses.replace(inner, order="first"), model)
        with T.no_record():
            total += float(T.softmax_cross_entropy(model(adapted, ep.query_x), ep.query_y).data)
    return total


def evaluate_episode(
    params: ParameterSet, episode: Episode, inner: InnerLoopConfig, model: Model = _logits
) -> tuple[float, float]:
    """Query accuracy before and after adapting on the support set."""
    frozen = params.detached()
    with T.no_record():
        before = accuracy(model(frozen, episode.query_x), episode.query_y)
    adapted = inner_adapt(frozen, episode.support_x, episode.support_y, dataclasses.replace(inner, order="first"), model)
    with T.no_record():
        after = accuracy(model(adapted, episode.query_x), episode.query_y)
    return before, after


def meta_test(
    params: ParameterSet,
    episodes: Sequence[Episode],
    inner: InnerLoopConfig,
    adapt_steps_override: int | None = None,
    model: Model = _logits,
    map_fn=map,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-episode query accuracy before and after adaptation.

    ``params`` is never modified. ``map_fn`` may be an executor's ordered
    ``map`` to evaluate episodes concurrently; results keep episode order.
    """
    if adapt_steps_override is not None:
        inner = inner.with_steps(adapt_steps_override)
    results = list(map_fn(lambda ep: evaluate_episode(params, ep, inner, model), episodes))
    if not results:
        return np.zeros(0), np.zeros(0)
    before, after = zip(*results)
    return np.asarray(before), np.asarray(after)
