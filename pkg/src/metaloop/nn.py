"""Backbones (ConvNet-k, MiniResNet) expressed over :mod:`metaloop.tensor`.

Parameters live in a :class:`ParameterSet`: one group per body layer plus a
``head`` group. Models are plain functions of (config, parameters), so an
inner-loop update just builds a new ParameterSet and calls :func:`forward`
again.
"""

from __future__ import annotations

import dataclasses
import io
import os
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

HEAD = "head"


@dataclass(frozen=True)
class BackboneConfig:
    family: str = "convnet"  # convnet | miniresnet
    depth: int = 4
    base_channels: int = 32
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 5
    disconnect_last_skip: bool = False
    leaky_slope: float = 0.01
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.family not in ("convnet", "miniresnet"):
            raise ValueError(f"unknown backbone family {self.family!r}")
        if self.depth < 1 or self.base_channels < 1 or self.num_classes < 1:
            raise ValueError("depth, base_channels and num_classes must be positive")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.disconnect_last_skip and self.family != "miniresnet":
            raise ValueError("disconnect_last_skip only applies to miniresnet")

    @property
    def prefix(self) -> str:
        return "conv" if self.family == "convnet" else "block"

    @property
    def layer_names(self) -> list[str]:
        return [f"{self.prefix}{i + 1}" for i in range(self.depth)]

    def channels(self, i: int) -> int:
        if self.family == "convnet":
            return self.base_channels
        return self.base_channels * 2**i

    def skip_enabled(self, i: int) -> bool:
        return not (self.disconnect_last_skip and i == self.depth - 1)

    def spatial_sizes(self) -> list[tuple[int, int]]:
        _, h, w = self.input_shape
        sizes = []
        for _ in range(self.depth):
            h, w = h // 2, w // 2
            sizes.append((h, w))
        return sizes

    @property
    def feature_dim(self) -> int:
        h, w = self.spatial_sizes()[-1]
        return self.channels(self.depth - 1) * h * w

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv_module | residual_block | linear_head
    in_channels: int
    out_channels: int
    skip_enabled: bool = False


def layer_specs(config: BackboneConfig) -> list[LayerSpec]:
    specs = []
    c_in = config.input_shape[0]
    kind = "conv_module" if config.family == "convnet" else "residual_block"
    for i in range(config.depth):
        c_out = config.channels(i)
        skip = kind == "residual_block" and config.skip_enabled(i)
        specs.append(LayerSpec(kind, c_in, c_out, skip))
        c_in = c_out
    specs.append(LayerSpec("linear_head", config.feature_dim, config.num_classes))
    return specs


class ParameterSet:
    """Ordered, named parameter groups: body layers first, ``head`` last.

    Treated as an immutable value; use :meth:`replace` or :meth:`map` to
    derive new sets.
    """

    def __init__(self, config: BackboneConfig, groups: Mapping[str, Mapping[str, Tensor]]):
        self.config = config
        self.groups = {g: dict(ps) for g, ps in groups.items()}

    @property
    def group_names(self) -> list[str]:
        return list(self.groups)

    @property
    def body_names(self) -> list[str]:
        return [g for g in self.groups if g != HEAD]

    def __getitem__(self, group: str) -> dict[str, Tensor]:
        return self.groups[group]

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for g, ps in self.groups.items():
            for name, t in ps.items():
                yield f"{g}.{name}", t

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.items()]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def map(self, fn: Callable[[str, str, Tensor], Tensor]) -> "ParameterSet":
        return ParameterSet(
            self.config,
            {g: {n: fn(g, n, t) for n, t in ps.items()} for g, ps in self.groups.items()},
        )

    def replace(self, group: str, **tensors: Tensor) -> "ParameterSet":
        groups = {g: dict(ps) for g, ps in self.groups.items()}
        groups[group].update(tensors)
        return ParameterSet(self.config, groups)

    def detached(self) -> "ParameterSet":
        return self.map(lambda g, n, t: T.detach(t))

    def trainable(self) -> "ParameterSet":
        """Fresh leaves (requires_grad) with the same values."""
        return self.map(lambda g, n, t: Tensor._wrap(t.data, True))

    def astype(self, precision: str) -> "ParameterSet":
        dt = T.PRECISIONS[precision]
        return self.map(lambda g, n, t: Tensor._wrap(t.data.astype(dt), t.requires_grad))

    def copy(self) -> "ParameterSet":
        return self.map(lambda g, n, t: Tensor._wrap(t.data.copy(), False))

    def equal(self, other: "ParameterSet") -> bool:
        """Bit-for-bit equality of names, shapes and values."""
        a, b = dict(self.items()), dict(other.items())
        return a.keys() == b.keys() and all(
            a[k].data.dtype == b[k].data.dtype and np.array_equal(a[k].data, b[k].data)
            for k in a
        )

    def __repr__(self):
        return f"ParameterSet({self.config.family}, groups={self.group_names}, n={self.num_parameters()})"


# ---------------------------------------------------------------------------


def build(config: BackboneConfig, seed: int = 0, precision: str = "f32") -> ParameterSet:
    """Initialize parameters deterministically from ``seed``.

    Conv kernels ~ N(0, 2/fan_in); head weights ~ U(-1/sqrt(d), 1/sqrt(d));
    biases and batch-norm shifts zero, batch-norm scales one.
    """
    sizes = config.spatial_sizes()
    if min(min(s) for s in sizes) < 1:
        raise ValueError(
            f"input {config.input_shape} too small for {config.depth} 2x2 pools"
        )
    rng = np.random.default_rng(seed)
    dt = T.PRECISIONS[precision]

    def conv(c_out, c_in, k):
        std = np.sqrt(2.0 / (c_in * k * k))
        return Tensor(rng.normal(0.0, std, size=(k, k, c_in, c_out)).astype(dt))

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dt))

    def ones(n):
        return Tensor(np.ones(n, dtype=dt))

    groups: dict[str, dict[str, Tensor]] = {}
    specs = layer_specs(config)
    for name, spec in zip(config.layer_names, specs):
        if spec.kind == "conv_module":
            groups[name] = {
                "weight": conv(spec.out_channels, spec.in_channels, 3),
                "bias": zeros(spec.out_channels),
                "gamma": ones(spec.out_channels),
                "beta": zeros(spec.out_channels),
            }
            continue
        g = {}
        c_in = spec.in_channels
        for j in (1, 2, 3):
            g[f"weight{j}"] = conv(spec.out_channels, c_in, 3)
            g[f"bias{j}"] = zeros(spec.out_channels)
            g[f"gamma{j}"] = ones(spec.out_channels)
            g[f"beta{j}"] = zeros(spec.out_channels)
            c_in = spec.out_channels
        if spec.skip_enabled and spec.in_channels != spec.out_channels:
            g["skip_weight"] = conv(spec.out_channels, spec.in_channels, 1)
            g["skip_bias"] = zeros(spec.out_channels)
        groups[name] = g

    d, n = config.feature_dim, config.num_classes
    bound = 1.0 / np.sqrt(d)
    groups[HEAD] = {
        "weight": Tensor(rng.uniform(-bound, bound, size=(n, d)).astype(dt)),
        "bias": zeros(n),
    }
    return ParameterSet(config, groups)


def _conv_bn(x, w, b, gamma, beta, eps, padding=1):
    # batch norm subtracts the per-channel mean, which cancels a conv bias
    # exactly; ``b`` stays a parameter (its gradient is identically zero)
    # but is not applied, saving a pass over the activations
    del b
    return T.batch_norm(T.conv2d(x, w, padding=padding), gamma, beta, eps)


def _conv_module(p, x, cfg):
    y = _conv_bn(x, p["weight"], p["bias"], p["gamma"], p["beta"], cfg.bn_eps)
    # max pooling commutes with the monotone ReLU (values and gradients), and
    # rectifying after pooling touches a quarter of the entries
    return T.relu(T.max_pool2d(y, 2))


def _residual_block(p, x, cfg, skip_enabled):
    y = x
    for j in (1, 2, 3):
        y = _conv_bn(y, p[f"weight{j}"], p[f"bias{j}"], p[f"gamma{j}"], p[f"beta{j}"], cfg.bn_eps)
        y = T.leaky_relu(y, cfg.leaky_slope)
    if skip_enabled:
        s = x
        if "skip_weight" in p:
            s = T.bias_add(T.conv2d(x, p["skip_weight"], padding=0), p["skip_bias"])
        y = T.residual_add(y, s)
    return T.max_pool2d(y, 2)


def body(params: ParameterSet, x, capture: Iterable[str] = ()) -> tuple[Tensor, dict[str, Tensor]]:
    """Run the body only; returns flattened features and captured layers."""
    cfg = params.config
    x = _as_input(x, params)
    want = _check_capture(cfg, capture)
    caught: dict[str, Tensor] = {}
    for i, name in enumerate(cfg.layer_names):
        p = params[name]
        if cfg.family == "convnet":
            x = _conv_module(p, x, cfg)
        else:
            x = _residual_block(p, x, cfg, cfg.skip_enabled(i))
        if name in want:
            caught[name] = T.flatten(x)
    return T.flatten(x), caught


def forward(params: ParameterSet, x, capture: Iterable[str] = ()) -> tuple[Tensor, dict[str, Tensor]]:
    """Logits ``(batch, n)`` and requested representations, in layer order.

    ``capture`` may name any body layer, or ``head`` for the logits.
    """
    feats, caught = body(params, x, capture)
    h = params[HEAD]
    logits = T.linear(feats, h["weight"], h["bias"])
    if HEAD in set(capture):
        caught[HEAD] = logits
    return logits, caught


def _check_capture(cfg: BackboneConfig, capture) -> set[str]:
    want = set(capture)
    valid = cfg.layer_names + [HEAD]
    bad = want - set(valid)
    if bad:
        raise KeyError(f"unknown capture layer(s) {sorted(bad)}; valid names: {valid}")
    return want


def _as_input(x, params: ParameterSet) -> Tensor:
    cfg = params.config
    prec = params[HEAD]["weight"].precision
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 4 or tuple(arr.shape[1:]) != cfg.input_shape:
        raise T.ShapeError(f"forward: expected (N, {cfg.input_shape}) input, got {arr.shape}")
    # images arrive as (N, C, H, W); the engine is channels-last
    return Tensor._wrap(np.ascontiguousarray(arr.transpose(0, 2, 3, 1), dtype=T.PRECISIONS[prec]))


# ---------------------------------------------------------------------------
# head variants


def gram_schmidt(rows: np.ndarray, tol: float = 1e-8) -> np.ndarray | None:
    """Orthonormalize rows in order (modified Gram-Schmidt, two passes).

    Returns ``None`` if the rows are numerically rank deficient.
    """
    q = np.array(rows, dtype=np.float64)
    scale = max(np.linalg.norm(q, axis=1).max(initial=0.0), 1.0)
    for i in range(q.shape[0]):
        for _ in range(2):
            for j in range(i):
                q[i] -= (q[i] @ q[j]) * q[j]
        norm = np.linalg.norm(q[i])
        if norm < tol * scale:
            return None
        q[i] /= norm
    return q


def orthonormalize_head(params: ParameterSet, seed: int = 0, max_retries: int = 8) -> ParameterSet:
    """Head rows made orthonormal by Gram-Schmidt; head bias zeroed.

    A rank-deficient head is replaced by a random draw (``seed``, ``seed+1``,
    ...), up to ``max_retries`` times.
    """
    w = params[HEAD]["weight"].data
    n, d = w.shape
    if n > d:
        raise ValueError(f"cannot orthonormalize {n} rows in {d} dimensions")
    q = gram_schmidt(w)
    attempt = 0
    while q is None:
        if attempt >= max_retries:
            raise RuntimeError(f"head still rank deficient after {max_retries} redraws")
        q = gram_schmidt(np.random.default_rng(seed + attempt).normal(size=(n, d)))
        attempt += 1
    dt = w.dtype
    return params.replace(
        HEAD,
        weight=Tensor(q.astype(dt)),
        bias=Tensor(np.zeros(n, dtype=dt)),
    )


def center_head(params: ParameterSet) -> ParameterSet:
    """Subtract the mean head row from every row (softmax is unchanged)."""
    w = params[HEAD]["weight"].data
    return params.replace(HEAD, weight=Tensor(w - w.mean(axis=0, keepdims=True)))


# ---------------------------------------------------------------------------
# checkpoint ("MLP1")

CHECKPOINT_MAGIC = b"MLP1"


def save_checkpoint(params: ParameterSet, path) -> None:
    buf = io.BytesIO()
    entries = list(params.items())
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(entries)))
    for name, t in entries:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        T.write_archive(buf, t.data)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Raw ``group.param -> array`` entries of a checkpoint file."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
        (count,) = struct.unpack("<I", fh.read(4))
        out = {}
        for _ in range(count):
            (length,) = struct.unpack("<I", fh.read(4))
            name = fh.read(length).decode("utf-8")
            out[name] = T.read_archive(fh)
    return out


def load_checkpoint(path, config: BackboneConfig) -> ParameterSet:
    """Load parameters and check them against the layout ``config`` implies."""
    raw = read_checkpoint(path)
    template = build(config, seed=0)
    expected = {k: t.shape for k, t in template.items()}
    got = {k: a.shape for k, a in raw.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
        raise ValueError(
            f"{path}: checkpoint does not match backbone config "
            f"(missing={missing}, unexpected={extra}, shape mismatch={wrong})"
        )
    return template.map(lambda g, n, t: Tensor(raw[f"{g}.{n}"]))
