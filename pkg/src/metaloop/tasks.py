"""Few-shot task sources: seeded synthetic image domains and on-disk datasets.

A synthetic class is a sum of oriented sinusoidal gratings per latent
channel, mixed across colour channels. Instances of a class perturb the
grating phases, translate the image with wrap-around and add pixel noise,
so every sample is a pure function of ``(domain seed, class id, instance id)``.

Both :class:`SyntheticDomain` and :class:`DiskDataset` expose the same small
interface (``class_ids``, ``num_instances``, ``instance``), which is all
:func:`sample_episode` needs.
"""

from __future__ import annotations

import dataclasses
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .meta import Episode

SPLITS = ("train", "val", "test")
GRATINGS_PER_CHANNEL = 3
MAX_REDRAWS = 64
SIMILARITY_LIMIT = 0.9

DEFAULT_MIXING = ((0.6, 0.3, 0.1), (0.2, 0.6, 0.2), (0.1, 0.3, 0.6))


@dataclass(frozen=True)
class DomainSpec:
    """Parameters of a synthetic domain.

    Attributes:
        seed: root seed; prototypes and samples are deterministic in it.
        num_classes: total classes; the last ``val_classes + test_classes``
            ids form the validation and test splits.
        image_shape: ``(C, H, W)``.
        freq_band: grating spatial frequency range in cycles per image.
        contrast: grating amplitude range.
        mixing: ``C x C`` channel mixing matrix (``None`` means identity).
        max_shift: largest integer translation in pixels.
        max_phase: largest grating phase perturbation in radians.
        noise_std: standard deviation of additive pixel noise.
        instances_per_class: size of each class's instance pool.
    """

    seed: int = 0
    num_classes: int = 30
    val_classes: int = 5
    test_classes: int = 5
    image_shape: tuple[int, int, int] = (3, 32, 32)
    freq_band: tuple[float, float] = (1.0, 6.0)
    contrast: tuple[float, float] = (0.3, 1.0)
    mixing: tuple[tuple[float, ...], ...] | None = DEFAULT_MIXING
    max_shift: int = 2
    max_phase: float = np.pi
    noise_std: float = 0.3
    instances_per_class: int = 600

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("image_shape", tuple(int(s) for s in self.image_shape))
        set_("freq_band", tuple(float(f) for f in self.freq_band))
        set_("contrast", tuple(float(c) for c in self.contrast))
        if self.mixing is not None:
            set_("mixing", tuple(tuple(float(v) for v in row) for row in self.mixing))
        c = self.image_shape[0]
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ValueError(f"image_shape must be positive (C, H, W), got {self.image_shape}")
        if not self.freq_band[0] < self.freq_band[1]:
            raise ValueError(f"freq_band needs f_lo < f_hi, got {self.freq_band}")
        if not 0 <= self.contrast[0] <= self.contrast[1]:
            raise ValueError(f"contrast range must satisfy 0 <= lo <= hi, got {self.contrast}")
        if self.noise_std < 0 or self.max_shift < 0 or self.max_phase < 0:
            raise ValueError("noise_std, max_shift and max_phase must be >= 0")
        if self.mixing is not None and np.shape(self.mixing) != (c, c):
            raise ValueError(f"mixing must be {c}x{c}, got shape {np.shape(self.mixing)}")
        if self.val_classes < 0 or self.test_classes < 0 or self.train_classes < 1:
            raise ValueError("split sizes leave no training classes")
        if self.instances_per_class < 1:
            raise ValueError("instances_per_class must be positive")

    @property
    def train_classes(self) -> int:
        return self.num_classes - self.val_classes - self.test_classes

    def mixing_matrix(self) -> np.ndarray:
        c = self.image_shape[0]
        return np.eye(c) if self.mixing is None else np.asarray(self.mixing, dtype=np.float64)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("image_shape", "freq_band", "contrast"):
            d[k] = list(d[k])
        if d["mixing"] is not None:
            d["mixing"] = [list(r) for r in d["mixing"]]
        return d


def fine_grained_spec(seed: int = 0, **overrides) -> DomainSpec:
    """A domain whose classes share a narrow band of frequencies and contrasts.

    Classes then differ mostly in orientation and phase layout, a harder,
    fine-grained style of discrimination than the default domain.
    """
    base = dict(seed=seed, freq_band=(2.0, 3.0), contrast=(0.5, 0.7))
    base.update(overrides)
    return DomainSpec(**base)


def _split_ranges(num_classes: int, val: int, test: int) -> dict[str, list[int]]:
    train = num_classes - val - test
    ids = list(range(num_classes))
    return {"train": ids[:train], "val": ids[train : train + val], "test": ids[train + val :]}


def _centered_cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 1.0
    return float(a @ b / (na * nb))


class SyntheticDomain:
    """Materialized synthetic domain; build with :func:`make_domain`."""

    def __init__(self, spec: DomainSpec):
        self.spec = spec
        self.image_shape = spec.image_shape
        self.splits = _split_ranges(spec.num_classes, spec.val_classes, spec.test_classes)
        c, h, w = spec.image_shape
        yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
        self._grid = (xx, yy)
        self._mix = spec.mixing_matrix()
        self.gratings: list[dict[str, np.ndarray]] = []
        self.prototypes = np.zeros((spec.num_classes, c, h, w), dtype=np.float32)
        self._affine: list[tuple[float, float]] = []
        self.redraws = 0
        self._cache: dict[tuple[int, int], np.ndarray] = {}
        for cid in range(spec.num_classes):
            self._add_class(cid)

    def _draw_gratings(self, rng) -> dict[str, np.ndarray]:
        s = self.spec
        shape = (s.image_shape[0], GRATINGS_PER_CHANNEL)
        return {
            "amp": rng.uniform(*s.contrast, size=shape),
            "freq": rng.uniform(*s.freq_band, size=shape),
            "theta": rng.uniform(0.0, np.pi, size=shape),
            "phase": rng.uniform(0.0, 2 * np.pi, size=shape),
        }

    def _render(self, g, phase) -> np.ndarray:
        xx, yy = self._grid
        arg = (
            2 * np.pi * g["freq"][..., None, None]
            * (np.cos(g["theta"])[..., None, None] * xx + np.sin(g["theta"])[..., None, None] * yy)
            + phase[..., None, None]
        )
        latent = np.sum(g["amp"][..., None, None] * np.cos(arg), axis=1)
        return np.einsum("ij,jhw->ihw", self._mix, latent)

    def _add_class(self, cid: int) -> None:
        for attempt in range(MAX_REDRAWS + 1):
            rng = np.random.default_rng([self.spec.seed, cid, attempt])
            g = self._draw_gratings(rng)
            raw = self._render(g, g["phase"])
            lo, hi = float(raw.min()), float(raw.max())
            span = hi - lo if hi - lo > 1e-12 else 1.0
            proto = ((raw - lo) / span).astype(np.float32)
            if all(_centered_cosine(proto, self.prototypes[j]) < SIMILARITY_LIMIT for j in range(cid)):
                self.gratings.append(g)
                self._affine.append((lo, span))
                self.prototypes[cid] = proto
                self.redraws += attempt
                return
        raise RuntimeError(
            f"class {cid}: prototype similarity limit {SIMILARITY_LIMIT} not met after {MAX_REDRAWS} redraws"
        )

    # -- sample access ----------------------------------------------------

    def class_ids(self, split: str) -> list[int]:
        try:
            return list(self.splits[split])
        except KeyError:
            raise KeyError(f"unknown split {split!r}; valid: {list(SPLITS)}") from None

    def num_instances(self, class_id: int) -> int:
        return self.spec.instances_per_class

    def instance(self, class_id: int, index: int) -> np.ndarray:
        """Sample ``index`` of class ``class_id`` as a ``(C, H, W)`` float32 array.

        Rendered samples are memoized; callers must not modify them.
        """
        key = (class_id, index)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        img = self._render_instance(class_id, index)
        img.flags.writeable = False
        self._cache[key] = img
        return img

    def _render_instance(self, class_id: int, index: int) -> np.ndarray:
        s = self.spec
        if not 0 <= index < s.instances_per_class:
            raise IndexError(f"instance {index} out of range for class {class_id}")
        g = self.gratings[class_id]
        rng = np.random.default_rng([s.seed, class_id, index, 1])
        phase = g["phase"] + rng.uniform(-s.max_phase, s.max_phase, size=g["phase"].shape)
        shift = rng.integers(-s.max_shift, s.max_shift + 1, size=2)
        lo, span = self._affine[class_id]
        img = (self._render(g, phase) - lo) / span
        img = np.roll(img, shift=(int(shift[0]), int(shift[1])), axis=(1, 2))
        if s.noise_std > 0:
            img = img + rng.normal(0.0, s.noise_std, size=img.shape)
        return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_domain(spec: DomainSpec) -> SyntheticDomain:
    return SyntheticDomain(spec)


def _independent_family(spec: DomainSpec) -> dict:
    rng = np.random.default_rng([spec.seed, 0x5EED])
    c = spec.image_shape[0]
    lo = rng.uniform(0.5, 5.0)
    c_lo = rng.uniform(0.1, 0.6)
    mix = rng.uniform(-1.0, 1.0, size=(c, c))
    mix /= np.abs(mix).sum(axis=1, keepdims=True)
    return {
        "freq_band": np.array([lo, lo + rng.uniform(1.0, 5.0)]),
        "contrast": np.array([c_lo, c_lo + rng.uniform(0.1, 0.6)]),
        "mixing": mix,
    }


def shift_domain(spec: DomainSpec, severity: float) -> DomainSpec:
    """Move a domain's pattern family toward an independent random one.

    Frequency band, contrast range and channel mixing are interpolated
    linearly with weight ``severity``. At severity 1 the seed changes too,
    so the target has fresh classes.
    """
    severity = float(severity)
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must lie in [0, 1], got {severity}")
    if severity == 0.0:
        return spec
    other = _independent_family(spec)

    def lerp(a, b):
        return (1.0 - severity) * np.asarray(a, dtype=np.float64) + severity * b

    band = lerp(spec.freq_band, other["freq_band"])
    contrast = lerp(spec.contrast, other["contrast"])
    mix = lerp(spec.mixing_matrix(), other["mixing"])
    seed = spec.seed
    if severity == 1.0:
        seed = int(np.random.default_rng([spec.seed, 0xF00D]).integers(2**31))
    return dataclasses.replace(
        spec,
        seed=seed,
        freq_band=tuple(band.tolist()),
        contrast=tuple(contrast.tolist()),
        mixing=tuple(tuple(r) for r in mix.tolist()),
    )


# ---------------------------------------------------------------------------
# episodes


def sample_episode(domain, split: str, n: int, k: int, q: int, rng: np.random.Generator) -> Episode:
    """Draw an n-way k-shot episode with ``q`` queries per class.

    Classes are drawn without replacement and given labels through a random
    bijection onto ``0..n-1``. Support and query instances of a class are
    distinct draws from its pool.
    """
    classes = domain.class_ids(split)
    if n > len(classes):
        raise ValueError(f"{n}-way episode requested but split {split!r} has {len(classes)} classes")
    chosen = rng.choice(classes, size=n, replace=False)
    labels = rng.permutation(n)
    label_map = {int(c): int(l) for c, l in zip(chosen, labels)}
    by_label = sorted(label_map.items(), key=lambda kv: kv[1])
    sx, sy, qx, qy, sid, qid = [], [], [], [], [], []
    for cid, lab in by_label:
        m = domain.num_instances(cid)
        if m < k + q:
            raise ValueError(f"class {cid} has {m} instances, episode needs {k + q}")
        idx = rng.choice(m, size=k + q, replace=False)
        for j, i in enumerate(idx):
            img = domain.instance(cid, int(i))
            if j < k:
                sx.append(img), sy.append(lab), sid.append((cid, int(i)))
            else:
                qx.append(img), qy.append(lab), qid.append((cid, int(i)))
    return Episode(
        np.stack(sx), np.array(sy), np.stack(qx), np.array(qy), n, k, q,
        label_map, tuple(sid), tuple(qid),
    )


def episode_stream(domain, split: str, n: int, k: int, q: int, seed):
    """Endless, reproducible sequence of episodes for one rng seed."""
    rng = np.random.default_rng(seed)
    while True:
        yield sample_episode(domain, split, n, k, q, rng)


# ---------------------------------------------------------------------------
# on-disk datasets

MANIFEST = "manifest"


def _archive_shape(path: Path) -> tuple[int, ...]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != T.MAGIC:
            raise ValueError(f"{path}: not a tensor archive")
        (rank,) = struct.unpack("<I", head[4:])
        raw = fh.read(4 * rank)
        if len(raw) != 4 * rank:
            raise ValueError(f"{path}: truncated archive header")
        return struct.unpack(f"<{rank}I", raw)


class DiskDataset:
    """Classes stored as ``(num_samples, C, H, W)`` archives under ``root``.

    Archives are read on first use and cached.
    """

    def __init__(self, root, entries: list[tuple[str, int, str]]):
        self.root = Path(root)
        self.splits: dict[str, list[int]] = {s: [] for s in SPLITS}
        self.paths: dict[int, Path] = {}
        self._counts: dict[int, int] = {}
        self._cache: dict[int, np.ndarray] = {}
        shapes = {}
        for split, cid, rel in entries:
            if cid in self.paths:
                raise ValueError(f"{self.root / MANIFEST}: class {cid} listed twice")
            path = self.root / rel
            if not path.is_file():
                raise FileNotFoundError(f"{path}: archive for class {cid} is missing")
            shape = _archive_shape(path)
            if len(shape) != 4:
                raise ValueError(f"{path}: expected (num_samples, C, H, W), got shape {shape}")
            if shape[0] == 0:
                raise ValueError(f"{path}: class {cid} has no samples")
            shapes[cid] = tuple(shape[1:])
            self.splits[split].append(cid)
            self.paths[cid] = path
            self._counts[cid] = shape[0]
        distinct = set(shapes.values())
        if len(distinct) > 1:
            raise ValueError(f"{self.root}: sample shapes differ across classes: {sorted(distinct)}")
        if not distinct:
            raise ValueError(f"{self.root / MANIFEST}: no classes listed")
        self.image_shape = distinct.pop()

    def class_ids(self, split: str) -> list[int]:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}; valid: {list(SPLITS)}")
        return list(self.splits[split])

    def num_instances(self, class_id: int) -> int:
        return self._counts[class_id]

    def samples(self, class_id: int) -> np.ndarray:
        if class_id not in self._cache:
            arr = T.read_archive(self.paths[class_id])
            self._cache[class_id] = arr
        return self._cache[class_id]

    def instance(self, class_id: int, index: int) -> np.ndarray:
        return self.samples(class_id)[index]


def load_dataset(root) -> DiskDataset:
    """Open a dataset directory written by :func:`export_dataset` (or by hand).

    The manifest has one line per class: ``split<TAB>class_id<TAB>path``.
    """
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest}: dataset manifest not found")
    entries = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{manifest}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        split, cid, rel = parts
        if split not in SPLITS:
            raise ValueError(f"{manifest}:{lineno}: unknown split {split!r}")
        try:
            cid = int(cid)
        except ValueError:
            raise ValueError(f"{manifest}:{lineno}: class id {cid!r} is not an integer") from None
        entries.append((split, cid, rel))
    return DiskDataset(root, entries)


def export_dataset(domain, root, per_class: int | None = None) -> Path:
    """Write every class of ``domain`` as an archive plus a manifest."""
    root = Path(root)
    lines = []
    for split in SPLITS:
        os.makedirs(root / split, exist_ok=True)
        for cid in domain.class_ids(split):
            count = domain.num_instances(cid) if per_class is None else min(per_class, domain.num_instances(cid))
            arr = np.stack([domain.instance(cid, i) for i in range(count)])
            rel = f"{split}/class_{cid:05d}.mlt"
            T.write_archive(root / rel, arr)
            lines.append(f"{split}\t{cid}\t{rel}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return root
